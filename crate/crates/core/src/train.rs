//! Staged training: freeze masks, warmup-cosine learning rate and AdamW.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{
    aux_loss_on, coarse_on, cross_entropy_on, forward_on, ForwardInput, ParamGroup, ToyModel,
};
use crate::moe::{expert_shares, load_balance_on, moe_forward_on, MoELayer, RoutingRecord};
use crate::params::Params;
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StageName {
    Stage1_1,
    Stage1_2,
    Stage2_1,
    Stage2_2,
}

impl StageName {
    pub const ALL: [StageName; 4] = [
        StageName::Stage1_1,
        StageName::Stage1_2,
        StageName::Stage2_1,
        StageName::Stage2_2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Stage1_1 => "stage_1_1",
            StageName::Stage1_2 => "stage_1_2",
            StageName::Stage2_1 => "stage_2_1",
            StageName::Stage2_2 => "stage_2_2",
        }
    }

    /// Stages 2.x run on the upcycled sparse model.
    pub fn is_sparse(self) -> bool {
        matches!(self, StageName::Stage2_1 | StageName::Stage2_2)
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage {s:?}")))
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl Serialize for $t {
            fn serialize<S: serde::Serializer>(
                &self,
                s: S,
            ) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_string())
            }
        }

        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: serde::Deserializer<'de>>(
                d: D,
            ) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?
                    .parse()
                    .map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(StageName);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    CrossEntropy,
    Coarse,
    Aux,
}

impl LossTerm {
    pub fn name(self) -> &'static str {
        match self {
            LossTerm::CrossEntropy => "cross_entropy",
            LossTerm::Coarse => "coarse",
            LossTerm::Aux => "aux",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub name: StageName,
    pub losses: BTreeSet<LossTerm>,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// weight of the load-balance term
    pub alpha: f64,
    /// overrides the stage's freeze mask when set
    pub trainable: Option<BTreeSet<ParamGroup>>,
    /// stage_2_1 only: fraction of steps with experts frozen
    pub phase_a_fraction: f64,
    /// routing telemetry is recorded every this many steps, and at the last step
    pub log_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl StageConfig {
    /// Per-stage learning rate, warmup, decay and schedule defaults.
    pub fn defaults(name: StageName) -> Self {
        use LossTerm::*;
        let (lr, warmup_ratio, weight_decay, schedule, losses): (
            f64,
            f64,
            f64,
            LrSchedule,
            &[LossTerm],
        ) = match name {
            StageName::Stage1_1 => (2e-5, 0.03, 0.05, LrSchedule::Cosine, &[CrossEntropy]),
            StageName::Stage1_2 => (2e-6, 0.03, 0.05, LrSchedule::Cosine, &[CrossEntropy]),
            StageName::Stage2_1 => (1e-4, 0.05, 0.05, LrSchedule::Cosine, &[Coarse, Aux]),
            StageName::Stage2_2 => (1e-5, 0.05, 0.1, LrSchedule::Constant, &[CrossEntropy, Aux]),
        };
        StageConfig {
            name,
            losses: losses.iter().copied().collect(),
            lr,
            warmup_ratio,
            schedule,
            weight_decay,
            steps: 100,
            batch_size: 8,
            alpha: 0.01,
            trainable: None,
            phase_a_fraction: 0.3,
            log_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(format!("{}: {m}", self.name)));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!(
                "warmup_ratio must lie in [0, 1), got {}",
                self.warmup_ratio
            ));
        }
        if self.losses.is_empty() {
            return bad("at least one loss term is required".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and >= 0".into());
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be >= 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.phase_a_fraction) {
            return bad("phase_a_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return bad("optimizer moments must lie in [0, 1) and eps must be > 0".into());
        }
        Ok(())
    }

    /// Number of leading stage_2_1 steps with the experts frozen.
    pub fn phase_a_steps(&self) -> usize {
        if self.name == StageName::Stage2_1 {
            (self.phase_a_fraction * self.steps as f64).round() as usize
        } else {
            0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    A,
    B,
}

/// Trainable parameter groups; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub trainable: BTreeSet<ParamGroup>,
}

impl FreezeMask {
    pub fn is_trainable(&self, g: ParamGroup) -> bool {
        self.trainable.contains(&g)
    }

    pub fn frozen(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !self.is_trainable(*g))
            .collect()
    }
}

/// Default trainable groups per stage.
///
/// stage_1_1 trains the projector only, stage_1_2 the FFNs only, stage_2_1
/// the router and alignment modules (plus the experts in phase B) and
/// stage_2_2 the router and experts.
pub fn stage_mask(stage: StageName, phase: Phase) -> FreezeMask {
    use ParamGroup::*;
    let groups: &[ParamGroup] = match (stage, phase) {
        (StageName::Stage1_1, _) => &[Projector],
        (StageName::Stage1_2, _) => &[FfnExperts],
        (StageName::Stage2_1, Phase::A) => &[Router, Alignment],
        (StageName::Stage2_1, Phase::B) => &[Router, Alignment, FfnExperts],
        (StageName::Stage2_2, _) => &[Router, FfnExperts],
    };
    FreezeMask {
        trainable: groups.iter().copied().collect(),
    }
}

pub fn make_freeze_mask(stage: &StageConfig, phase: Phase) -> FreezeMask {
    match &stage.trainable {
        Some(groups) => FreezeMask {
            trainable: groups.clone(),
        },
        None => stage_mask(stage.name, phase),
    }
}

/// Linear warmup from 0 to `lr`, then cosine decay to 0 or a constant `lr`.
pub fn lr_at(step: usize, cfg: &StageConfig) -> f64 {
    let warmup = (cfg.warmup_ratio * cfg.steps as f64).round() as usize;
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    match cfg.schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let span = cfg.steps.saturating_sub(warmup);
            if span == 0 {
                return cfg.lr;
            }
            let t = (step - warmup).min(span) as f64 / span as f64;
            cfg.lr * 0.5 * (1.0 + (PI * t).cos())
        }
    }
}

/// AdamW moment state for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u32>,
}

impl AdamW {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// One update of parameter `i`. Moments advance only for tensors that are
    /// actually stepped, so frozen stretches leave no trace.
    pub fn step(&mut self, i: usize, param: &mut [f64], grad: &[f64], lr: f64) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m[i])
            .zip(&mut self.v[i])
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + self.eps);
            *p -= lr * (update + self.weight_decay * *p);
        }
    }
}

/// Mean loss terms over a set of samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cross_entropy: Option<f64>,
    pub coarse: Option<f64>,
    pub aux: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub total: f64,
    pub cross_entropy: Option<f64>,
    pub coarse: Option<f64>,
    pub aux: Option<f64>,
    pub lr: f64,
    /// mean per-token routing entropy over MoE layers, if any
    pub routing_entropy: Option<f64>,
}

/// Expert share of one MoE layer at one logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub step: usize,
    pub layer: usize,
    pub expert: usize,
    pub token_fraction: f64,
    pub mean_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: StageName,
    pub seed: u64,
    pub config: StageConfig,
    pub steps_run: usize,
    pub phase_b_start: Option<usize>,
    pub initial: LossValues,
    #[serde(rename = "final")]
    pub final_: LossValues,
    /// `‖θ_after − θ_before‖` per parameter group
    pub param_delta: BTreeMap<ParamGroup, f64>,
    pub moe_layers: Vec<usize>,
    #[serde(skip)]
    pub curve: Vec<CurveRow>,
    #[serde(skip)]
    pub routing: Vec<TelemetryRow>,
}

impl StageReport {
    /// Writes `curve.csv`, `routing.csv` and `report.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_csv(&dir.join("curve.csv"), &self.curve)?;
        write_csv(&dir.join("routing.csv"), &self.routing)?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        let path = dir.join("report.json");
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

/// Per-sample terms built on a tape.
struct SampleTerms {
    total: Var,
    ce: Option<Var>,
    coarse: Option<Var>,
    aux: Option<Var>,
    routing: Vec<(usize, RoutingRecord)>,
}

/// Prefixes non-finite diagnostics with the loss term they belong to.
fn tag<T>(r: Result<T>, what: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{what}: {m}")),
        e => e,
    })
}

fn sample_terms(
    tape: &mut Tape,
    model: &ToyModel,
    vars: &crate::model::ModelVars,
    s: &Sample,
    cfg: &StageConfig,
) -> Result<SampleTerms> {
    let feeding: Vec<&str> = cfg.losses.iter().map(|t| t.name()).collect();
    let out = tag(
        forward_on(
            tape,
            model,
            vars,
            ForwardInput {
                visual: &s.visual,
                geo: s.geo.as_ref(),
                text_ids: &s.text_ids,
                synergy_count: if cfg.losses.contains(&LossTerm::Coarse) {
                    s.synergy_count
                } else {
                    0
                },
            },
        ),
        &format!("forward pass feeding {}", feeding.join("+")),
    )?;
    let ce = if cfg.losses.contains(&LossTerm::CrossEntropy) {
        if s.ce_rows.is_empty() {
            return Err(Error::Data(format!(
                "{}: sample has no cross-entropy targets",
                cfg.name
            )));
        }
        Some(tag(
            cross_entropy_on(tape, out.logits, &s.ce_rows, &s.ce_targets),
            LossTerm::CrossEntropy.name(),
        )?)
    } else {
        None
    };
    let coarse = if cfg.losses.contains(&LossTerm::Coarse) {
        let teachers = s
            .teachers
            .as_ref()
            .ok_or_else(|| Error::Data(format!("{}: sample has no teacher features", cfg.name)))?;
        Some(tag(
            coarse_on(tape, model, vars, &out, teachers),
            LossTerm::Coarse.name(),
        )?)
    } else {
        None
    };
    let aux = if cfg.losses.contains(&LossTerm::Aux) {
        Some(
            tag(aux_loss_on(tape, &out.routing), LossTerm::Aux.name())?.ok_or_else(|| {
                Error::Parameter(format!("{}: aux loss needs MoE layers", cfg.name))
            })?,
        )
    } else {
        None
    };
    let mut parts = Vec::new();
    parts.extend(ce);
    parts.extend(coarse);
    if let Some(a) = aux {
        parts.push(tape.scale(a, cfg.alpha)?);
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    let routing = out
        .routing
        .into_iter()
        .map(|r| (r.layer, r.record))
        .collect();
    Ok(SampleTerms {
        total,
        ce,
        coarse,
        aux,
        routing,
    })
}

struct BatchOutcome {
    values: LossValues,
    routing: Vec<(usize, RoutingRecord)>,
}

fn check_finite(name: &str, v: f64, stage: StageName, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "{name} loss is {v} at {stage} step {step}"
        )))
    }
}

/// Builds and optionally differentiates the batch loss.
fn run_batch(
    tape: &mut Tape,
    model: &ToyModel,
    vars: &crate::model::ModelVars,
    batch: &[&Sample],
    cfg: &StageConfig,
    step: usize,
    differentiate: bool,
) -> Result<BatchOutcome> {
    let n = batch.len() as f64;
    let mut totals = Vec::with_capacity(batch.len());
    let mut sums = [0.0f64; 3];
    let mut routing = Vec::new();
    for s in batch {
        let terms = sample_terms(tape, model, vars, s, cfg).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("{} step {step}: {m}", cfg.name)),
            e => e,
        })?;
        for (acc, v) in sums.iter_mut().zip([terms.ce, terms.coarse, terms.aux]) {
            if let Some(v) = v {
                *acc += tape.scalar(v)?;
            }
        }
        totals.push(terms.total);
        routing.extend(terms.routing);
    }
    let mut total = totals[0];
    for &t in &totals[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / n)?;
    let pick = |term: LossTerm, v: f64| cfg.losses.contains(&term).then_some(v / n);
    let values = LossValues {
        total: tape.scalar(total)?,
        cross_entropy: pick(LossTerm::CrossEntropy, sums[0]),
        coarse: pick(LossTerm::Coarse, sums[1]),
        aux: pick(LossTerm::Aux, sums[2]),
    };
    for (name, v) in [
        ("cross_entropy", values.cross_entropy),
        ("coarse", values.coarse),
        ("aux", values.aux),
    ] {
        if let Some(v) = v {
            check_finite(name, v, cfg.name, step)?;
        }
    }
    check_finite("total", values.total, cfg.name, step)?;
    if differentiate {
        tape.backward(total)?;
    }
    Ok(BatchOutcome { values, routing })
}

/// Mean loss terms of `data` under `cfg`'s objective, without updating.
pub fn evaluate(model: &ToyModel, data: &[Sample], cfg: &StageConfig) -> Result<LossValues> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let batch: Vec<&Sample> = data.iter().collect();
    Ok(run_batch(&mut tape, model, &vars, &batch, cfg, 0, false)?.values)
}

fn routing_entropy(routing: &[(usize, RoutingRecord)]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (_, r) in routing {
        for t in 0..r.tokens() {
            sum -= r
                .probs
                .row(t)
                .iter()
                .filter(|p| **p > 0.0)
                .map(|p| p * p.ln())
                .sum::<f64>();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn telemetry(
    step: usize,
    routing: &[(usize, RoutingRecord)],
    layers: &[usize],
) -> Result<Vec<TelemetryRow>> {
    let mut rows = Vec::new();
    for &l in layers {
        let recs: Vec<&RoutingRecord> = routing
            .iter()
            .filter(|(rl, _)| *rl == l)
            .map(|(_, r)| r)
            .collect();
        if recs.is_empty() {
            continue;
        }
        rows.extend(expert_shares(l, &recs)?.into_iter().map(|s| TelemetryRow {
            step,
            layer: s.layer,
            expert: s.expert,
            token_fraction: s.token_fraction,
            mean_prob: s.mean_prob,
        }));
    }
    Ok(rows)
}

/// Runs `cfg.steps` AdamW updates over minibatches drawn from `data`.
///
/// Parameters outside the stage's freeze mask are bound as constants and
/// never written, so their delta is exactly zero.
pub fn train_stage(
    model: &mut ToyModel,
    cfg: &StageConfig,
    data: &[Sample],
    seed: u64,
) -> Result<StageReport> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: training set is empty", cfg.name)));
    }
    if cfg.name.is_sparse() && !model.is_upcycled() {
        return Err(Error::Parameter(format!(
            "{} needs the upcycled sparse model",
            cfg.name
        )));
    }
    let moe_layers = model.moe_layers();
    let before: Vec<Tensor> = model.param_tensors().into_iter().cloned().collect();
    let groups = model.param_groups();
    let initial = evaluate(model, data, cfg)?;
    let sizes: Vec<usize> = before.iter().map(Tensor::len).collect();
    let mut opt = AdamW::new(&sizes, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = stream(seed, &format!("batches/{}", cfg.name));
    let phase_a = cfg.phase_a_steps();
    let batch_size = cfg.batch_size.min(data.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut routing_rows = Vec::new();

    for step in 0..cfg.steps {
        let phase = if step < phase_a { Phase::A } else { Phase::B };
        let mask = make_freeze_mask(cfg, phase);
        let mut idx = sample(&mut rng, data.len(), batch_size).into_vec();
        idx.sort_unstable();
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();

        let mut tape = Tape::new();
        let mut bound: Vec<(bool, Var)> = Vec::with_capacity(groups.len());
        let vars = model.bind_grouped(&mut |g, t| {
            let train = mask.is_trainable(g);
            let v = if train {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bound.push((train, v));
            v
        });
        let outcome = run_batch(&mut tape, model, &vars, &batch, cfg, step, true)?;
        let lr = lr_at(step, cfg);
        curve.push(CurveRow {
            step,
            total: outcome.values.total,
            cross_entropy: outcome.values.cross_entropy,
            coarse: outcome.values.coarse,
            aux: outcome.values.aux,
            lr,
            routing_entropy: routing_entropy(&outcome.routing),
        });
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            routing_rows.extend(telemetry(step, &outcome.routing, &moe_layers)?);
        }

        let mut i = 0;
        model.visit_mut(&mut |p| {
            let (train, v) = bound[i];
            if train {
                let zero;
                let g = match tape.grad(v) {
                    Some(g) => g,
                    None => {
                        zero = vec![0.0; p.len()];
                        &zero
                    }
                };
                opt.step(i, p.data_mut(), g, lr);
            }
            i += 1;
        });
    }

    let mut delta: BTreeMap<ParamGroup, f64> = ParamGroup::ALL.iter().map(|g| (*g, 0.0)).collect();
    for ((g, b), a) in groups.iter().zip(&before).zip(model.param_tensors()) {
        let sq: f64 = b
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| (y - x) * (y - x))
            .sum();
        *delta.get_mut(g).expect("all groups present") += sq;
    }
    delta.values_mut().for_each(|v| *v = v.sqrt());
    let final_ = evaluate(model, data, cfg)?;
    if model
        .param_tensors()
        .iter()
        .any(|t| t.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "{}: parameters diverged",
            cfg.name
        )));
    }
    Ok(StageReport {
        stage: cfg.name,
        seed,
        config: cfg.clone(),
        steps_run: cfg.steps,
        phase_b_start: (cfg.name == StageName::Stage2_1).then_some(phase_a),
        initial,
        final_,
        param_delta: delta,
        moe_layers,
        curve,
        routing: routing_rows,
    })
}

/// Trains only the router of `layer` on a fixed batch with loss `alpha·L_aux`
/// and returns the largest expert token share before each step and after the
/// last one.
pub fn train_router_balance(
    layer: &mut MoELayer,
    x: &Tensor,
    alpha: f64,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    layer.validate()?;
    let mut opt = AdamW::new(&[layer.router.weight.len()], 0.9, 0.999, 1e-8, 0.0);
    let mut shares = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut vars = layer.bind_constants(&mut tape);
        vars.router = tape.leaf(layer.router.weight.clone());
        let out = moe_forward_on(&mut tape, xv, &vars, layer.top_k, layer.renormalize)?;
        let f = out.record.token_fractions();
        shares.push(f.iter().copied().fold(0.0, f64::max));
        if step == steps {
            break;
        }
        let aux = load_balance_on(&mut tape, out.probs, &out.record)?;
        let loss = tape.scale(aux, alpha)?;
        tape.backward(loss)?;
        let g = tape
            .grad(vars.router)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; layer.router.weight.len()]);
        opt.step(0, layer.router.weight.data_mut(), &g, lr);
    }
    Ok(shares)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in StageName::ALL {
            assert_eq!(s.as_str().parse::<StageName>().unwrap(), s);
        }
        assert!(matches!(
            "stage_3".parse::<StageName>(),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn stage_defaults_validate() {
        for s in StageName::ALL {
            StageConfig::defaults(s).validate().unwrap();
        }
        let mut c = StageConfig::defaults(StageName::Stage1_1);
        c.losses.clear();
        assert!(c.validate().is_err());
        c = StageConfig::defaults(StageName::Stage1_1);
        c.warmup_ratio = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn masks() {
        assert_eq!(stage_mask(StageName::Stage1_1, Phase::A).trainable.len(), 1);
        assert!(stage_mask(StageName::Stage1_1, Phase::B).is_trainable(ParamGroup::Projector));
        assert!(!stage_mask(StageName::Stage2_1, Phase::A).is_trainable(ParamGroup::FfnExperts));
        assert!(stage_mask(StageName::Stage2_1, Phase::B).is_trainable(ParamGroup::FfnExperts));
        let mut union = BTreeSet::new();
        for s in StageName::ALL {
            for p in [Phase::A, Phase::B] {
                union.extend(stage_mask(s, p).trainable);
            }
        }
        let expected: BTreeSet<_> = [
            ParamGroup::Projector,
            ParamGroup::FfnExperts,
            ParamGroup::Router,
            ParamGroup::Alignment,
        ]
        .into_iter()
        .collect();
        assert_eq!(union, expected);
    }

    #[test]
    fn lr_schedule_closed_forms() {
        let mut c = StageConfig::defaults(StageName::Stage1_1);
        c.steps = 200;
        c.warmup_ratio = 0.1;
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(20, &c), c.lr);
        assert!(lr_at(200, &c).abs() < 1e-12);
        assert!((lr_at(110, &c) - c.lr / 2.0).abs() < 1e-9);
        c.schedule = LrSchedule::Constant;
        assert_eq!(lr_at(150, &c), c.lr);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut opt = AdamW::new(&[2], 0.9, 0.999, 1e-8, 0.0);
        let mut p = vec![1.0, 1.0];
        opt.step(0, &mut p, &[3.0, -0.5], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut opt = AdamW::new(&[1], 0.9, 0.999, 1e-8, 0.5);
        let mut p = vec![2.0];
        opt.step(0, &mut p, &[0.0], 0.1);
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
