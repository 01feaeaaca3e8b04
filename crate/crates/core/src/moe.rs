//! Sparse mixture-of-experts layer.
//!
//! A linear router scores each token against `M` experts, the softmax of
//! those scores is the routing distribution, and only the `k` most probable
//! experts run on the token. Their outputs are mixed with the selected
//! probabilities renormalized to sum to one.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::{ops, Tensor};

/// Gated feed-forward expert: `(silu(x·W_gate) ⊙ (x·W_up))·W_down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFFN {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub gate: Var,
    pub up: Var,
    pub down: Var,
}

impl ExpertFFN {
    pub fn new(w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Result<Self> {
        let (d, h) = w_gate.dims2()?;
        if w_up.shape() != [d, h] {
            return Err(Error::dim("expert w_up", w_gate.shape(), w_up.shape()));
        }
        if w_down.shape() != [h, d] {
            return Err(Error::dim("expert w_down", w_gate.shape(), w_down.shape()));
        }
        Ok(ExpertFFN {
            w_gate,
            w_up,
            w_down,
        })
    }

    pub fn zeros(d_model: usize, d_hidden: usize) -> Self {
        ExpertFFN {
            w_gate: Tensor::zeros(&[d_model, d_hidden]),
            w_up: Tensor::zeros(&[d_model, d_hidden]),
            w_down: Tensor::zeros(&[d_hidden, d_model]),
        }
    }

    /// Gaussian init with fan-in scaling times `gain`.
    pub fn random(d_model: usize, d_hidden: usize, gain: f64, rng: &mut crate::rng::Rng) -> Self {
        let s_in = gain / (d_model as f64).sqrt();
        let s_out = gain / (d_hidden as f64).sqrt();
        ExpertFFN {
            w_gate: Tensor::randn(&[d_model, d_hidden], s_in, rng),
            w_up: Tensor::randn(&[d_model, d_hidden], s_in, rng),
            w_down: Tensor::randn(&[d_hidden, d_model], s_out, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w_gate.shape()[1]
    }
}

impl Params for ExpertFFN {
    type Vars = ExpertVars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> ExpertVars {
        ExpertVars {
            gate: next(&self.w_gate),
            up: next(&self.w_up),
            down: next(&self.w_down),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.w_gate);
        f(&self.w_up);
        f(&self.w_down);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w_gate);
        f(&mut self.w_up);
        f(&mut self.w_down);
    }
}

pub fn expert_forward_on(tape: &mut Tape, x: Var, e: &ExpertVars) -> Result<Var> {
    let gate = tape.matmul(x, e.gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(x, e.up)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, e.down)
}

pub fn expert_forward(x: &Tensor, e: &ExpertFFN) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = e.bind_constants(&mut tape);
    let y = expert_forward_on(&mut tape, xv, &vars)?;
    Ok(tape.value(y).clone())
}

/// Bias-free linear router producing one logit per expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Router {
    pub weight: Tensor,
}

impl Router {
    pub fn zeros(d_model: usize, experts: usize) -> Self {
        Router {
            weight: Tensor::zeros(&[d_model, experts]),
        }
    }

    pub fn experts(&self) -> usize {
        self.weight.cols()
    }
}

impl Params for Router {
    type Vars = Var;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> Var {
        next(&self.weight)
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.weight);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub router: Router,
    pub experts: Vec<ExpertFFN>,
    pub top_k: usize,
    /// Renormalize the selected probabilities to sum to one (default). When
    /// false the raw softmax probabilities are used as mixing weights.
    pub renormalize: bool,
}

#[derive(Clone, Debug)]
pub struct MoEVars {
    pub router: Var,
    pub experts: Vec<ExpertVars>,
}

impl MoELayer {
    pub fn new(router: Router, experts: Vec<ExpertFFN>, top_k: usize) -> Result<Self> {
        let layer = MoELayer {
            router,
            experts,
            top_k,
            renormalize: true,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.experts.len();
        if m == 0 {
            return Err(Error::Parameter(
                "MoE layer needs at least one expert".into(),
            ));
        }
        if self.top_k == 0 || self.top_k > m {
            return Err(Error::Parameter(format!(
                "top_k must satisfy 1 <= k <= {m}, got {}",
                self.top_k
            )));
        }
        let (d, rm) = self.router.weight.dims2()?;
        if rm != m {
            return Err(Error::Parameter(format!(
                "router has {rm} columns for {m} experts"
            )));
        }
        let first = &self.experts[0];
        if first.d_model() != d {
            return Err(Error::dim(
                "moe layer",
                self.router.weight.shape(),
                first.w_gate.shape(),
            ));
        }
        for e in &self.experts {
            if e.w_gate.shape() != first.w_gate.shape() {
                return Err(Error::dim(
                    "moe experts",
                    first.w_gate.shape(),
                    e.w_gate.shape(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.router.weight.shape()[0]
    }
}

impl Params for MoELayer {
    type Vars = MoEVars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> MoEVars {
        MoEVars {
            router: self.router.bind(next),
            experts: self.experts.iter().map(|e| e.bind(next)).collect(),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.router.visit(f);
        self.experts.iter().for_each(|e| e.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.router.visit_mut(f);
        self.experts.iter_mut().for_each(|e| e.visit_mut(f));
    }
}

/// Routing decisions for one layer over one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRecord {
    /// full softmax distribution, `tokens × M`
    pub probs: Tensor,
    /// per token, the `k` chosen experts in descending probability
    pub selected: Vec<Vec<usize>>,
    /// per token, mixing weights aligned with `selected`
    pub weights: Vec<Vec<f64>>,
    /// rows actually fed through each expert
    pub expert_evals: Vec<usize>,
}

impl RoutingRecord {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn experts(&self) -> usize {
        self.probs.cols()
    }

    pub fn total_expert_evals(&self) -> usize {
        self.expert_evals.iter().sum()
    }

    /// Argmax expert per token, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.tokens())
            .map(|t| ops::top_k(self.probs.row(t), 1).expect("M >= 1").0[0])
            .collect()
    }

    /// `F_i`: fraction of tokens whose argmax expert is `i`.
    pub fn token_fractions(&self) -> Vec<f64> {
        let mut f = vec![0.0; self.experts()];
        let n = self.tokens();
        for e in self.argmax() {
            f[e] += 1.0;
        }
        f.iter_mut().for_each(|v| *v /= n as f64);
        f
    }

    /// `G_i`: mean routing probability of expert `i`.
    pub fn mean_probs(&self) -> Vec<f64> {
        let m = self.experts();
        let mut g = vec![0.0; m];
        for t in 0..self.tokens() {
            for (acc, p) in g.iter_mut().zip(self.probs.row(t)) {
                *acc += p;
            }
        }
        g.iter_mut().for_each(|v| *v /= self.tokens() as f64);
        g
    }

    /// Smallest probability gap that decides any selection or argmax in this
    /// record. Finite differences are only trustworthy when this is well
    /// above the perturbation size.
    pub fn decision_margin(&self) -> f64 {
        let k = self.selected.first().map_or(0, Vec::len);
        let m = self.experts();
        let mut margin = f64::INFINITY;
        for t in 0..self.tokens() {
            let mut row = self.probs.row(t).to_vec();
            row.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
            if m > 1 {
                margin = margin.min(row[0] - row[1]);
            }
            if k < m {
                margin = margin.min(row[k - 1] - row[k]);
            }
        }
        margin
    }
}

/// Tape-level routing: returns `(probs, mixing weights, selections)`.
pub fn route_on(
    tape: &mut Tape,
    x: Var,
    router: Var,
    top_k: usize,
    renormalize: bool,
) -> Result<(Var, Var, Vec<Vec<usize>>)> {
    let logits = tape.matmul(x, router)?;
    let probs = tape.softmax(logits, 1)?;
    let p = tape.value(probs);
    let selected = (0..p.rows())
        .map(|t| ops::top_k(p.row(t), top_k).map(|(idx, _)| idx))
        .collect::<Result<Vec<_>>>()?;
    let weights = tape.top_k_weights(probs, &selected, renormalize)?;
    Ok((probs, weights, selected))
}

fn record_from(
    tape: &Tape,
    probs: Var,
    weights: Var,
    selected: Vec<Vec<usize>>,
    evals: Vec<usize>,
) -> RoutingRecord {
    let w = tape.value(weights);
    let mixing = selected
        .iter()
        .enumerate()
        .map(|(t, sel)| sel.iter().map(|&e| w.at(t, e)).collect())
        .collect();
    RoutingRecord {
        probs: tape.value(probs).clone(),
        selected,
        weights: mixing,
        expert_evals: evals,
    }
}

/// Routing decisions without running any expert.
pub fn route(x: &Tensor, layer: &MoELayer) -> Result<RoutingRecord> {
    layer.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let r = layer.router.bind_constants(&mut tape);
    let (probs, weights, selected) = route_on(&mut tape, xv, r, layer.top_k, layer.renormalize)?;
    Ok(record_from(
        &tape,
        probs,
        weights,
        selected,
        vec![0; layer.num_experts()],
    ))
}

/// Tape-level result of one MoE layer.
pub struct MoEOutput {
    pub y: Var,
    pub probs: Var,
    pub record: RoutingRecord,
}

/// Sparse forward: each expert sees only the tokens that selected it.
pub fn moe_forward_on(
    tape: &mut Tape,
    x: Var,
    vars: &MoEVars,
    top_k: usize,
    renormalize: bool,
) -> Result<MoEOutput> {
    let (tokens, d) = tape.value(x).dims2()?;
    let (probs, weights, selected) = route_on(tape, x, vars.router, top_k, renormalize)?;
    let m = vars.experts.len();
    let mut evals = vec![0; m];
    let mut y: Option<Var> = None;
    for (e, ev) in vars.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..tokens).filter(|&t| selected[t].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        evals[e] += rows.len();
        let xe = tape.gather_rows(x, &rows)?;
        let ye = expert_forward_on(tape, xe, ev)?;
        let col = tape.slice_cols(weights, e, 1)?;
        let we = tape.gather_rows(col, &rows)?;
        let scaled = tape.row_scale(ye, we)?;
        let part = tape.scatter_rows(scaled, &rows, tokens)?;
        y = Some(match y {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let y = match y {
        Some(y) => y,
        None => tape.constant(Tensor::zeros(&[tokens, d])),
    };
    let record = record_from(tape, probs, weights, selected, evals);
    Ok(MoEOutput { y, probs, record })
}

pub fn moe_forward(x: &Tensor, layer: &MoELayer) -> Result<(Tensor, RoutingRecord)> {
    layer.validate()?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let vars = layer.bind_constants(&mut tape);
    let out = moe_forward_on(&mut tape, xv, &vars, layer.top_k, layer.renormalize)?;
    Ok((tape.value(out.y).clone(), out.record))
}

/// `M · Σ_i F_i · G_i` for one routing record.
pub fn load_balance_loss(record: &RoutingRecord, experts: usize) -> Result<f64> {
    if record.tokens() == 0 {
        return Err(Error::Parameter(
            "load-balance loss over zero tokens".into(),
        ));
    }
    if record.experts() != experts {
        return Err(Error::Parameter(format!(
            "record has {} experts, expected {experts}",
            record.experts()
        )));
    }
    let f = record.token_fractions();
    let g = record.mean_probs();
    Ok(experts as f64 * f.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>())
}

/// Tape-level load-balance loss. `F` is a constant of the routing decisions,
/// so the gradient reaches the router only through `G`.
pub fn load_balance_on(tape: &mut Tape, probs: Var, record: &RoutingRecord) -> Result<Var> {
    let (t, m) = tape.value(probs).dims2()?;
    if t == 0 {
        return Err(Error::Parameter(
            "load-balance loss over zero tokens".into(),
        ));
    }
    let f = record.token_fractions();
    let coeff: Vec<f64> = (0..t)
        .flat_map(|_| f.iter().map(|fi| m as f64 * fi / t as f64))
        .collect();
    let c = tape.constant(Tensor::new(vec![t, m], coeff)?);
    let weighted = tape.mul(probs, c)?;
    tape.sum(weighted)
}

/// Builds an `M`-expert layer whose experts all start as copies of `dense`
/// plus seeded Gaussian noise. The router starts at zero, i.e. uniform.
pub fn upcycle_from_dense(
    dense: &ExpertFFN,
    experts: usize,
    top_k: usize,
    noise_scale: f64,
    seed: u64,
) -> Result<MoELayer> {
    if experts == 0 {
        return Err(Error::Parameter("upcycling needs M >= 1".into()));
    }
    if !noise_scale.is_finite() || noise_scale < 0.0 {
        return Err(Error::Parameter(format!(
            "noise_scale must be >= 0, got {noise_scale}"
        )));
    }
    let mut rng = stream(seed, "upcycle");
    let copies = (0..experts)
        .map(|_| {
            let mut e = dense.clone();
            if noise_scale > 0.0 {
                e.visit_mut(&mut |t| {
                    let noise = Tensor::randn(t.shape(), noise_scale, &mut rng);
                    t.data_mut()
                        .iter_mut()
                        .zip(noise.data())
                        .for_each(|(a, b)| *a += b);
                });
            }
            e
        })
        .collect();
    MoELayer::new(Router::zeros(dense.d_model(), experts), copies, top_k)
}

/// Which blocks of the stack host MoE layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlacementMode {
    FirstHalf,
    LastHalf,
    Interval(usize),
    Full,
}

impl PlacementMode {
    /// The four placements compared in the architecture ablation.
    pub const ABLATION: [PlacementMode; 4] = [
        PlacementMode::FirstHalf,
        PlacementMode::LastHalf,
        PlacementMode::Interval(4),
        PlacementMode::Full,
    ];
}

impl fmt::Display for PlacementMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlacementMode::FirstHalf => f.write_str("first_half"),
            PlacementMode::LastHalf => f.write_str("last_half"),
            PlacementMode::Interval(n) => write!(f, "interval({n})"),
            PlacementMode::Full => f.write_str("full"),
        }
    }
}

impl FromStr for PlacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "first_half" => return Ok(PlacementMode::FirstHalf),
            "last_half" => return Ok(PlacementMode::LastHalf),
            "full" => return Ok(PlacementMode::Full),
            _ => {}
        }
        let n = s
            .strip_prefix("interval(")
            .and_then(|r| r.strip_suffix(')'))
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::Parameter(format!("invalid placement mode {s:?}")))?;
        Ok(PlacementMode::Interval(n))
    }
}

impl Serialize for PlacementMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PlacementMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub total_layers: usize,
    pub moe_layer_indices: Vec<usize>,
    pub mode: PlacementMode,
}

impl LayerSchedule {
    pub fn is_moe(&self, layer: usize) -> bool {
        self.moe_layer_indices.binary_search(&layer).is_ok()
    }

    pub fn count(&self) -> usize {
        self.moe_layer_indices.len()
    }
}

/// Zero-based MoE block indices for a placement mode.
///
/// `interval(n)` yields `{0, n, 2n, ...} ∩ [0, L)`. For a 28-layer stack and
/// `n = 4` that is seven layers, 0 through 24; index 28 would be past the end.
pub fn build_schedule(total_layers: usize, mode: PlacementMode) -> Result<LayerSchedule> {
    if total_layers == 0 {
        return Err(Error::Parameter("schedule needs at least one layer".into()));
    }
    let half = total_layers.div_ceil(2);
    let moe_layer_indices = match mode {
        PlacementMode::FirstHalf => (0..half).collect(),
        PlacementMode::LastHalf => (total_layers - half..total_layers).collect(),
        PlacementMode::Interval(0) => {
            return Err(Error::Parameter("interval placement needs n >= 1".into()));
        }
        PlacementMode::Interval(n) => (0..total_layers).step_by(n).collect(),
        PlacementMode::Full => (0..total_layers).collect(),
    };
    Ok(LayerSchedule {
        total_layers,
        moe_layer_indices,
        mode,
    })
}

/// Token share and mean probability of one expert in one MoE layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertShare {
    pub layer: usize,
    pub expert: usize,
    /// fraction of tokens whose argmax expert is this one
    pub token_fraction: f64,
    pub mean_prob: f64,
}

/// Pools records of one layer (e.g. every sequence in a batch) token-wise.
pub fn expert_shares(layer: usize, records: &[&RoutingRecord]) -> Result<Vec<ExpertShare>> {
    let m = records
        .first()
        .map(|r| r.experts())
        .ok_or_else(|| Error::Parameter("no routing records".into()))?;
    let mut counts = vec![0.0; m];
    let mut mass = vec![0.0; m];
    let mut tokens = 0usize;
    for r in records {
        if r.experts() != m {
            return Err(Error::Parameter("records disagree on expert count".into()));
        }
        for e in r.argmax() {
            counts[e] += 1.0;
        }
        for t in 0..r.tokens() {
            for (acc, p) in mass.iter_mut().zip(r.probs.row(t)) {
                *acc += p;
            }
        }
        tokens += r.tokens();
    }
    if tokens == 0 {
        return Err(Error::Parameter("routing records hold zero tokens".into()));
    }
    Ok((0..m)
        .map(|e| ExpertShare {
            layer,
            expert: e,
            token_fraction: counts[e] / tokens as f64,
            mean_prob: mass[e] / tokens as f64,
        })
        .collect())
}

/// Load-balance value implied by a set of shares for one layer.
pub fn shares_loss(shares: &[ExpertShare]) -> f64 {
    shares.len() as f64
        * shares
            .iter()
            .map(|s| s.token_fraction * s.mean_prob)
            .sum::<f64>()
}

/// Writes `layer,expert,token_fraction,mean_prob`.
pub fn write_shares_csv(path: &Path, shares: &[ExpertShare]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for s in shares {
        w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
