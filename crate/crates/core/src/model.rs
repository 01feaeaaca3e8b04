//! Toy pre-LN transformer whose FFN blocks may be sparse MoE layers.
//!
//! ```text
//! X_0  = [H, T, synergy]
//! X'_l = MSA(LN(X_{l-1})) + X_{l-1}
//! X_l  = FFN_or_MoE(LN(X'_l)) + X'_l
//! Y    = LN(X_L),  logits = Y · head
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::{
    build_schedule, load_balance_on, moe_forward_on, upcycle_from_dense, ExpertFFN, ExpertVars,
    LayerSchedule, MoELayer, MoEVars, PlacementMode, RoutingRecord,
};
use crate::params::Params;
use crate::rng::{stream, Rng};
use crate::synergy::{
    coarse_loss_on, project_synergy_on, AlignmentProjector, ProjectorVars, SynergySlice,
    TeacherFeatures, DEFAULT_ALIGN_SPATIAL, DEFAULT_ALIGN_TEMPORAL, DEFAULT_SYNERGY_TOKENS,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Disjoint parameter groups used by freeze masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Projector,
    Attention,
    Layernorm,
    Embedding,
    Head,
    FfnExperts,
    Router,
    Alignment,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Projector,
        ParamGroup::Attention,
        ParamGroup::Layernorm,
        ParamGroup::Embedding,
        ParamGroup::Head,
        ParamGroup::FfnExperts,
        ParamGroup::Router,
        ParamGroup::Alignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Projector => "projector",
            ParamGroup::Attention => "attention",
            ParamGroup::Layernorm => "layernorm",
            ParamGroup::Embedding => "embedding",
            ParamGroup::Head => "head",
            ParamGroup::FfnExperts => "ffn_experts",
            ParamGroup::Router => "router",
            ParamGroup::Alignment => "alignment",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamGroup::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_vis: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub vocab: usize,
    pub heads: usize,
    pub layers: usize,
    pub experts: usize,
    pub top_k: usize,
    pub placement: PlacementMode,
    pub synergy_tokens: usize,
    pub d_align_temporal: usize,
    pub d_align_spatial: usize,
    pub renormalize: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vis: 8,
            d_model: 16,
            d_hidden: 64,
            vocab: 64,
            heads: 2,
            layers: 8,
            experts: 4,
            top_k: 2,
            placement: PlacementMode::Interval(4),
            synergy_tokens: DEFAULT_SYNERGY_TOKENS,
            d_align_temporal: DEFAULT_ALIGN_TEMPORAL,
            d_align_spatial: DEFAULT_ALIGN_SPATIAL,
            renormalize: true,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_vis", self.d_vis),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("vocab", self.vocab),
            ("heads", self.heads),
            ("layers", self.layers),
            ("experts", self.experts),
            ("synergy_tokens", self.synergy_tokens),
            ("d_align_temporal", self.d_align_temporal),
            ("d_align_spatial", self.d_align_spatial),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Parameter(format!(
                "top_k must satisfy 1 <= k <= experts ({}), got {}",
                self.experts, self.top_k
            )));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Parameter("ln_eps must be positive".into()));
        }
        build_schedule(self.layers, self.placement).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ffn {
    Dense(ExpertFFN),
    Moe(MoELayer),
}

#[derive(Clone, Debug)]
pub enum FfnVars {
    Dense(ExpertVars),
    Moe(MoEVars),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub ffn: FfnVars,
}

impl Block {
    fn random(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let s = 1.0 / (d as f64).sqrt();
        Block {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], s, rng),
            wk: Tensor::randn(&[d, d], s, rng),
            wv: Tensor::randn(&[d, d], s, rng),
            wo: Tensor::randn(&[d, d], s, rng),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            ffn: Ffn::Dense(ExpertFFN::random(d, cfg.d_hidden, 1.0, rng)),
        }
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.ffn, Ffn::Moe(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub schedule: LayerSchedule,
    pub visual_projector: Tensor,
    pub token_embedding: Tensor,
    pub synergy_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub head: Tensor,
    pub alignment: AlignmentProjector,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub visual_projector: Var,
    pub token_embedding: Var,
    pub synergy_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head: Var,
    pub alignment: ProjectorVars,
}

/// One sequence fed to the model.
#[derive(Clone, Copy, Debug)]
pub struct ForwardInput<'a> {
    /// `P × d_vis` visual features; `P` may be zero
    pub visual: &'a Tensor,
    /// optional `P × d_model` coordinate encodings added to the projected tokens
    pub geo: Option<&'a Tensor>,
    pub text_ids: &'a [usize],
    /// number of synergy tokens to append, at most `config.synergy_tokens`
    pub synergy_count: usize,
}

pub struct LayerRouting {
    pub layer: usize,
    pub probs: Var,
    pub record: RoutingRecord,
}

pub struct ForwardOutput {
    /// `(P + T + S) × V`
    pub logits: Var,
    /// `Y`, the final normalized hidden states
    pub hidden: Var,
    pub synergy: Option<Var>,
    pub synergy_mask: Vec<usize>,
    pub routing: Vec<LayerRouting>,
    /// number of visual rows preceding the text
    pub prefix_len: usize,
}

impl ToyModel {
    /// Dense model: every block holds a plain FFN until [`ToyModel::upcycle`].
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = build_schedule(config.layers, config.placement)?;
        let mut rng = stream(seed, "model");
        let d = config.d_model;
        let blocks = (0..config.layers)
            .map(|_| Block::random(&config, &mut rng))
            .collect();
        Ok(ToyModel {
            visual_projector: Tensor::randn(
                &[config.d_vis, d],
                1.0 / (config.d_vis as f64).sqrt(),
                &mut rng,
            ),
            token_embedding: Tensor::randn(&[config.vocab, d], 1.0, &mut rng),
            synergy_embedding: Tensor::randn(&[config.synergy_tokens, d], 1.0, &mut rng),
            blocks,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
            head: Tensor::randn(&[d, config.vocab], 1.0 / (d as f64).sqrt(), &mut rng),
            alignment: AlignmentProjector::random(
                d,
                config.d_align_temporal,
                config.d_align_spatial,
                &mut rng,
            ),
            config,
            schedule,
        })
    }

    /// Dense model upcycled with noisy experts and a random router, so that
    /// every group carries nontrivial values.
    pub fn random_moe(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = ToyModel::random(config, seed)?;
        model.upcycle(0.1, seed)?;
        let mut rng = stream(seed, "router");
        for b in &mut model.blocks {
            if let Ffn::Moe(layer) = &mut b.ffn {
                layer.router.weight = Tensor::randn(layer.router.weight.shape(), 1.0, &mut rng);
            }
        }
        Ok(model)
    }

    /// Replaces the dense FFN of every scheduled block by an MoE layer
    /// initialized from it. Blocks that are already sparse are left alone.
    pub fn upcycle(&mut self, noise_scale: f64, seed: u64) -> Result<()> {
        for &l in &self.schedule.moe_layer_indices {
            let block = &mut self.blocks[l];
            if let Ffn::Dense(dense) = &block.ffn {
                let mut layer = upcycle_from_dense(
                    dense,
                    self.config.experts,
                    self.config.top_k,
                    noise_scale,
                    crate::rng::derive_seed(seed, &format!("upcycle/{l}")),
                )?;
                layer.renormalize = self.config.renormalize;
                block.ffn = Ffn::Moe(layer);
            }
        }
        Ok(())
    }

    pub fn is_upcycled(&self) -> bool {
        self.schedule
            .moe_layer_indices
            .iter()
            .all(|&l| self.blocks[l].is_moe())
    }

    pub fn moe_layers(&self) -> Vec<usize> {
        (0..self.blocks.len())
            .filter(|&l| self.blocks[l].is_moe())
            .collect()
    }

    /// Checks the structural invariants of a loaded or edited model.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.schedule.total_layers
            || self.schedule.total_layers != self.config.layers
        {
            return Err(Error::Parameter(format!(
                "{} blocks for a {}-layer schedule",
                self.blocks.len(),
                self.schedule.total_layers
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if let Ffn::Moe(layer) = &b.ffn {
                if !self.schedule.is_moe(l) {
                    return Err(Error::Parameter(format!(
                        "block {l} is sparse but not scheduled"
                    )));
                }
                layer.validate()?;
            }
        }
        Ok(())
    }

    pub fn bind_grouped(&self, next: &mut dyn FnMut(ParamGroup, &Tensor) -> Var) -> ModelVars {
        use ParamGroup as G;
        let visual_projector = next(G::Projector, &self.visual_projector);
        let token_embedding = next(G::Embedding, &self.token_embedding);
        let synergy_embedding = next(G::Alignment, &self.synergy_embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_gain: next(G::Layernorm, &b.ln1_gain),
                ln1_bias: next(G::Layernorm, &b.ln1_bias),
                wq: next(G::Attention, &b.wq),
                wk: next(G::Attention, &b.wk),
                wv: next(G::Attention, &b.wv),
                wo: next(G::Attention, &b.wo),
                ln2_gain: next(G::Layernorm, &b.ln2_gain),
                ln2_bias: next(G::Layernorm, &b.ln2_bias),
                ffn: match &b.ffn {
                    Ffn::Dense(e) => FfnVars::Dense(e.bind(&mut |t| next(G::FfnExperts, t))),
                    Ffn::Moe(m) => FfnVars::Moe(MoEVars {
                        router: m.router.bind(&mut |t| next(G::Router, t)),
                        experts: m
                            .experts
                            .iter()
                            .map(|e| e.bind(&mut |t| next(G::FfnExperts, t)))
                            .collect(),
                    }),
                },
            })
            .collect();
        let final_gain = next(G::Layernorm, &self.final_gain);
        let final_bias = next(G::Layernorm, &self.final_bias);
        let head = next(G::Head, &self.head);
        let alignment = self.alignment.bind(&mut |t| next(G::Alignment, t));
        ModelVars {
            visual_projector,
            token_embedding,
            synergy_embedding,
            blocks,
            final_gain,
            final_bias,
            head,
            alignment,
        }
    }

    pub fn visit_grouped<'a>(&'a self, f: &mut dyn FnMut(ParamGroup, &'a Tensor)) {
        use ParamGroup as G;
        f(G::Projector, &self.visual_projector);
        f(G::Embedding, &self.token_embedding);
        f(G::Alignment, &self.synergy_embedding);
        for b in &self.blocks {
            f(G::Layernorm, &b.ln1_gain);
            f(G::Layernorm, &b.ln1_bias);
            for w in [&b.wq, &b.wk, &b.wv, &b.wo] {
                f(G::Attention, w);
            }
            f(G::Layernorm, &b.ln2_gain);
            f(G::Layernorm, &b.ln2_bias);
            match &b.ffn {
                Ffn::Dense(e) => e.visit(&mut |t| f(G::FfnExperts, t)),
                Ffn::Moe(m) => {
                    m.router.visit(&mut |t| f(G::Router, t));
                    m.experts
                        .iter()
                        .for_each(|e| e.visit(&mut |t| f(G::FfnExperts, t)));
                }
            }
        }
        f(G::Layernorm, &self.final_gain);
        f(G::Layernorm, &self.final_bias);
        f(G::Head, &self.head);
        self.alignment.visit(&mut |t| f(G::Alignment, t));
    }

    pub fn visit_grouped_mut(&mut self, f: &mut dyn FnMut(ParamGroup, &mut Tensor)) {
        use ParamGroup as G;
        f(G::Projector, &mut self.visual_projector);
        f(G::Embedding, &mut self.token_embedding);
        f(G::Alignment, &mut self.synergy_embedding);
        for b in &mut self.blocks {
            f(G::Layernorm, &mut b.ln1_gain);
            f(G::Layernorm, &mut b.ln1_bias);
            for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
                f(G::Attention, w);
            }
            f(G::Layernorm, &mut b.ln2_gain);
            f(G::Layernorm, &mut b.ln2_bias);
            match &mut b.ffn {
                Ffn::Dense(e) => e.visit_mut(&mut |t| f(G::FfnExperts, t)),
                Ffn::Moe(m) => {
                    m.router.visit_mut(&mut |t| f(G::Router, t));
                    m.experts
                        .iter_mut()
                        .for_each(|e| e.visit_mut(&mut |t| f(G::FfnExperts, t)));
                }
            }
        }
        f(G::Layernorm, &mut self.final_gain);
        f(G::Layernorm, &mut self.final_bias);
        f(G::Head, &mut self.head);
        self.alignment.visit_mut(&mut |t| f(G::Alignment, t));
    }

    /// Group of each parameter tensor, in traversal order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        self.visit_grouped(&mut |g, _| out.push(g));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ToyModel = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

impl Params for ToyModel {
    type Vars = ModelVars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> ModelVars {
        self.bind_grouped(&mut |_, t| next(t))
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.visit_grouped(&mut |_, t| f(t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.visit_grouped_mut(&mut |_, t| f(t));
    }
}

fn attention_on(tape: &mut Tape, x: Var, b: &BlockVars, heads: usize) -> Result<Var> {
    let d = tape.value(x).cols();
    let dh = d / heads;
    let q = tape.matmul(x, b.wq)?;
    let k = tape.matmul(x, b.wk)?;
    let v = tape.matmul(x, b.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let p = tape.softmax_causal(scores)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(cat, b.wo)
}

/// Builds the forward graph for one sequence.
pub fn forward_on(
    tape: &mut Tape,
    model: &ToyModel,
    vars: &ModelVars,
    input: ForwardInput<'_>,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    if let Some(&bad) = input.text_ids.iter().find(|&&id| id >= cfg.vocab) {
        return Err(Error::Parameter(format!(
            "token id {bad} overflows vocab {}",
            cfg.vocab
        )));
    }
    if input.synergy_count > model.synergy_embedding.rows() {
        return Err(Error::Parameter(format!(
            "{} synergy tokens requested, {} configured",
            input.synergy_count,
            model.synergy_embedding.rows()
        )));
    }
    let (p, dv) = input.visual.dims2()?;
    if dv != cfg.d_vis {
        return Err(Error::dim(
            "forward visual",
            input.visual.shape(),
            &[p, cfg.d_vis],
        ));
    }

    let mut parts = Vec::new();
    if p > 0 {
        let vis = tape.constant(input.visual.clone());
        let mut h = tape.matmul(vis, vars.visual_projector)?;
        if let Some(geo) = input.geo {
            if geo.shape() != [p, cfg.d_model] {
                return Err(Error::dim("inject_coords", &[p, cfg.d_model], geo.shape()));
            }
            let g = tape.constant(geo.clone());
            h = tape.add(h, g)?;
        }
        parts.push(h);
    }
    if !input.text_ids.is_empty() {
        parts.push(tape.gather_rows(vars.token_embedding, input.text_ids)?);
    }
    let prefix_rows = p + input.text_ids.len();
    let synergy_mask: Vec<usize> = (prefix_rows..prefix_rows + input.synergy_count).collect();
    if input.synergy_count > 0 {
        let rows: Vec<usize> = (0..input.synergy_count).collect();
        parts.push(tape.gather_rows(vars.synergy_embedding, &rows)?);
    }
    let mut x = match parts.len() {
        0 => return Err(Error::Parameter("empty input sequence".into())),
        1 => parts[0],
        _ => tape.concat_rows(&parts)?,
    };

    let mut routing = Vec::new();
    for (l, (block, bv)) in model.blocks.iter().zip(&vars.blocks).enumerate() {
        let n1 = tape.layer_norm(x, bv.ln1_gain, bv.ln1_bias, cfg.ln_eps)?;
        let att = attention_on(tape, n1, bv, cfg.heads)?;
        let xp = tape.add(att, x)?;
        let n2 = tape.layer_norm(xp, bv.ln2_gain, bv.ln2_bias, cfg.ln_eps)?;
        let f = match (&block.ffn, &bv.ffn) {
            (Ffn::Dense(_), FfnVars::Dense(ev)) => crate::moe::expert_forward_on(tape, n2, ev)?,
            (Ffn::Moe(layer), FfnVars::Moe(mv)) => {
                let out = moe_forward_on(tape, n2, mv, layer.top_k, layer.renormalize)?;
                routing.push(LayerRouting {
                    layer: l,
                    probs: out.probs,
                    record: out.record,
                });
                out.y
            }
            _ => {
                return Err(Error::Usage(
                    "model variables bound from a different model".into(),
                ))
            }
        };
        x = tape.add(f, xp)?;
    }
    let y = tape.layer_norm(x, vars.final_gain, vars.final_bias, cfg.ln_eps)?;
    let logits = tape.matmul(y, vars.head)?;
    let synergy = if synergy_mask.is_empty() {
        None
    } else {
        Some(tape.gather_rows(y, &synergy_mask)?)
    };
    Ok(ForwardOutput {
        logits,
        hidden: y,
        synergy,
        synergy_mask,
        routing,
        prefix_len: p,
    })
}

/// Plain forward pass: logits, the synergy slice (if any) and routing records.
pub fn forward(
    model: &ToyModel,
    input: ForwardInput<'_>,
) -> Result<(Tensor, Option<SynergySlice>, Vec<RoutingRecord>)> {
    let mut tape = Tape::new();
    let vars = model.bind_constants(&mut tape);
    let out = forward_on(&mut tape, model, &vars, input)?;
    let slice = out.synergy.map(|s| SynergySlice {
        hidden: tape.value(s).clone(),
    });
    Ok((
        tape.value(out.logits).clone(),
        slice,
        out.routing.into_iter().map(|r| r.record).collect(),
    ))
}

/// Mean cross-entropy of `logits` rows `rows` against `targets`.
pub fn cross_entropy_on(
    tape: &mut Tape,
    logits: Var,
    rows: &[usize],
    targets: &[usize],
) -> Result<Var> {
    let picked = tape.gather_rows(logits, rows)?;
    tape.cross_entropy(picked, targets)
}

/// Load-balance loss averaged over the MoE layers of one forward pass.
/// `None` when the model has no MoE layer.
pub fn aux_loss_on(tape: &mut Tape, routing: &[LayerRouting]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for r in routing {
        let l = load_balance_on(tape, r.probs, &r.record)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    match acc {
        Some(a) => Ok(Some(tape.scale(a, 1.0 / routing.len() as f64)?)),
        None => Ok(None),
    }
}

/// Projects the synergy slice and scores it against the teachers.
pub fn coarse_on(
    tape: &mut Tape,
    model: &ToyModel,
    vars: &ModelVars,
    out: &ForwardOutput,
    teachers: &TeacherFeatures,
) -> Result<Var> {
    let s = out.synergy.ok_or_else(|| {
        Error::Usage("coarse loss needs synergy tokens in the forward pass".into())
    })?;
    let (fv, fg) = project_synergy_on(tape, s, &vars.alignment, &model.alignment)?;
    coarse_loss_on(tape, fv, fg, teachers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::assert_consistent_order;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 2,
            placement: PlacementMode::Full,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            top_k: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn group_names_round_trip() {
        for g in ParamGroup::ALL {
            assert_eq!(g.name().parse::<ParamGroup>().unwrap(), g);
        }
        assert!("bias".parse::<ParamGroup>().is_err());
    }

    #[test]
    fn traversal_orders_agree() {
        let mut m = ToyModel::random_moe(small(), 1).unwrap();
        assert_consistent_order(&mut m);
        let groups = m.param_groups();
        let mut mut_groups = Vec::new();
        m.visit_grouped_mut(&mut |g, _| mut_groups.push(g));
        assert_eq!(groups, mut_groups);
        let mut tape = Tape::new();
        let mut bound = Vec::new();
        m.bind_grouped(&mut |g, t| {
            bound.push(g);
            tape.leaf(t.clone())
        });
        assert_eq!(groups, bound);
    }

    #[test]
    fn upcycle_follows_schedule() {
        let mut m = ToyModel::random(ModelConfig::default(), 2).unwrap();
        assert!(m.moe_layers().is_empty());
        m.upcycle(0.0, 2).unwrap();
        assert_eq!(m.moe_layers(), vec![0, 4]);
        assert!(m.is_upcycled());
        m.validate().unwrap();
    }

    #[test]
    fn text_only_forward_shapes() {
        let m = ToyModel::random_moe(small(), 3).unwrap();
        let visual = Tensor::zeros(&[0, 8]);
        let (logits, slice, routing) = forward(
            &m,
            ForwardInput {
                visual: &visual,
                geo: None,
                text_ids: &[1, 5, 9],
                synergy_count: 0,
            },
        )
        .unwrap();
        assert_eq!(logits.shape(), &[3, 64]);
        assert!(slice.is_none());
        assert_eq!(routing.len(), 2);
    }

    #[test]
    fn synergy_slice_shape() {
        let m = ToyModel::random_moe(small(), 4).unwrap();
        let mut rng = stream(4, "v");
        let visual = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let (logits, slice, _) = forward(
            &m,
            ForwardInput {
                visual: &visual,
                geo: None,
                text_ids: &[1, 2],
                synergy_count: 4,
            },
        )
        .unwrap();
        assert_eq!(logits.shape(), &[9, 64]);
        assert_eq!(slice.unwrap().hidden.shape(), &[4, 16]);
    }

    #[test]
    fn vocab_overflow_is_parameter_error() {
        let m = ToyModel::random(small(), 5).unwrap();
        let visual = Tensor::zeros(&[0, 8]);
        let r = forward(
            &m,
            ForwardInput {
                visual: &visual,
                geo: None,
                text_ids: &[64],
                synergy_count: 0,
            },
        );
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::random_moe(small(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        assert_eq!(ToyModel::load(&path).unwrap(), m);
    }
}
