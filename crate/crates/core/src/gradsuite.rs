//! The full finite-difference suite: every tape op, the expert FFN, the MoE
//! layer, the alignment projectors and the end-to-end toy model.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with, GradCheckOptions};
use crate::model::{
    aux_loss_on, coarse_on, cross_entropy_on, forward, forward_on, ForwardInput, ModelConfig,
    ToyModel,
};
use crate::moe::{
    expert_forward_on, moe_forward_on, route, ExpertFFN, ExpertVars, MoELayer, MoEVars,
    PlacementMode, Router,
};
use crate::params::Params;
use crate::rng::{derive_seed, stream, Rng};
use crate::synergy::{coarse_loss_on, mlp_forward_on, LossWeights, MlpVars, TeacherFeatures};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{ops, Tensor};

/// Tolerance for smooth paths.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Tolerance for paths that compose a top-k selection.
pub const TOP_K_TOL: f64 = 1e-4;
/// Routing points closer than this to a tie are redrawn.
pub const TIE_MARGIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteOptions {
    pub seeds: usize,
    pub base_seed: u64,
    pub eps: f64,
    /// sampled coordinates per parameter tensor on the end-to-end path
    pub e2e_coords: usize,
    /// corrupts the backward rule of one op on every tape
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: 20,
            base_seed: 0,
            eps: 1e-6,
            e2e_coords: 6,
            fault: None,
        }
    }
}

impl SuiteOptions {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(Error::Parameter(
                "grad-check needs at least one seed".into(),
            ));
        }
        if !(1e-7..=1e-3).contains(&self.eps) {
            return Err(Error::Parameter(format!(
                "finite-difference eps must lie in [1e-7, 1e-3], got {}",
                self.eps
            )));
        }
        if self.e2e_coords == 0 {
            return Err(Error::Parameter("e2e_coords must be >= 1".into()));
        }
        self.fault_kind().map(|_| ())
    }

    fn fault_kind(&self) -> Result<Option<OpKind>> {
        self.fault.as_deref().map(OpKind::parse).transpose()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PathResult {
    pub path: String,
    pub tolerance: f64,
    pub worst_rel_err: f64,
    pub worst_seed: u64,
    pub seeds_checked: usize,
}

impl PathResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub paths: Vec<PathResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(PathResult::passed)
    }

    pub fn failures(&self) -> Vec<&PathResult> {
        self.paths.iter().filter(|p| !p.passed()).collect()
    }
}

type Loss<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a>;

/// One randomized instance of a path: parameters, loss and coordinate cap.
struct Case<'a> {
    params: Vec<Tensor>,
    loss: Loss<'a>,
    max_coords: Option<usize>,
}

/// Nonlinear scalar reduction that only uses `mse`.
fn reduce(tape: &mut Tape, y: Var, target: &Tensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    tape.mse(y, t)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Paths exercising one op each, named `op/<name>`.
fn op_case(kind: OpKind, rng: &mut Rng) -> Option<Case<'static>> {
    let a = randn(&[3, 4], rng);
    let b = randn(&[3, 4], rng);
    let target = randn(&[3, 4], rng);
    let case = |params: Vec<Tensor>, loss: Loss<'static>| {
        Some(Case {
            params,
            loss,
            max_coords: None,
        })
    };
    match kind {
        OpKind::Leaf | OpKind::Constant => None,
        OpKind::MatMul => {
            let w = randn(&[4, 4], rng);
            case(
                vec![a, w],
                Box::new(move |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    reduce(t, y, &target)
                }),
            )
        }
        OpKind::Transpose => {
            let tt = randn(&[4, 3], rng);
            case(
                vec![a],
                Box::new(move |t, v| {
                    let y = t.transpose(v[0])?;
                    reduce(t, y, &tt)
                }),
            )
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => case(
            vec![a, b],
            Box::new(move |t, v| {
                let y = match kind {
                    OpKind::Add => t.add(v[0], v[1])?,
                    OpKind::Sub => t.sub(v[0], v[1])?,
                    _ => t.mul(v[0], v[1])?,
                };
                reduce(t, y, &target)
            }),
        ),
        OpKind::Scale => case(
            vec![a],
            Box::new(move |t, v| {
                let y = t.scale(v[0], -1.7)?;
                reduce(t, y, &target)
            }),
        ),
        OpKind::Softmax => case(
            vec![a],
            Box::new(move |t, v| {
                let y0 = t.softmax(v[0], 0)?;
                let y1 = t.softmax(v[0], 1)?;
                let y = t.add(y0, y1)?;
                reduce(t, y, &target)
            }),
        ),
        OpKind::SoftmaxCausal => {
            let s = randn(&[4, 4], rng);
            let st = randn(&[4, 4], rng);
            case(
                vec![s],
                Box::new(move |t, v| {
                    let y = t.softmax_causal(v[0])?;
                    reduce(t, y, &st)
                }),
            )
        }
        OpKind::LayerNorm => {
            let g = randn(&[4], rng);
            let bb = randn(&[4], rng);
            case(
                vec![a, g, bb],
                Box::new(move |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
                    reduce(t, y, &target)
                }),
            )
        }
        OpKind::Silu => case(
            vec![a],
            Box::new(move |t, v| {
                let y = t.silu(v[0])?;
                reduce(t, y, &target)
            }),
        ),
        OpKind::Mse => case(vec![a, b], Box::new(move |t, v| t.mse(v[0], v[1]))),
        OpKind::CrossEntropy => case(
            vec![a],
            Box::new(move |t, v| t.cross_entropy(v[0], &[1, 3, 0])),
        ),
        OpKind::Sum => case(
            vec![a],
            Box::new(move |t, v| {
                let s = t.sum(v[0])?;
                reduce(t, s, &Tensor::scalar(0.3))
            }),
        ),
        OpKind::ConcatRows | OpKind::ConcatCols => {
            let tt = if kind == OpKind::ConcatRows {
                randn(&[6, 4], rng)
            } else {
                randn(&[3, 8], rng)
            };
            case(
                vec![a, b],
                Box::new(move |t, v| {
                    let y = if kind == OpKind::ConcatRows {
                        t.concat_rows(&[v[0], v[1]])?
                    } else {
                        t.concat_cols(&[v[0], v[1]])?
                    };
                    reduce(t, y, &tt)
                }),
            )
        }
        OpKind::SliceCols => {
            let tt = randn(&[3, 2], rng);
            case(
                vec![a],
                Box::new(move |t, v| {
                    let y = t.slice_cols(v[0], 1, 2)?;
                    reduce(t, y, &tt)
                }),
            )
        }
        OpKind::GatherRows => {
            let tt = randn(&[4, 4], rng);
            case(
                vec![a],
                Box::new(move |t, v| {
                    let y = t.gather_rows(v[0], &[2, 0, 2, 1])?;
                    reduce(t, y, &tt)
                }),
            )
        }
        OpKind::ScatterRows => {
            let tt = randn(&[5, 4], rng);
            case(
                vec![a],
                Box::new(move |t, v| {
                    let y = t.scatter_rows(v[0], &[4, 1, 4], 5)?;
                    reduce(t, y, &tt)
                }),
            )
        }
        OpKind::RowScale => {
            let s = randn(&[3, 1], rng);
            case(
                vec![a, s],
                Box::new(move |t, v| {
                    let y = t.row_scale(v[0], v[1])?;
                    reduce(t, y, &target)
                }),
            )
        }
        OpKind::TopKWeights => {
            let logits = randn(&[3, 4], rng);
            let sel: Vec<Vec<usize>> = {
                let p = ops::softmax(&logits, 1).ok()?;
                (0..3)
                    .map(|r| ops::top_k(p.row(r), 2).map(|x| x.0))
                    .collect::<Result<_>>()
                    .ok()?
            };
            case(
                vec![logits],
                Box::new(move |t, v| {
                    let p = t.softmax(v[0], 1)?;
                    let w = t.top_k_weights(p, &sel, true)?;
                    let raw = t.top_k_weights(p, &sel, false)?;
                    let y = t.add(w, raw)?;
                    reduce(t, y, &target)
                }),
            )
        }
    }
}

fn expert_vars(v: &[Var]) -> ExpertVars {
    ExpertVars {
        gate: v[0],
        up: v[1],
        down: v[2],
    }
}

fn expert_case(rng: &mut Rng) -> Case<'static> {
    let e = ExpertFFN::random(4, 8, 1.0, rng);
    let x = randn(&[2, 4], rng);
    let target = randn(&[2, 4], rng);
    Case {
        params: vec![x, e.w_gate, e.w_up, e.w_down],
        loss: Box::new(move |t, v| {
            let y = expert_forward_on(t, v[0], &expert_vars(&v[1..]))?;
            reduce(t, y, &target)
        }),
        max_coords: None,
    }
}

/// Top-2 of 4 experts, redrawn until no routing decision is near a tie.
fn moe_case(rng: &mut Rng) -> Result<Case<'static>> {
    loop {
        let layer = MoELayer::new(
            Router {
                weight: randn(&[4, 4], rng),
            },
            (0..4).map(|_| ExpertFFN::random(4, 6, 1.0, rng)).collect(),
            2,
        )?;
        let x = randn(&[5, 4], rng);
        let target = randn(&[5, 4], rng);
        if route(&x, &layer)?.decision_margin() < TIE_MARGIN {
            continue;
        }
        let mut params = vec![x, layer.router.weight.clone()];
        params.extend(
            layer
                .experts
                .iter()
                .flat_map(|e| e.param_tensors())
                .cloned(),
        );
        return Ok(Case {
            params,
            loss: Box::new(move |t, v| {
                let vars = MoEVars {
                    router: v[1],
                    experts: v[2..].chunks(3).map(expert_vars).collect(),
                };
                let out = moe_forward_on(t, v[0], &vars, 2, true)?;
                reduce(t, out.y, &target)
            }),
            max_coords: None,
        });
    }
}

fn projector_case(rng: &mut Rng, seed: u64) -> Result<Case<'static>> {
    let slice = randn(&[4, 8], rng);
    let w = [
        Tensor::randn(&[8, 8], 0.4, rng),
        Tensor::randn(&[8, 6], 0.4, rng),
        Tensor::randn(&[8, 8], 0.4, rng),
        Tensor::randn(&[8, 5], 0.4, rng),
    ];
    let teachers = TeacherFeatures::mock(seed, 4, 6, 5)?;
    let mut params = vec![slice];
    params.extend(w);
    Ok(Case {
        params,
        loss: Box::new(move |t, v| {
            let fv = mlp_forward_on(t, v[0], &MlpVars { w1: v[1], w2: v[2] }, true)?;
            let fg = mlp_forward_on(t, v[0], &MlpVars { w1: v[3], w2: v[4] }, true)?;
            coarse_loss_on(t, fv, fg, &teachers)
        }),
        max_coords: None,
    })
}

/// Configuration of the end-to-end path: two blocks, both sparse, top-2 of 4.
pub fn e2e_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        placement: PlacementMode::Full,
        ..ModelConfig::default()
    }
}

/// `CE + L_coarse + α·L_aux` through the whole model, every parameter group.
fn e2e_case(seed: u64, coords: usize, alpha: f64) -> Result<Case<'static>> {
    let cfg = e2e_config();
    for attempt in 0.. {
        let s = derive_seed(seed, &format!("e2e/{attempt}"));
        let model = ToyModel::random_moe(cfg.clone(), s)?;
        let mut rng = stream(s, "e2e/input");
        let visual = randn(&[3, cfg.d_vis], &mut rng);
        let geo = Tensor::randn(&[3, cfg.d_model], 0.5, &mut rng);
        let text: Vec<usize> = (0..4).map(|i| (s as usize + 7 * i) % cfg.vocab).collect();
        let targets: Vec<usize> = (0..4)
            .map(|i| (s as usize + 11 * i + 3) % cfg.vocab)
            .collect();
        let teachers = TeacherFeatures::mock(
            s,
            cfg.synergy_tokens,
            cfg.d_align_temporal,
            cfg.d_align_spatial,
        )?;
        let input = ForwardInput {
            visual: &visual,
            geo: Some(&geo),
            text_ids: &text,
            synergy_count: cfg.synergy_tokens,
        };
        let (_, _, records) = forward(&model, input)?;
        if records.iter().any(|r| r.decision_margin() < TIE_MARGIN) {
            continue;
        }
        let params: Vec<Tensor> = model.param_tensors().into_iter().cloned().collect();
        return Ok(Case {
            params,
            loss: Box::new(move |t, v| {
                let vars = model.bind_from(t, &mut v.iter().copied());
                let input = ForwardInput {
                    visual: &visual,
                    geo: Some(&geo),
                    text_ids: &text,
                    synergy_count: model.config.synergy_tokens,
                };
                let out = forward_on(t, &model, &vars, input)?;
                let rows: Vec<usize> = (out.prefix_len..out.prefix_len + 4).collect();
                let ce = cross_entropy_on(t, out.logits, &rows, &targets)?;
                let coarse = coarse_on(t, &model, &vars, &out, &teachers)?;
                let aux = aux_loss_on(t, &out.routing)?
                    .ok_or_else(|| Error::Usage("end-to-end model has no MoE layer".into()))?;
                let aux = t.scale(aux, alpha)?;
                let l = t.add(ce, coarse)?;
                t.add(l, aux)
            }),
            max_coords: Some(coords),
        });
    }
    unreachable!("attempt counter is unbounded")
}

/// Path names in suite order.
pub fn path_names() -> Vec<String> {
    let mut names: Vec<String> = OpKind::ALL
        .into_iter()
        .filter(|k| !matches!(k, OpKind::Leaf | OpKind::Constant))
        .map(|k| format!("op/{}", k.name()))
        .collect();
    names.extend(
        ["expert_ffn", "moe_layer", "projectors", "end_to_end"]
            .into_iter()
            .map(String::from),
    );
    names
}

fn tolerance(path: &str) -> f64 {
    match path {
        "op/top_k_weights" | "moe_layer" | "end_to_end" => TOP_K_TOL,
        _ => SMOOTH_TOL,
    }
}

fn build_case(path: &str, seed: u64, e2e_coords: usize) -> Result<Case<'static>> {
    let mut rng = stream(seed, &format!("gradsuite/{path}"));
    if let Some(op) = path.strip_prefix("op/") {
        let kind = OpKind::parse(op)?;
        return op_case(kind, &mut rng)
            .ok_or_else(|| Error::Parameter(format!("op {op} has no gradient path")));
    }
    match path {
        "expert_ffn" => Ok(expert_case(&mut rng)),
        "moe_layer" => moe_case(&mut rng),
        "projectors" => projector_case(&mut rng, seed),
        "end_to_end" => e2e_case(seed, e2e_coords, LossWeights::default().alpha),
        _ => Err(Error::Parameter(format!("unknown gradient path {path:?}"))),
    }
}

/// Runs every path over `opts.seeds` seeds and records the worst error.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    opts.validate()?;
    let fault = opts.fault_kind()?;
    let mut paths = Vec::new();
    for path in path_names() {
        let mut res = PathResult {
            tolerance: tolerance(&path),
            path: path.clone(),
            worst_rel_err: 0.0,
            worst_seed: opts.base_seed,
            seeds_checked: 0,
        };
        for i in 0..opts.seeds as u64 {
            let seed = opts.base_seed.wrapping_add(i);
            let case = build_case(&path, seed, opts.e2e_coords)?;
            let loss = case.loss;
            let report = grad_check_with(
                |t, v| {
                    t.inject_fault(fault);
                    loss(t, v)
                },
                &case.params,
                GradCheckOptions {
                    eps: opts.eps,
                    max_coords_per_param: case.max_coords,
                    seed,
                },
            )?;
            if report.max_rel_err > res.worst_rel_err || res.seeds_checked == 0 {
                res.worst_rel_err = report.max_rel_err.max(res.worst_rel_err);
                res.worst_seed = seed;
            }
            res.seeds_checked += 1;
        }
        paths.push(res);
    }
    Ok(SuiteReport { paths })
}
