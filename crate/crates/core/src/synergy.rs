//! Synergy tokens and the coarse-grained distillation objective.
//!
//! `S` learned embeddings are appended after the visual and text prefix.
//! Their last-layer hidden states are projected by two bias-free MLPs and
//! pulled toward frozen temporal and spatial teacher features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Params;
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{ops, Tensor};

pub const DEFAULT_SYNERGY_TOKENS: usize = 4;
pub const DEFAULT_ALIGN_TEMPORAL: usize = 12;
pub const DEFAULT_ALIGN_SPATIAL: usize = 10;

fn appended_mask(prefix: usize, count: usize) -> Vec<usize> {
    (prefix..prefix + count).collect()
}

/// Appends the synergy embeddings to `sequence`; returns the new sequence and
/// the positions of the inserted rows.
pub fn insert_synergy_tokens(
    sequence: &Tensor,
    embedding: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let mut tape = Tape::new();
    let s = tape.constant(sequence.clone());
    let e = tape.constant(embedding.clone());
    let (out, mask) = insert_synergy_tokens_on(&mut tape, s, e)?;
    Ok((tape.value(out).clone(), mask))
}

pub fn insert_synergy_tokens_on(
    tape: &mut Tape,
    sequence: Var,
    embedding: Var,
) -> Result<(Var, Vec<usize>)> {
    let (t, d) = tape.value(sequence).dims2()?;
    let (s, de) = tape.value(embedding).dims2()?;
    if s == 0 {
        return Err(Error::Parameter("synergy token count must be >= 1".into()));
    }
    if de != d {
        return Err(Error::dim("insert_synergy_tokens", &[t, d], &[s, de]));
    }
    let out = tape.concat_rows(&[sequence, embedding])?;
    Ok((out, appended_mask(t, s)))
}

/// Rows of `x` at `mask`, in mask order.
pub fn select_rows(x: &Tensor, mask: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let g = tape.gather_rows(v, mask)?;
    Ok(tape.value(g).clone())
}

/// Last-layer hidden states at the synergy positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SynergySlice {
    pub hidden: Tensor,
}

impl SynergySlice {
    pub fn extract(hidden: &Tensor, mask: &[usize]) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::Parameter("synergy mask is empty".into()));
        }
        Ok(SynergySlice {
            hidden: select_rows(hidden, mask)?,
        })
    }

    pub fn count(&self) -> usize {
        self.hidden.rows()
    }
}

/// Two bias-free linear layers with an optional SiLU in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Tensor,
    pub w2: Tensor,
    pub activation: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpVars {
    pub w1: Var,
    pub w2: Var,
}

impl Mlp {
    pub fn new(w1: Tensor, w2: Tensor) -> Result<Self> {
        let (_, h) = w1.dims2()?;
        let (h2, _) = w2.dims2()?;
        if h != h2 {
            return Err(Error::dim("mlp", w1.shape(), w2.shape()));
        }
        Ok(Mlp {
            w1,
            w2,
            activation: true,
        })
    }

    pub fn random(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Mlp {
            w1: Tensor::randn(&[d_in, d_hidden], 1.0 / (d_in as f64).sqrt(), rng),
            w2: Tensor::randn(&[d_hidden, d_out], 1.0 / (d_hidden as f64).sqrt(), rng),
            activation: true,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind_constants(&mut tape);
        let y = mlp_forward_on(&mut tape, xv, &vars, self.activation)?;
        Ok(tape.value(y).clone())
    }
}

impl Params for Mlp {
    type Vars = MlpVars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> MlpVars {
        MlpVars {
            w1: next(&self.w1),
            w2: next(&self.w2),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        f(&self.w1);
        f(&self.w2);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.w1);
        f(&mut self.w2);
    }
}

pub fn mlp_forward_on(tape: &mut Tape, x: Var, vars: &MlpVars, activation: bool) -> Result<Var> {
    let h = tape.matmul(x, vars.w1)?;
    let h = if activation { tape.silu(h)? } else { h };
    tape.matmul(h, vars.w2)
}

/// Maps synergy states into the temporal and spatial teacher spaces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProjector {
    pub temporal: Mlp,
    pub spatial: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectorVars {
    pub temporal: MlpVars,
    pub spatial: MlpVars,
}

impl AlignmentProjector {
    pub fn random(d_model: usize, d_temporal: usize, d_spatial: usize, rng: &mut Rng) -> Self {
        AlignmentProjector {
            temporal: Mlp::random(d_model, d_model, d_temporal, rng),
            spatial: Mlp::random(d_model, d_model, d_spatial, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.temporal.d_in()
    }
}

impl Params for AlignmentProjector {
    type Vars = ProjectorVars;

    fn bind(&self, next: &mut dyn FnMut(&Tensor) -> Var) -> ProjectorVars {
        ProjectorVars {
            temporal: self.temporal.bind(next),
            spatial: self.spatial.bind(next),
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Tensor)) {
        self.temporal.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.temporal.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

pub fn project_synergy(
    slice: &SynergySlice,
    proj: &AlignmentProjector,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.constant(slice.hidden.clone());
    let vars = proj.bind_constants(&mut tape);
    let (v, g) = project_synergy_on(&mut tape, x, &vars, proj)?;
    Ok((tape.value(v).clone(), tape.value(g).clone()))
}

pub fn project_synergy_on(
    tape: &mut Tape,
    slice: Var,
    vars: &ProjectorVars,
    proj: &AlignmentProjector,
) -> Result<(Var, Var)> {
    let fv = mlp_forward_on(tape, slice, &vars.temporal, proj.temporal.activation)?;
    let fg = mlp_forward_on(tape, slice, &vars.spatial, proj.spatial.activation)?;
    Ok((fv, fg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Temporal,
    Spatial,
}

impl fmt::Display for TeacherKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeacherKind::Temporal => "temporal",
            TeacherKind::Spatial => "spatial",
        })
    }
}

impl FromStr for TeacherKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(TeacherKind::Temporal),
            "spatial" => Ok(TeacherKind::Spatial),
            _ => Err(Error::Parameter(format!("unknown teacher kind {s:?}"))),
        }
    }
}

/// Frozen teacher targets for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherFeatures {
    pub temporal: Tensor,
    pub spatial: Tensor,
}

impl TeacherFeatures {
    pub fn new(temporal: Tensor, spatial: Tensor) -> Result<Self> {
        let (st, _) = temporal.dims2()?;
        let (ss, _) = spatial.dims2()?;
        if st != ss {
            return Err(Error::dim(
                "teacher features",
                temporal.shape(),
                spatial.shape(),
            ));
        }
        Ok(TeacherFeatures { temporal, spatial })
    }

    pub fn mock(seed: u64, rows: usize, d_temporal: usize, d_spatial: usize) -> Result<Self> {
        Ok(TeacherFeatures {
            temporal: mock_teacher(seed, TeacherKind::Temporal, rows, d_temporal)?,
            spatial: mock_teacher(seed, TeacherKind::Spatial, rows, d_spatial)?,
        })
    }

    /// Writes `temporal.txt` and `spatial.txt` in the tensor text format.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.temporal.write_text(&dir.join("temporal.txt"))?;
        self.spatial.write_text(&dir.join("spatial.txt"))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        TeacherFeatures::new(
            Tensor::read_text(&dir.join("temporal.txt"))?,
            Tensor::read_text(&dir.join("spatial.txt"))?,
        )
    }
}

/// Seeded rows of unit L2 norm, separated by kind.
pub fn mock_teacher(seed: u64, kind: TeacherKind, rows: usize, dims: usize) -> Result<Tensor> {
    if dims == 0 {
        return Err(Error::Parameter("teacher feature dims must be >= 1".into()));
    }
    let mut rng = stream(seed, &format!("teacher/{kind}/{rows}x{dims}"));
    let mut t = Tensor::randn(&[rows, dims], 1.0, &mut rng);
    for row in t.data_mut().chunks_mut(dims) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(t)
}

/// `‖teacher_t − F_v‖² + ‖teacher_s − F_g‖²`, summed over synergy tokens.
pub fn coarse_loss(fv: &Tensor, fg: &Tensor, teachers: &TeacherFeatures) -> Result<f64> {
    Ok(ops::mse(&teachers.temporal, fv)? + ops::mse(&teachers.spatial, fg)?)
}

pub fn coarse_loss_on(
    tape: &mut Tape,
    fv: Var,
    fg: Var,
    teachers: &TeacherFeatures,
) -> Result<Var> {
    let tt = tape.constant(teachers.temporal.clone());
    let ts = tape.constant(teachers.spatial.clone());
    let lt = tape.mse(tt, fv)?;
    let ls = tape.mse(ts, fg)?;
    tape.add(lt, ls)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::Parameter(format!(
                "alpha must be finite and >= 0, got {alpha}"
            )));
        }
        Ok(LossWeights { alpha })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.01 }
    }
}

pub fn total_stage2_loss(coarse: f64, aux: f64, w: LossWeights) -> f64 {
    coarse + w.alpha * aux
}

pub fn total_stage2_loss_on(tape: &mut Tape, coarse: Var, aux: Var, w: LossWeights) -> Result<Var> {
    let weighted = tape.scale(aux, w.alpha)?;
    tape.add(coarse, weighted)
}
