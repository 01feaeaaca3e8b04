//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node holding its output value. Inputs always precede
//! their consumers, so a single reverse sweep over the node list is a valid
//! topological order for backpropagation.

use crate::error::{Error, Result};
use crate::tensor::{lanes, ops, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identity, used for fault injection and tape inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    Softmax,
    SoftmaxCausal,
    LayerNorm,
    Silu,
    Mse,
    CrossEntropy,
    Sum,
    ConcatRows,
    ConcatCols,
    SliceCols,
    GatherRows,
    ScatterRows,
    RowScale,
    TopKWeights,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::Leaf,
        OpKind::Constant,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Softmax,
        OpKind::SoftmaxCausal,
        OpKind::LayerNorm,
        OpKind::Silu,
        OpKind::Mse,
        OpKind::CrossEntropy,
        OpKind::Sum,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::GatherRows,
        OpKind::ScatterRows,
        OpKind::RowScale,
        OpKind::TopKWeights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCausal => "softmax_causal",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Silu => "silu",
            OpKind::Mse => "mse",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Sum => "sum",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::RowScale => "row_scale",
            OpKind::TopKWeights => "top_k_weights",
        }
    }

    pub fn parse(name: &str) -> Result<OpKind> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Parameter(format!("unknown op {name:?}")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    SoftmaxCausal(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Silu(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Sum(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        index: Vec<usize>,
        rows: usize,
    },
    RowScale {
        x: Var,
        scale: Var,
    },
    TopKWeights {
        probs: Var,
        selected: Vec<Vec<usize>>,
        renormalize: bool,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::SoftmaxCausal(_) => OpKind::SoftmaxCausal,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Silu(_) => OpKind::Silu,
            Op::Mse(..) => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
            Op::RowScale { .. } => OpKind::RowScale,
            Op::TopKWeights { .. } => OpKind::TopKWeights,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::SoftmaxCausal(x)
            | Op::Silu(x)
            | Op::Sum(x)
            | Op::Softmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(xs) | Op::ConcatCols(xs) => xs.clone(),
            Op::RowScale { x, scale } => vec![*x, *scale],
            Op::TopKWeights { probs, .. } => vec![*probs],
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// One recorded primitive application, for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapeRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Computation tape. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

/// Multiplier applied to an op's backward when fault injection targets it.
const FAULT_FACTOR: f64 = 1.01;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Deliberately corrupts the backward rule of `kind`. Used to prove the
    /// gradient suite notices a broken op.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn records(&self) -> Vec<TapeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| TapeRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = {
            let nodes = &self.nodes;
            eval(&op, |v| &nodes[v.0].value)?
        };
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(x, c))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.push(Op::Softmax { x, axis })
    }

    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        self.push(Op::SoftmaxCausal(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.push(Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Silu(x))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mse(a, b))
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.push(Op::Sum(x))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(xs.to_vec()))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        self.push(Op::ConcatCols(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { x, start, len })
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.push(Op::GatherRows {
            x,
            index: index.to_vec(),
        })
    }

    /// Output has `rows` rows; input row `r` is added into output row `index[r]`.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        self.push(Op::ScatterRows {
            x,
            index: index.to_vec(),
            rows,
        })
    }

    /// Multiplies row `r` of `x` by `scale[r]`.
    pub fn row_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        self.push(Op::RowScale { x, scale })
    }

    /// Dense `T×M` mixing weights holding the selected probabilities of each
    /// row (optionally renormalized to sum 1) and zeros elsewhere. Selections
    /// are constants; gradients reach only the selected probabilities.
    pub fn top_k_weights(
        &mut self,
        probs: Var,
        selected: &[Vec<usize>],
        renormalize: bool,
    ) -> Result<Var> {
        self.push(Op::TopKWeights {
            probs,
            selected: selected.to_vec(),
            renormalize,
        })
    }

    /// Recomputes every non-input node from the recorded ops.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                ref op => eval(op, |v| &values[v.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// True when a replay reproduces every recorded value bit for bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let replayed = self.replay()?;
        Ok(replayed
            .iter()
            .zip(&self.nodes)
            .all(|(r, n)| r.shape() == n.value.shape() && bits_equal(r.data(), n.value.data())))
    }

    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Leaf => {
                    self.nodes[i].value.accumulate_grad(&g);
                    continue;
                }
                Op::Constant => continue,
                _ => {}
            }
            if self.fault == Some(node.op.kind()) {
                g.iter_mut().for_each(|v| *v *= FAULT_FACTOR);
            }
            let contributions = backward_op(&node.op, &node.value, &g, |v| &self.nodes[v.0].value)?;
            for (var, cg) in contributions {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }
}

fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn eval<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Constant => unreachable!("inputs are not evaluated"),
        Op::MatMul(a, b) => ops::matmul(get(*a), get(*b))?,
        Op::Transpose(x) => ops::transpose(get(*x))?,
        Op::Add(a, b) => ops::add(get(*a), get(*b))?,
        Op::Sub(a, b) => ops::sub(get(*a), get(*b))?,
        Op::Mul(a, b) => ops::mul(get(*a), get(*b))?,
        Op::Scale(x, c) => ops::scale(get(*x), *c)?,
        Op::Softmax { x, axis } => ops::softmax(get(*x), *axis)?,
        Op::SoftmaxCausal(x) => ops::softmax_causal(get(*x))?,
        Op::LayerNorm { x, gain, bias, eps } => {
            ops::layer_norm(get(*x), get(*gain), get(*bias), *eps)?
        }
        Op::Silu(x) => ops::silu(get(*x)),
        Op::Mse(a, b) => Tensor::scalar(ops::mse(get(*a), get(*b))?),
        Op::CrossEntropy { logits, targets } => {
            Tensor::scalar(ops::cross_entropy(get(*logits), targets)?)
        }
        Op::Sum(x) => Tensor::scalar(get(*x).data().iter().sum()),
        Op::ConcatRows(xs) => {
            let first = xs
                .first()
                .ok_or_else(|| Error::Parameter("concat_rows of nothing".into()))?;
            let cols = get(*first).dims2()?.1;
            let mut data = Vec::new();
            let mut rows = 0;
            for x in xs {
                let t = get(*x);
                let (r, c) = t.dims2()?;
                if c != cols {
                    return Err(Error::dim("concat_rows", get(*first).shape(), t.shape()));
                }
                rows += r;
                data.extend_from_slice(t.data());
            }
            Tensor::from_parts_unchecked(vec![rows, cols], data)
        }
        Op::ConcatCols(xs) => {
            let first = xs
                .first()
                .ok_or_else(|| Error::Parameter("concat_cols of nothing".into()))?;
            let rows = get(*first).dims2()?.0;
            let mut widths = Vec::with_capacity(xs.len());
            for x in xs {
                let t = get(*x);
                let (r, c) = t.dims2()?;
                if r != rows {
                    return Err(Error::dim("concat_cols", get(*first).shape(), t.shape()));
                }
                widths.push(c);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for x in xs {
                    data.extend_from_slice(get(*x).row(r));
                }
            }
            Tensor::from_parts_unchecked(vec![rows, total], data)
        }
        Op::SliceCols { x, start, len } => {
            let t = get(*x);
            let (r, c) = t.dims2()?;
            if start + len > c {
                return Err(Error::Parameter(format!(
                    "slice_cols {start}..{} out of {c} columns",
                    start + len
                )));
            }
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[*start..start + len]);
            }
            Tensor::from_parts_unchecked(vec![r, *len], data)
        }
        Op::GatherRows { x, index } => {
            let t = get(*x);
            let (r, c) = t.dims2()?;
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= r {
                    return Err(Error::Parameter(format!("gather row {i} out of {r} rows")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts_unchecked(vec![index.len(), c], data)
        }
        Op::ScatterRows { x, index, rows } => {
            let t = get(*x);
            let (r, c) = t.dims2()?;
            if r != index.len() {
                return Err(Error::dim("scatter_rows", t.shape(), &[index.len()]));
            }
            let mut data = vec![0.0; rows * c];
            for (src, &dst) in index.iter().enumerate() {
                if dst >= *rows {
                    return Err(Error::Parameter(format!(
                        "scatter row {dst} out of {rows} rows"
                    )));
                }
                for (o, v) in data[dst * c..(dst + 1) * c].iter_mut().zip(t.row(src)) {
                    *o += v;
                }
            }
            Tensor::from_parts_unchecked(vec![*rows, c], data)
        }
        Op::RowScale { x, scale } => {
            let t = get(*x);
            let s = get(*scale);
            let (r, c) = t.dims2()?;
            if s.len() != r {
                return Err(Error::dim("row_scale", t.shape(), s.shape()));
            }
            let mut data = t.data().to_vec();
            for i in 0..r {
                data[i * c..(i + 1) * c]
                    .iter_mut()
                    .for_each(|v| *v *= s.data()[i]);
            }
            Tensor::from_parts_unchecked(vec![r, c], data)
        }
        Op::TopKWeights {
            probs,
            selected,
            renormalize,
        } => {
            let p = get(*probs);
            let (t, m) = p.dims2()?;
            if selected.len() != t {
                return Err(Error::dim("top_k_weights", p.shape(), &[selected.len()]));
            }
            let mut data = vec![0.0; t * m];
            for (r, sel) in selected.iter().enumerate() {
                if sel.is_empty() || sel.iter().any(|&i| i >= m) {
                    return Err(Error::Parameter(format!(
                        "bad selection {sel:?} for {m} experts"
                    )));
                }
                let denom = if *renormalize {
                    sel.iter().map(|&i| p.at(r, i)).sum::<f64>()
                } else {
                    1.0
                };
                if denom <= 0.0 {
                    return Err(Error::NonFinite("selected routing mass is zero".into()));
                }
                for &i in sel {
                    data[r * m + i] = p.at(r, i) / denom;
                }
            }
            Tensor::from_parts_unchecked(vec![t, m], data)
        }
    })
}

/// Input-gradient contributions of one node given its output gradient `g`.
fn backward_op<'a>(
    op: &Op,
    out: &Tensor,
    g: &[f64],
    get: impl Fn(Var) -> &'a Tensor,
) -> Result<Vec<(Var, Vec<f64>)>> {
    Ok(match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (get(*a), get(*b));
            let (m, k) = av.dims2()?;
            let n = bv.dims2()?.1;
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv.data()[p * n..(p + 1) * n];
                    ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    let aval = av.data()[i * k + p];
                    if aval != 0.0 {
                        for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += aval * gv;
                        }
                    }
                }
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Transpose(x) => {
            let (m, n) = get(*x).dims2()?;
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            vec![(*x, gx)]
        }
        Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
        Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
        Op::Mul(a, b) => {
            let (av, bv) = (get(*a).data(), get(*b).data());
            vec![
                (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
            ]
        }
        Op::Scale(x, c) => vec![(*x, g.iter().map(|v| v * c).collect())],
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = lanes(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for n in 0..inner {
                    let idx = |i: usize| o * len * inner + i * inner + n;
                    let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..len {
                        gx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::SoftmaxCausal(x) => {
            let c = out.cols();
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            vec![(*x, gx)]
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = get(*x);
            let gain_v = get(*gain).data();
            let d = xv.cols();
            let stats = ops::row_stats(xv, *eps);
            let mut gx = vec![0.0; xv.len()];
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut dxhat = vec![0.0; d];
            for (r, (mean, rstd)) in stats.iter().enumerate() {
                let row = &xv.data()[r * d..(r + 1) * d];
                let grow = &g[r * d..(r + 1) * d];
                for c in 0..d {
                    xhat[c] = (row[c] - mean) * rstd;
                    dxhat[c] = grow[c] * gain_v[c];
                    ggain[c] += grow[c] * xhat[c];
                    gbias[c] += grow[c];
                }
                let sum_d: f64 = dxhat.iter().sum();
                let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for c in 0..d {
                    gx[r * d + c] =
                        rstd / d as f64 * (d as f64 * dxhat[c] - sum_d - xhat[c] * sum_dx);
                }
            }
            vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
        }
        Op::Silu(x) => {
            let gx = get(*x)
                .data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| {
                    let s = ops::sigmoid(v);
                    gv * s * (1.0 + v * (1.0 - s))
                })
                .collect();
            vec![(*x, gx)]
        }
        Op::Mse(a, b) => {
            let ga: Vec<f64> = get(*a)
                .data()
                .iter()
                .zip(get(*b).data())
                .map(|(x, y)| 2.0 * (x - y) * g[0])
                .collect();
            let gb = ga.iter().map(|v| -v).collect();
            vec![(*a, ga), (*b, gb)]
        }
        Op::CrossEntropy { logits, targets } => {
            let l = get(*logits);
            let probs = ops::softmax(l, 1)?;
            let t = targets.len() as f64;
            let v = l.cols();
            let mut gl = probs.into_data();
            for (r, &c) in targets.iter().enumerate() {
                gl[r * v + c] -= 1.0;
            }
            gl.iter_mut().for_each(|x| *x *= g[0] / t);
            vec![(*logits, gl)]
        }
        Op::Sum(x) => vec![(*x, vec![g[0]; get(*x).len()])],
        Op::ConcatRows(xs) => {
            let mut offset = 0;
            xs.iter()
                .map(|x| {
                    let n = get(*x).len();
                    let part = g[offset..offset + n].to_vec();
                    offset += n;
                    (*x, part)
                })
                .collect()
        }
        Op::ConcatCols(xs) => {
            let total = out.cols();
            let rows = out.rows();
            let mut start = 0;
            xs.iter()
                .map(|x| {
                    let w = get(*x).cols();
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&g[r * total + start..r * total + start + w]);
                    }
                    start += w;
                    (*x, part)
                })
                .collect()
        }
        Op::SliceCols { x, start, len } => {
            let (r, c) = get(*x).dims2()?;
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![(*x, gx)]
        }
        Op::GatherRows { x, index } => {
            let (r, c) = get(*x).dims2()?;
            let mut gx = vec![0.0; r * c];
            for (src, &dst) in index.iter().enumerate() {
                for (o, v) in gx[dst * c..(dst + 1) * c]
                    .iter_mut()
                    .zip(&g[src * c..(src + 1) * c])
                {
                    *o += v;
                }
            }
            vec![(*x, gx)]
        }
        Op::ScatterRows { x, index, .. } => {
            let c = out.cols();
            let mut gx = Vec::with_capacity(index.len() * c);
            for &dst in index {
                gx.extend_from_slice(&g[dst * c..(dst + 1) * c]);
            }
            vec![(*x, gx)]
        }
        Op::RowScale { x, scale } => {
            let xv = get(*x);
            let s = get(*scale).data();
            let c = xv.cols();
            let mut gx = g.to_vec();
            let mut gs = vec![0.0; s.len()];
            for r in 0..s.len() {
                let grow = &g[r * c..(r + 1) * c];
                gs[r] = grow.iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                gx[r * c..(r + 1) * c].iter_mut().for_each(|v| *v *= s[r]);
            }
            vec![(*x, gx), (*scale, gs)]
        }
        Op::TopKWeights {
            probs,
            selected,
            renormalize,
        } => {
            let p = get(*probs);
            let m = p.cols();
            let mut gp = vec![0.0; p.len()];
            for (r, sel) in selected.iter().enumerate() {
                if *renormalize {
                    let denom: f64 = sel.iter().map(|&i| p.at(r, i)).sum();
                    let dot: f64 = sel.iter().map(|&i| g[r * m + i] * out.at(r, i)).sum();
                    for &j in sel {
                        gp[r * m + j] = (g[r * m + j] - dot) / denom;
                    }
                } else {
                    for &j in sel {
                        gp[r * m + j] = g[r * m + j];
                    }
                }
            }
            vec![(*probs, gp)]
        }
    })
}
