//! Dense row-major `f64` tensors and the forward kernels shared by the tape.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense n-dimensional array of finite reals with an optional gradient slot.
///
/// A zero-rank tensor (`shape == []`) holds one value and is used for scalar
/// losses.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Parameter(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {pos} of tensor {shape:?} is {}",
                data[pos]
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Builds from 2-D nested rows. Rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Parameter("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(&[], value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Raw mutable access. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// `(rows, cols)` of a matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Parameter(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data[..] {
            [v] => Ok(v),
            _ => Err(Error::Usage(format!(
                "item() on tensor of shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Text form: shape line, then one line per last-axis row with 17
    /// significant digits per value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let shape: Vec<String> = self.shape.iter().map(ToString::to_string).collect();
        out.push_str(&shape.join(" "));
        out.push('\n');
        let width = if self.shape.is_empty() {
            1
        } else {
            self.cols()
        };
        if width > 0 {
            for chunk in self.data.chunks(width) {
                let line: Vec<String> = chunk.iter().map(|v| format!("{v:.16e}")).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty tensor text".into()))?;
        let shape = header
            .split_whitespace()
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line 1: bad extent {s:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut data = Vec::with_capacity(numel(&shape));
        for (n, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let v = tok
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: bad value {tok:?}: {e}", n + 2)))?;
                data.push(v);
            }
        }
        Tensor::new(shape, data)
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_text(&text)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }
}

impl std::fmt::Display for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = String::new();
        let _ = write!(s, "Tensor{:?}", self.shape);
        f.write_str(&s)
    }
}

/// Offsets of the 1-D lanes along `axis`: `(outer, len, inner)`.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Forward kernels. Each has a matching differentiable op on [`crate::Tape`].
pub mod ops {
    use super::*;

    fn ensure_finite(op: &str, data: &[f64]) -> Result<()> {
        match data.iter().find(|v| !v.is_finite()) {
            Some(v) => Err(Error::NonFinite(format!("{op} produced {v}"))),
            None => Ok(()),
        }
    }

    fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape != b.shape {
            return Err(Error::dim(op, &a.shape, &b.shape));
        }
        Ok(())
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a
            .dims2()
            .map_err(|_| Error::dim("matmul", &a.shape, &b.shape))?;
        let (k2, n) = b
            .dims2()
            .map_err(|_| Error::dim("matmul", &a.shape, &b.shape))?;
        if k != k2 {
            return Err(Error::dim("matmul", &a.shape, &b.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        ensure_finite("matmul", &out)?;
        Ok(Tensor::from_parts_unchecked(vec![m, n], out))
    }

    pub fn transpose(a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data[i * n + j];
            }
        }
        Ok(Tensor::from_parts_unchecked(vec![n, m], out))
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_with("add", a, b, |x, y| x + y)
    }

    pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_with("sub", a, b, |x, y| x - y)
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        zip_with("mul", a, b, |x, y| x * y)
    }

    fn zip_with(
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        same_shape(op, a, b)?;
        let out: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
        ensure_finite(op, &out)?;
        Ok(Tensor::from_parts_unchecked(a.shape.clone(), out))
    }

    pub fn scale(a: &Tensor, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = a.data.iter().map(|x| x * c).collect();
        ensure_finite("scale", &out)?;
        Ok(Tensor::from_parts_unchecked(a.shape.clone(), out))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= x.rank() {
            return Err(Error::Parameter(format!(
                "softmax axis {axis} out of range for shape {:?}",
                x.shape
            )));
        }
        let (outer, len, inner) = lanes(&x.shape, axis);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for n in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + n;
                softmax_lane(len, |i| x.data[idx(i)], |i, v| out[idx(i)] = v, len);
            }
        }
        Ok(Tensor::from_parts_unchecked(x.shape.clone(), out))
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `0..=i`.
    pub fn softmax_causal(x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let visible = (i + 1).min(c);
            let row = &x.data[i * c..(i + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            softmax_lane(c, |j| row[j], |j, v| orow[j] = v, visible);
        }
        Ok(Tensor::from_parts_unchecked(vec![r, c], out))
    }

    fn softmax_lane(
        len: usize,
        get: impl Fn(usize) -> f64,
        mut set: impl FnMut(usize, f64),
        visible: usize,
    ) {
        if visible == 0 {
            return;
        }
        let max = (0..visible).map(&get).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..visible).map(|i| (get(i) - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            set(i, e / z);
        }
        for i in visible..len {
            set(i, 0.0);
        }
    }

    /// Per-row mean and reciprocal standard deviation over the last axis.
    pub(crate) fn row_stats(x: &Tensor, eps: f64) -> Vec<(f64, f64)> {
        let d = x.cols();
        if d == 0 {
            return Vec::new();
        }
        x.data
            .chunks(d)
            .map(|row| {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                (mean, 1.0 / (var + eps).sqrt())
            })
            .collect()
    }

    /// Normalizes over the last axis (population variance), then applies
    /// per-feature gain and bias.
    pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = x.cols();
        if x.rank() == 0 || gain.shape != [d] || bias.shape != [d] {
            return Err(Error::dim("layer_norm", &x.shape, &gain.shape));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let stats = row_stats(x, eps);
        let mut out = vec![0.0; x.len()];
        for (r, (mean, rstd)) in stats.iter().enumerate() {
            for c in 0..d {
                let xhat = (x.data[r * d + c] - mean) * rstd;
                out[r * d + c] = xhat * gain.data[c] + bias.data[c];
            }
        }
        ensure_finite("layer_norm", &out)?;
        Ok(Tensor::from_parts_unchecked(x.shape.clone(), out))
    }

    pub(crate) fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn silu(x: &Tensor) -> Tensor {
        let out = x.data.iter().map(|&v| v * sigmoid(v)).collect();
        Tensor::from_parts_unchecked(x.shape.clone(), out)
    }

    /// Indices of the `k` largest entries, descending by value, ties to the
    /// lowest index.
    pub fn top_k(values: &[f64], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        if k == 0 || k > values.len() {
            return Err(Error::Parameter(format!(
                "top_k needs 1 <= k <= {}, got k = {k}",
                values.len()
            )));
        }
        let mut chosen: Vec<usize> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, &v) in values.iter().enumerate() {
                if chosen.contains(&i) {
                    continue;
                }
                // Strict comparison keeps the earliest index on ties.
                if best.is_none_or(|b| v > values[b]) {
                    best = Some(i);
                }
            }
            chosen.push(best.expect("k <= len"));
        }
        let vals = chosen.iter().map(|&i| values[i]).collect();
        Ok((chosen, vals))
    }

    /// Sum of squared differences.
    pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
        same_shape("mse", a, b)?;
        Ok(a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum())
    }

    /// Mean over rows of the negative log-softmax at each row's target.
    pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
        let (t, v) = logits.dims2()?;
        if targets.len() != t {
            return Err(Error::dim("cross_entropy", &logits.shape, &[targets.len()]));
        }
        if t == 0 {
            return Err(Error::Parameter("cross_entropy over zero positions".into()));
        }
        if let Some(bad) = targets.iter().find(|&&c| c >= v) {
            return Err(Error::Parameter(format!(
                "target class {bad} out of range for {v} classes"
            )));
        }
        let mut total = 0.0;
        for (r, &c) in targets.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[c];
        }
        Ok(total / t as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::ops::*;
    use super::*;
    use crate::rng::stream;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Tensor::new(vec![0, 4], vec![]).is_ok());
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let a = m(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = m(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn matmul_associativity() {
        let mut rng = stream(3, "assoc");
        for _ in 0..20 {
            let a = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let c = Tensor::uniform(&[4, 4], -1.0, 1.0, &mut rng);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(left.max_abs_diff(&right) < 1e-9);
        }
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::new(vec![3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = m(&[&[1.0, 5.0], &[1.0, -5.0]]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.at(0, 1) + s.at(1, 1) - 1.0).abs() < 1e-15);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let s = softmax_causal(&Tensor::zeros(&[3, 3])).unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert!((s.at(1, 0) - 0.5).abs() < 1e-15 && s.at(1, 2) == 0.0);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        let y = layer_norm(&m(&[&[5.0, 5.0, 5.0]]), &g, &b, 1e-12).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g = Tensor::full(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let y = layer_norm(&m(&[&[1.0, -1.0]]), &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-10 && (y.data()[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_unit_moments() {
        let mut rng = stream(5, "ln");
        let x = Tensor::randn(&[6, 9], 3.0, &mut rng);
        let y = layer_norm(&x, &Tensor::full(&[9], 1.0), &Tensor::zeros(&[9]), 1e-12).unwrap();
        for r in 0..6 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn silu_examples() {
        let y = silu(&Tensor::new(vec![2], vec![0.0, 20.0]).unwrap());
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 20.0).abs() < 1e-6);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.1, 0.7, 0.2], 2).unwrap().0, vec![1, 2]);
        assert_eq!(top_k(&[0.5, 0.5], 1).unwrap().0, vec![0]);
        assert!(matches!(top_k(&[0.5], 2), Err(Error::Parameter(_))));
        assert!(top_k(&[0.5], 0).is_err());
    }

    #[test]
    fn top_k_matches_full_sort() {
        let mut rng = stream(11, "topk");
        for _ in 0..50 {
            let v = Tensor::uniform(&[16], -1.0, 1.0, &mut rng).into_data();
            for k in 1..=16 {
                let mut order: Vec<usize> = (0..16).collect();
                order.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
                assert_eq!(top_k(&v, k).unwrap().0, order[..k]);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let x = m(&[&[1.5, -2.0]]);
        assert_eq!(mse(&x, &x).unwrap(), 0.0);
        assert_eq!(mse(&m(&[&[1.0, 0.0]]), &m(&[&[0.0, 0.0]])).unwrap(), 1.0);
        assert!(mse(&x, &Tensor::zeros(&[2, 1])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&Tensor::zeros(&[3, 8]), &[0, 5, 7]).unwrap();
        assert!((ce - 8f64.ln()).abs() < 1e-14);
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 1000.0;
        assert!(cross_entropy(&logits, &[2]).unwrap().abs() < 1e-12);
        assert!(matches!(
            cross_entropy(&logits, &[4]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn text_format_roundtrip() {
        let mut rng = stream(1, "text");
        let t = Tensor::randn(&[3, 2, 5], 1e3, &mut rng);
        assert_eq!(Tensor::from_text(&t.to_text()).unwrap(), t);
        let s = Tensor::scalar(std::f64::consts::PI);
        assert_eq!(Tensor::from_text(&s.to_text()).unwrap(), s);
        let e = Tensor::zeros(&[0, 4]);
        assert_eq!(Tensor::from_text(&e.to_text()).unwrap(), e);
    }

    #[test]
    fn text_format_reports_bad_line() {
        let err = Tensor::from_text("2\n1.0 nope\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
