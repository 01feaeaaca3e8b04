//! Central-difference gradient checking against the tape's analytic gradients.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic − numeric| / max(1, |numeric|)`
    pub max_rel_err: f64,
    /// `(param index, flat coordinate)` where the maximum occurred
    pub worst: Option<(usize, usize)>,
    /// worst relative error per parameter tensor
    pub per_param: Vec<f64>,
    pub coords_checked: usize,
}

/// Options for [`grad_check_with`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many seeded-random coordinates per parameter tensor.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

/// Checks every coordinate of every parameter.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with(
        f,
        params,
        GradCheckOptions {
            eps,
            ..Default::default()
        },
    )
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
}

pub fn grad_check_with<F>(
    f: F,
    params: &[Tensor],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::Parameter(format!(
            "finite-difference eps must lie in [1e-7, 1e-3], got {}",
            opts.eps
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = tape.scalar(out)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec)
        })
        .collect();

    let again = evaluate(&f, params)?;
    if again.to_bits() != base.to_bits() {
        return Err(Error::Oracle(format!(
            "function is not deterministic: {base:e} then {again:e}"
        )));
    }

    let mut rng = stream(opts.seed, "gradcheck");
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        per_param: vec![0.0; params.len()],
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < p.len() => {
                let mut c = sample(&mut rng, p.len(), cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for c in coords {
            let orig = p.data()[c];
            work[pi].data_mut()[c] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let rel = (analytic[pi][c] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            report.per_param[pi] = report.per_param[pi].max(rel);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel.max(report.max_rel_err);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}
