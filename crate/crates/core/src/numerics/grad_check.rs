//! Finite-difference gradient oracle.
//!
//! Compares reverse-mode gradients against central differences of the same
//! scalar function over a random coordinate subset. Intended to run in `f64`;
//! at `f32` the differences themselves are too noisy to certify anything.

use ndarray::ArrayD;
use rand::seq::index::sample;

use super::rng::chacha;
use super::{NodeId, NumericsError, Tape};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(param name, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Evaluate the scalar function once and return the reverse-mode gradients,
/// ordered like `params`.
pub fn analytic_gradients<B>(
    params: &[(String, ArrayD<f64>)],
    build: &B,
) -> Result<Vec<ArrayD<f64>>, NumericsError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut tape = Tape::eval();
    let ids: Vec<NodeId> = params.iter().map(|(_, a)| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    let value = tape.scalar_value(loss);
    if !value.is_finite() {
        return Err(NumericsError::NonFinite { context: "loss value".into() });
    }
    tape.backward(loss)?;
    Ok(ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, a))| {
            tape.grad(id).cloned().unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect())
}

fn eval_at<B>(
    params: &[(String, ArrayD<f64>)],
    build: &B,
) -> Result<f64, NumericsError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let mut tape = Tape::eval();
    let ids: Vec<NodeId> = params.iter().map(|(_, a)| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &ids)?;
    Ok(tape.scalar_value(loss))
}

/// Compare the provided gradients against central differences.
///
/// At least `min_coords` coordinates are sampled in total (each parameter
/// array contributes at least a few, proportionally to its size). Relative
/// error uses `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn fd_compare<B>(
    params: &[(String, ArrayD<f64>)],
    gradients: &[ArrayD<f64>],
    build: &B,
    step: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    if step <= 0.0 {
        return Err(NumericsError::InvalidArg { op: "fd_compare", msg: format!("step = {step}") });
    }
    let total: usize = params.iter().map(|(_, a)| a.len()).sum();
    let mut rng = chacha(seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };

    for (pi, (name, array)) in params.iter().enumerate() {
        let n = array.len();
        if n == 0 {
            continue;
        }
        let want = ((min_coords * n).div_ceil(total)).clamp(3.min(n), n);
        let picks: Vec<usize> = if want >= n {
            (0..n).collect()
        } else {
            sample(&mut rng, n, want).into_vec()
        };
        for flat in picks {
            let analytic = gradients[pi].as_slice().expect("standard layout")[flat];
            let mut perturbed: Vec<(String, ArrayD<f64>)> = params.to_vec();
            perturbed[pi].1.as_slice_mut().expect("standard layout")[flat] += step;
            let plus = eval_at(&perturbed, build)?;
            perturbed[pi].1.as_slice_mut().expect("standard layout")[flat] -= 2.0 * step;
            let minus = eval_at(&perturbed, build)?;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(NumericsError::NonFinite {
                    context: format!("gradient check at {name}[{flat}]"),
                });
            }
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.clone(), flat, analytic, numeric));
            }
        }
    }
    Ok(report)
}

/// Reverse-mode gradients of `build` versus central differences.
pub fn grad_check<B>(
    params: &[(String, ArrayD<f64>)],
    build: B,
    step: f64,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    B: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId, NumericsError>,
{
    let gradients = analytic_gradients(params, &build)?;
    fd_compare(params, &gradients, &build, step, min_coords, seed)
}
