//! Finite-difference gradient oracle.
//!
//! Central differences over forward evaluations only, so the check stays
//! independent of the backward pass it verifies. Used by the unit tests and
//! the acceptance suite.

/// Default perturbation for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Central-difference derivative of `f` w.r.t. `x[i]` for each `i` in
/// `indices`, leaving `x` unchanged.
pub fn fd_gradient_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    indices: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut xs = x.to_vec();
    indices
        .iter()
        .map(|&i| {
            let orig = xs[i];
            xs[i] = orig + eps;
            let fp = f(&xs);
            xs[i] = orig - eps;
            let fm = f(&xs);
            xs[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Relative error with an absolute floor: tiny pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        d
    } else {
        d / scale
    }
}

/// Max relative error between an analytic gradient (at `indices`) and the
/// finite-difference oracle.
pub fn max_rel_err(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
) -> f64 {
    let fd = fd_gradient_at(f, x, indices, eps);
    indices
        .iter()
        .zip(&fd)
        .map(|(&i, &fdv)| rel_err(analytic[i], fdv))
        .fold(0.0, f64::max)
}

use super::{Tensor, TensorResult};
use crate::seeds;
use rand::Rng;

/// Repeated randomized gradient check of a tensor function against the
/// finite-difference oracle.
///
/// Per trial: fresh random inputs, a random linear functional of the output
/// as the scalar loss, one backward pass, then FD probes at `probes` random
/// coordinates of every input. Returns the max relative error observed, or an
/// error message naming the failing trial.
pub fn check_grad(
    name: &str,
    shapes: &[&[usize]],
    sample: &mut dyn FnMut(usize, usize, &mut rand_chacha::ChaCha8Rng) -> f64,
    apply: &dyn Fn(&[Tensor]) -> TensorResult<Tensor>,
    trials: usize,
    probes: usize,
    tol: f64,
    seed: u64,
) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let mut rng = seeds::stream(seed, "gradcheck", trial as u64);
        let datas: Vec<Vec<f64>> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                (0..s.iter().product::<usize>())
                    .map(|j| sample(i, j, &mut rng))
                    .collect()
            })
            .collect();
        let params: Vec<Tensor> = shapes
            .iter()
            .zip(&datas)
            .map(|(s, d)| Tensor::param(s, d.clone()))
            .collect();
        let out = apply(&params).map_err(|e| format!("{name} trial {trial}: forward failed: {e}"))?;
        let weights: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wt = Tensor::new(out.shape(), weights.clone());
        let loss = out
            .mul(&wt)
            .and_then(|t| t.sum())
            .map_err(|e| format!("{name} trial {trial}: loss failed: {e}"))?;
        loss.backward().map_err(|e| format!("{name} trial {trial}: backward failed: {e}"))?;

        for (i, p) in params.iter().enumerate() {
            let analytic = p
                .grad()
                .unwrap_or_else(|| vec![0.0; p.len()]);
            let n = p.len();
            let k = probes.min(n);
            let mut indices: Vec<usize> = Vec::with_capacity(k);
            while indices.len() < k {
                let idx = rng.gen_range(0..n);
                if !indices.contains(&idx) {
                    indices.push(idx);
                }
            }
            let mut eval = |x: &[f64]| -> f64 {
                let inputs: Vec<Tensor> = shapes
                    .iter()
                    .zip(&datas)
                    .enumerate()
                    .map(|(j, (s, d))| Tensor::new(s, if j == i { x.to_vec() } else { d.clone() }))
                    .collect();
                let out = apply(&inputs).expect("forward failed during FD probe");
                out.with_data(|o| o.iter().zip(&weights).map(|(a, b)| a * b).sum())
            };
            let err = max_rel_err(&mut eval, &datas[i], &analytic, &indices, FD_EPS);
            worst = worst.max(err);
            if err > tol {
                return Err(format!(
                    "{name} trial {trial}: input {i} rel err {err:.3e} > tol {tol:.1e}"
                ));
            }
        }
    }
    Ok(worst)
}

/// Uniform sampler over [lo, hi] for [`check_grad`].
pub fn uniform(lo: f64, hi: f64) -> impl FnMut(usize, usize, &mut rand_chacha::ChaCha8Rng) -> f64 {
    move |_, _, rng| rng.gen_range(lo..hi)
}

/// Uniform sampler that stays `margin` away from zero (for relu-like kinks).
pub fn uniform_away_from_zero(
    lo: f64,
    hi: f64,
    margin: f64,
) -> impl FnMut(usize, usize, &mut rand_chacha::ChaCha8Rng) -> f64 {
    move |_, _, rng| loop {
        let v = rng.gen_range(lo..hi);
        if v.abs() >= margin {
            return v;
        }
    }
}
