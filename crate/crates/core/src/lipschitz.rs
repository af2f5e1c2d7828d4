//! Upper bounds on a network's Lipschitz constant.
//!
//! ReLU is 1-Lipschitz and biases do not change it, so the product of the
//! layers' spectral norms bounds `‖f(x) − f(x')‖₂ / ‖x − x'‖₂`. Each spectral
//! norm comes from power iteration on `WᵀW`.
//!
//! Two modes are provided. The training mode runs a single iteration per
//! layer, warm-started from (and updating) the vectors persisted on the
//! model, so the estimate tightens as training proceeds. The certification
//! mode iterates to convergence from both the persisted vector and a fresh
//! seeded start and keeps the larger value.

use std::f64::consts::SQRT_2;

use crate::error::{Error, Result};
use crate::model::{seeded_unit_vector, MlpModel};
use crate::tensor::Tensor;

/// Successive estimates closer than this end certification-mode iteration.
pub const EXACT_TOLERANCE: f64 = 1e-9;
/// Iteration cap for certification mode.
pub const EXACT_MAX_ITERS: usize = 1000;

const FRESH_START_SEED: u64 = 0x5eed_1e55;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LipschitzMode {
    /// One warm-started power iteration per layer; updates the model's vectors.
    TrainingFast,
    /// Converged power iteration; leaves the model untouched.
    CertificationExact,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzEstimate {
    pub per_layer_norms: Vec<f64>,
    pub global_bound: f64,
    pub iterations_used: usize,
    pub mode: LipschitzMode,
}

impl LipschitzEstimate {
    fn from_norms(per_layer_norms: Vec<f64>, iterations_used: usize, mode: LipschitzMode) -> Self {
        let global_bound = per_layer_norms.iter().product();
        Self {
            per_layer_norms,
            global_bound,
            iterations_used,
            mode,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `W v` for `W` stored `[out × in]`.
fn mat_vec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| w.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Wᵀ u`.
fn mat_t_vec(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ur) in u.iter().enumerate() {
        if ur != 0.0 {
            for (o, a) in out.iter_mut().zip(w.row(r)) {
                *o += ur * a;
            }
        }
    }
    out
}

/// Start vector for when `v` lies in the null space of a non-zero `W`: the
/// basis vector of the largest column, which `W` cannot annihilate.
fn escape_null_space(w: &Tensor) -> Vec<f64> {
    let cols = w.cols();
    let mut best = (0, 0.0);
    for c in 0..cols {
        let sq: f64 = (0..w.rows()).map(|r| w.row(r)[c].powi(2)).sum();
        if sq > best.1 {
            best = (c, sq);
        }
    }
    let mut e = vec![0.0; cols];
    e[best.0] = 1.0;
    e
}

/// One round `v ← WᵀWv / ‖WᵀWv‖`. `None` when `W` is the zero matrix.
/// Non-finite weights give a non-finite vector rather than an error.
fn power_step(w: &Tensor, v: &[f64]) -> Option<Vec<f64>> {
    let round = |v: &[f64]| {
        let z = mat_t_vec(w, &mat_vec(w, v));
        let nz = norm(&z);
        (z, nz)
    };
    let (mut z, mut nz) = round(v);
    if nz == 0.0 {
        if w.data().iter().all(|&x| x == 0.0) {
            return None;
        }
        (z, nz) = round(&escape_null_space(w));
    }
    Some(z.into_iter().map(|x| x / nz).collect())
}

fn check_start(w: &Tensor, v0: &[f64]) -> Result<()> {
    w.dims2("spectral_norm")?;
    if v0.len() != w.cols() {
        return Err(Error::Shape {
            op: "spectral_norm",
            lhs: w.shape().to_vec(),
            rhs: vec![v0.len()],
        });
    }
    if (norm(v0) - 1.0).abs() > 1e-6 {
        return Err(Error::contract("power iteration start vector must have unit norm"));
    }
    Ok(())
}

/// Spectral norm estimate `‖W v‖₂` after `iters` power-iteration rounds from
/// `v0`, together with the final vector for warm-starting.
///
/// A zero matrix yields `(0, v0)`.
pub fn spectral_norm_power_iter(w: &Tensor, v0: &[f64], iters: usize) -> Result<(f64, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::contract("power iteration needs at least one round"));
    }
    check_start(w, v0)?;
    let mut v = v0.to_vec();
    for _ in 0..iters {
        match power_step(w, &v) {
            Some(next) => v = next,
            None => return Ok((0.0, v0.to_vec())),
        }
    }
    let sigma = norm(&mat_vec(w, &v));
    if !sigma.is_finite() {
        return Err(Error::NonFinite { op: "spectral_norm" });
    }
    Ok((sigma, v))
}

/// Iterates until successive estimates differ by less than [`EXACT_TOLERANCE`]
/// or [`EXACT_MAX_ITERS`] rounds have run. Returns `(norm, vector, rounds)`.
pub fn spectral_norm_converged(w: &Tensor, v0: &[f64]) -> Result<(f64, Vec<f64>, usize)> {
    check_start(w, v0)?;
    let mut v = v0.to_vec();
    let mut prev = norm(&mat_vec(w, &v));
    for round in 1..=EXACT_MAX_ITERS {
        match power_step(w, &v) {
            Some(next) => v = next,
            None => return Ok((0.0, v0.to_vec(), round)),
        }
        let sigma = norm(&mat_vec(w, &v));
        if !sigma.is_finite() {
            return Err(Error::NonFinite { op: "spectral_norm" });
        }
        if (sigma - prev).abs() < EXACT_TOLERANCE {
            return Ok((sigma, v, round));
        }
        prev = sigma;
    }
    Ok((prev, v, EXACT_MAX_ITERS))
}

/// `‖W v‖₂` and its gradient with respect to `W` for fixed `v`, namely
/// `u vᵀ` with `u = W v / ‖W v‖₂`. `None` when `W v = 0`.
pub fn spectral_norm_gradient(w: &Tensor, v: &[f64]) -> Result<Option<(f64, Tensor)>> {
    check_start(w, v)?;
    let wv = mat_vec(w, v);
    let sigma = norm(&wv);
    if sigma == 0.0 {
        return Ok(None);
    }
    let mut g = Vec::with_capacity(w.numel());
    for ui in &wv {
        g.extend(v.iter().map(|vj| ui / sigma * vj));
    }
    Ok(Some((sigma, Tensor::matrix(w.rows(), w.cols(), g)?)))
}

/// Training-mode estimate: one warm-started round per layer, persisting the
/// updated vectors on `model`.
pub fn training_lipschitz(model: &mut MlpModel) -> Result<LipschitzEstimate> {
    let mut norms = Vec::with_capacity(model.layers().len());
    for i in 0..model.layers().len() {
        let (sigma, v) =
            spectral_norm_power_iter(&model.layers()[i].weight, &model.power_vectors()[i], 1)?;
        model.set_power_vector(i, v);
        norms.push(sigma);
    }
    Ok(LipschitzEstimate::from_norms(norms, 1, LipschitzMode::TrainingFast))
}

/// Certification-mode estimate on a frozen model.
pub fn certified_lipschitz(model: &MlpModel) -> Result<LipschitzEstimate> {
    let mut norms = Vec::with_capacity(model.layers().len());
    let mut rounds = 0;
    for (i, (layer, warm)) in model.layers().iter().zip(model.power_vectors()).enumerate() {
        let fresh = seeded_unit_vector(layer.in_dim(), FRESH_START_SEED, i as u64);
        let (a, _, ra) = spectral_norm_converged(&layer.weight, warm)?;
        let (b, _, rb) = spectral_norm_converged(&layer.weight, &fresh)?;
        norms.push(a.max(b));
        rounds = rounds.max(ra).max(rb);
    }
    Ok(LipschitzEstimate::from_norms(
        norms,
        rounds,
        LipschitzMode::CertificationExact,
    ))
}

pub fn network_lipschitz(model: &mut MlpModel, mode: LipschitzMode) -> Result<LipschitzEstimate> {
    match mode {
        LipschitzMode::TrainingFast => training_lipschitz(model),
        LipschitzMode::CertificationExact => certified_lipschitz(model),
    }
}

/// `√2 · L · ε`, the margin that certifies robustness within radius `ε`.
pub fn required_beta(lipschitz: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be >= 0, got {epsilon}")));
    }
    Ok(SQRT_2 * lipschitz * epsilon)
}

pub fn required_margin(estimate: &LipschitzEstimate, epsilon: f64) -> Result<f64> {
    required_beta(estimate.global_bound, epsilon)
}
