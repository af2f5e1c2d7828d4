//! Untargeted Carlini–Wagner ℓ2 attack and accuracy-vs-perturbation curves.
//!
//! The adversarial input is parameterised as
//! `x' = lo + (hi − lo)·(tanh(w) + 1)/2`, which keeps it inside the box, and
//! `‖x' − x‖² + c·max(f(x')_t − max_{i≠t} f(x')_i, −κ)` is minimised with
//! Adam for a fixed number of steps. The smallest successful perturbation
//! seen along the way is reported.
//!
//! Rows of a batch are attacked independently; batching only shares the
//! matrix products.

use serde::{Deserialize, Serialize};

use crate::certify::{predicted_class, prediction_margin, strongest_rival, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::mnist::Dataset;
use crate::model::MlpModel;
use crate::tensor::{Tape, Tensor};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Keeps `atanh` finite for inputs on the box edges.
const TANH_CLAMP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub confidence_kappa: f64,
    pub tradeoff_c: f64,
    pub box_min: f64,
    pub box_max: f64,
    /// Upper bound on ‖x' − x‖₂; candidates beyond it are projected back.
    pub norm_cap: Option<f64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            step_size: 0.01,
            confidence_kappa: 0.0,
            tradeoff_c: 1.0,
            box_min: 0.0,
            box_max: 1.0,
            norm_cap: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.iterations >= 1
            && self.box_min < self.box_max
            && self.step_size > 0.0
            && self.confidence_kappa >= 0.0
            && self.tradeoff_c > 0.0
            && self.norm_cap.is_none_or(|c| c >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid attack config {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttackResult {
    #[serde(skip)]
    pub adversarial_x: Vec<f64>,
    pub perturbation_norm: f64,
    pub success: bool,
    pub original_class: usize,
    pub adversarial_class: usize,
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Moves `candidate` onto the ℓ2 ball of radius `cap` around `x` if outside.
fn project(candidate: &mut [f64], x: &[f64], cap: f64) {
    let d = l2_dist(candidate, x);
    if d > cap {
        let s = cap / d;
        for (c, &xi) in candidate.iter_mut().zip(x) {
            *c = xi + s * (*c - xi);
        }
    }
}

/// Attacks a single example.
pub fn cw_l2_attack(
    model: &MlpModel,
    x: &[f64],
    label: usize,
    config: &AttackConfig,
) -> Result<AttackResult> {
    let xs = Tensor::matrix(1, x.len(), x.to_vec())?;
    let mut out = cw_l2_attack_batch(model, &xs, &[label], config)?;
    Ok(out.remove(0))
}

/// Attacks each row of `xs` with the config's norm cap.
pub fn cw_l2_attack_batch(
    model: &MlpModel,
    xs: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    let caps = vec![config.norm_cap.unwrap_or(f64::INFINITY); labels.len()];
    cw_l2_attack_batch_capped(model, xs, labels, config, &caps)
}

struct Best {
    norm: f64,
    x: Vec<f64>,
    class: usize,
}

/// Attacks each row of `xs` with its own norm cap (`INFINITY` for none);
/// `config.norm_cap` is ignored.
pub fn cw_l2_attack_batch_capped(
    model: &MlpModel,
    xs: &Tensor,
    labels: &[usize],
    config: &AttackConfig,
    caps: &[f64],
) -> Result<Vec<AttackResult>> {
    config.validate()?;
    let (m, d) = xs.dims2("cw_l2_attack")?;
    if labels.len() != m || caps.len() != m {
        return Err(Error::contract("one label and one cap per attacked row"));
    }
    crate::tensor::check_labels(labels, model.num_classes())?;
    let (lo, hi) = (config.box_min, config.box_max);
    if xs.data().iter().any(|&v| v < lo || v > hi) {
        return Err(Error::contract("attack input lies outside the box"));
    }
    let half_range = 0.5 * (hi - lo);
    let c = config.tradeoff_c;

    let clean = model.forward(xs)?;
    let original: Vec<usize> = (0..m).map(|i| predicted_class(clean.row(i), labels[i])).collect();

    let mut w: Vec<f64> = xs
        .data()
        .iter()
        .map(|&v| ((v - lo) / half_range - 1.0).clamp(-1.0 + TANH_CLAMP, 1.0 - TANH_CLAMP).atanh())
        .collect();
    let mut adam_m = vec![0.0; m * d];
    let mut adam_v = vec![0.0; m * d];
    let mut best: Vec<Option<Best>> = (0..m).map(|_| None).collect();
    let mut last_x = vec![0.0; m * d];
    let mut last_class = original.clone();

    let ones = Tensor::from_parts(vec![m, d], vec![1.0; m * d]);
    let low = Tensor::from_parts(vec![m, d], vec![lo; m * d]);

    for step in 0..=config.iterations {
        let mut tape = Tape::new();
        let params = model.bind(&mut tape, false);
        let wv = tape.param(Tensor::from_parts(vec![m, d], w.clone()));
        let t = tape.tanh(wv)?;
        let t = tape.shift(t, &ones)?;
        let t = tape.scale(t, half_range)?;
        let adv = tape.shift(t, &low)?;
        let x_const = tape.constant(xs.clone());
        let diff = tape.sub(adv, x_const)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum(sq)?;
        let logits = model.forward_on(&mut tape, &params, adv)?;

        // Track the best successful candidate (projected onto the cap).
        let adv_x = tape.value(adv).data().to_vec();
        let z = tape.value(logits).clone();
        let mut projected_rows = Vec::new();
        let mut candidates = adv_x.clone();
        for i in 0..m {
            let row = &mut candidates[i * d..(i + 1) * d];
            if l2_dist(row, xs.row(i)) > caps[i] {
                project(row, xs.row(i), caps[i]);
                projected_rows.push(i);
            }
        }
        let projected_logits = if projected_rows.is_empty() {
            None
        } else {
            let cand = Tensor::from_parts(vec![m, d], candidates.clone());
            Some(model.forward(&cand.select_rows(&projected_rows))?)
        };
        let mut p_iter = 0;
        for i in 0..m {
            let row_logits = if projected_rows.get(p_iter) == Some(&i) {
                p_iter += 1;
                projected_logits.as_ref().expect("projected").row(p_iter - 1)
            } else {
                z.row(i)
            };
            let class = predicted_class(row_logits, labels[i]);
            let cand = &candidates[i * d..(i + 1) * d];
            last_x[i * d..(i + 1) * d].copy_from_slice(cand);
            last_class[i] = class;
            if class != labels[i] {
                let norm = l2_dist(cand, xs.row(i));
                if best[i].as_ref().is_none_or(|b| norm < b.norm) {
                    best[i] = Some(Best {
                        norm,
                        x: cand.to_vec(),
                        class,
                    });
                }
            }
        }
        if step == config.iterations {
            break;
        }

        // c·(e_t − e_v) on rows where the hinge is active; the rival v is
        // treated as a constant index.
        let k = model.num_classes();
        let mut mask = vec![0.0; m * k];
        for i in 0..m {
            let row = z.row(i);
            let t = labels[i];
            if prediction_margin(row, t)? > -config.confidence_kappa {
                mask[i * k + t] = c;
                mask[i * k + strongest_rival(row, t)] = -c;
            }
        }
        let mask = tape.constant(Tensor::from_parts(vec![m, k], mask));
        let hinge = tape.mul(logits, mask)?;
        let hinge = tape.sum(hinge)?;
        let objective = tape.add(dist, hinge)?;
        let grads = tape.backward(objective).map_err(|e| match e {
            Error::NonFinite { .. } => Error::NonFinite {
                op: "cw_l2_attack gradient",
            },
            other => other,
        })?;
        let g = grads.get(wv).expect("w is differentiable");

        let t = (step + 1) as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for j in 0..m * d {
            adam_m[j] = ADAM_BETA1 * adam_m[j] + (1.0 - ADAM_BETA1) * g[j];
            adam_v[j] = ADAM_BETA2 * adam_v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = adam_m[j] / bc1;
            let vh = adam_v[j] / bc2;
            w[j] -= config.step_size * mh / (vh.sqrt() + ADAM_EPS);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "cw_l2_attack update",
            });
        }
    }

    Ok((0..m)
        .map(|i| match best[i].take() {
            Some(b) => AttackResult {
                perturbation_norm: b.norm,
                adversarial_x: b.x,
                success: true,
                original_class: original[i],
                adversarial_class: b.class,
            },
            None => {
                let x = last_x[i * d..(i + 1) * d].to_vec();
                AttackResult {
                    perturbation_norm: l2_dist(&x, xs.row(i)),
                    adversarial_x: x,
                    success: false,
                    original_class: original[i],
                    adversarial_class: last_class[i],
                }
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub norm: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct RobustnessCurve {
    pub points: Vec<CurvePoint>,
    pub results: Vec<AttackResult>,
    /// Per example: smallest adversarial norm, `0` if misclassified clean,
    /// `INFINITY` if the attack failed.
    pub min_norms: Vec<f64>,
}

/// Smallest norm that defeats each example; `0` for clean errors.
pub fn minimal_norms(results: &[AttackResult], labels: &[usize]) -> Vec<f64> {
    results
        .iter()
        .zip(labels)
        .map(|(r, &label)| {
            if r.original_class != label {
                0.0
            } else if r.success {
                r.perturbation_norm
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

/// Fraction of examples that are classified correctly and not defeated by
/// any perturbation of norm `≤ r`, for each `r` in `norm_grid`.
pub fn curve_from_norms(min_norms: &[f64], norm_grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if norm_grid.is_empty() {
        return Err(Error::contract("empty norm grid"));
    }
    if norm_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::contract("norm grid must be sorted ascending"));
    }
    let n = min_norms.len().max(1) as f64;
    Ok(norm_grid
        .iter()
        .map(|&r| CurvePoint {
            norm: r,
            accuracy: min_norms.iter().filter(|&&v| v > r).count() as f64 / n,
        })
        .collect())
}

pub fn accuracy_vs_perturbation_curve(
    model: &MlpModel,
    dataset: &Dataset,
    config: &AttackConfig,
    norm_grid: &[f64],
) -> Result<RobustnessCurve> {
    curve_from_norms(&[], norm_grid)?;
    let mut results = Vec::with_capacity(dataset.len());
    for start in (0..dataset.len()).step_by(EVAL_CHUNK / 10) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK / 10).min(dataset.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        results.extend(cw_l2_attack_batch(
            model,
            &dataset.images.select_rows(&idx),
            &labels,
            config,
        )?);
    }
    let min_norms = minimal_norms(&results, &dataset.labels);
    Ok(RobustnessCurve {
        points: curve_from_norms(&min_norms, norm_grid)?,
        results,
        min_norms,
    })
}
