//! Margin-based ε-robustness certificates.
//!
//! With `L` an upper bound on the network's Lipschitz constant, an example
//! whose logit margin `M = f(x)_t − max_{i≠t} f(x)_i` satisfies
//! `M ≥ √2·L·ε` keeps its class everywhere in the ℓ2 ball of radius `ε`.
//! Rearranged, each correctly classified example is certified up to radius
//! `M / (√2·L)`.
//!
//! A margin of exactly zero (a tie with the true class) counts as a
//! misclassification throughout.

use std::f64::consts::SQRT_2;

use serde::Serialize;

use crate::attack::{cw_l2_attack_batch_capped, AttackConfig, AttackResult};
use crate::error::{Error, Result};
use crate::lipschitz::{certified_lipschitz, required_beta};
use crate::mnist::Dataset;
use crate::model::MlpModel;
use crate::tensor::Tensor;

/// Rows per forward pass when scoring a whole dataset.
pub(crate) const EVAL_CHUNK: usize = 1000;

/// `logits[t] − max_{i≠t} logits[i]`.
pub fn prediction_margin(logits: &[f64], t: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::contract("a margin needs at least two classes"));
    }
    if t >= logits.len() {
        return Err(Error::LabelOutOfRange {
            row: 0,
            label: t,
            classes: logits.len(),
        });
    }
    let rival = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[t] - rival)
}

/// Highest-scoring class other than `t`, lowest index on ties.
pub fn strongest_rival(logits: &[f64], t: usize) -> usize {
    let mut best: Option<usize> = None;
    for (i, &z) in logits.iter().enumerate() {
        if i != t && best.is_none_or(|b| z > logits[b]) {
            best = Some(i);
        }
    }
    best.expect("at least two classes")
}

/// Predicted class with ties resolved against the true label: the label is
/// returned only when it strictly beats every other class.
pub fn predicted_class(logits: &[f64], label: usize) -> usize {
    let rival = strongest_rival(logits, label);
    if logits[label] > logits[rival] {
        label
    } else {
        rival
    }
}

/// Largest radius certified by `margin` under Lipschitz bound `lipschitz`.
pub fn certified_radius(margin: f64, lipschitz: f64) -> f64 {
    if margin <= 0.0 {
        0.0
    } else if lipschitz > 0.0 {
        margin / (SQRT_2 * lipschitz)
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    pub example_index: usize,
    pub predicted: usize,
    pub label: usize,
    pub margin: f64,
    pub required_beta: f64,
    pub certified_radius: f64,
    pub certified_at_epsilon: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CertificationSummary {
    pub examples: usize,
    pub epsilon: f64,
    pub lipschitz_bound: f64,
    pub required_beta: f64,
    pub clean_accuracy: f64,
    pub certified_accuracy: f64,
    pub mean_margin: f64,
}

#[derive(Clone, Debug)]
pub struct Certification {
    pub reports: Vec<MarginReport>,
    pub summary: CertificationSummary,
}

/// Certifies precomputed logits against a given Lipschitz bound.
pub fn certify_logits(
    logits: &Tensor,
    labels: &[usize],
    lipschitz: f64,
    epsilon: f64,
) -> Result<Certification> {
    let beta = required_beta(lipschitz, epsilon)?;
    if logits.rows() != labels.len() {
        return Err(Error::Shape {
            op: "certify",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let reports = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let row = logits.row(i);
            let margin = prediction_margin(row, label).map_err(|e| match e {
                Error::LabelOutOfRange { label, classes, .. } => Error::LabelOutOfRange {
                    row: i,
                    label,
                    classes,
                },
                other => other,
            })?;
            let predicted = predicted_class(row, label);
            Ok(MarginReport {
                example_index: i,
                predicted,
                label,
                margin,
                required_beta: beta,
                certified_radius: certified_radius(margin, lipschitz),
                certified_at_epsilon: predicted == label && margin >= beta,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = reports.len().max(1) as f64;
    let summary = CertificationSummary {
        examples: reports.len(),
        epsilon,
        lipschitz_bound: lipschitz,
        required_beta: beta,
        clean_accuracy: reports.iter().filter(|r| r.predicted == r.label).count() as f64 / n,
        certified_accuracy: reports.iter().filter(|r| r.certified_at_epsilon).count() as f64 / n,
        mean_margin: reports.iter().map(|r| r.margin).sum::<f64>() / n,
    };
    Ok(Certification { reports, summary })
}

/// Certifies every example of `dataset` at radius `epsilon` using the
/// converged Lipschitz bound.
pub fn certify_dataset(model: &MlpModel, dataset: &Dataset, epsilon: f64) -> Result<Certification> {
    let lipschitz = certified_lipschitz(model)?.global_bound;
    let logits = model.forward_chunked(&dataset.images, EVAL_CHUNK)?;
    certify_logits(&logits, &dataset.labels, lipschitz, epsilon)
}

/// Outcome of attacking a certified example inside its radius.
#[derive(Clone, Debug, PartialEq)]
pub enum CertificateCheck {
    /// The attack did not change the class within the budget.
    Pass,
    /// The attack changed the class inside the certified radius.
    Violation { attack: AttackResult, radius: f64 },
    /// The attack succeeded, but only outside the certified radius (possible
    /// when the budget exceeds the radius).
    BeyondRadius { attack: AttackResult, radius: f64 },
    /// Nothing to check.
    Skipped(SkipReason),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipReason {
    Misclassified,
    ZeroRadius,
}

/// Shrink factor applied to a certified radius to form the default budget.
pub const RADIUS_SLACK: f64 = 1.0 - 1e-6;

fn classify(report: &MarginReport, attack: AttackResult) -> CertificateCheck {
    if !attack.success {
        CertificateCheck::Pass
    } else if attack.perturbation_norm <= report.certified_radius {
        CertificateCheck::Violation {
            attack,
            radius: report.certified_radius,
        }
    } else {
        CertificateCheck::BeyondRadius {
            attack,
            radius: report.certified_radius,
        }
    }
}

fn skip_reason(report: &MarginReport) -> Option<SkipReason> {
    if report.predicted != report.label {
        Some(SkipReason::Misclassified)
    } else if report.certified_radius <= 0.0 {
        Some(SkipReason::ZeroRadius)
    } else {
        None
    }
}

/// Attacks `x` with the perturbation norm capped at `budget`, by default the
/// certified radius times [`RADIUS_SLACK`].
pub fn verify_certificate_against_attack(
    model: &MlpModel,
    x: &[f64],
    report: &MarginReport,
    config: &AttackConfig,
    budget: Option<f64>,
) -> Result<CertificateCheck> {
    let checks = verify_certificates(
        model,
        &Tensor::matrix(1, x.len(), x.to_vec())?,
        std::slice::from_ref(report),
        config,
        budget.map(|b| vec![b]).as_deref(),
    )?;
    Ok(checks.into_iter().next().expect("one report"))
}

/// Batched form of [`verify_certificate_against_attack`]: row `i` of `xs`
/// belongs to `reports[i]`. `budgets` overrides the per-row norm caps.
pub fn verify_certificates(
    model: &MlpModel,
    xs: &Tensor,
    reports: &[MarginReport],
    config: &AttackConfig,
    budgets: Option<&[f64]>,
) -> Result<Vec<CertificateCheck>> {
    if xs.rows() != reports.len() || budgets.is_some_and(|b| b.len() != reports.len()) {
        return Err(Error::contract("one input row and budget per report"));
    }
    let active: Vec<usize> = (0..reports.len())
        .filter(|&i| skip_reason(&reports[i]).is_none())
        .collect();
    let caps: Vec<f64> = active
        .iter()
        .map(|&i| match budgets {
            Some(b) => b[i],
            None => {
                let r = reports[i].certified_radius;
                // an infinite radius leaves the attack unconstrained
                if r.is_finite() {
                    r * RADIUS_SLACK
                } else {
                    f64::INFINITY
                }
            }
        })
        .collect();
    let labels: Vec<usize> = active.iter().map(|&i| reports[i].label).collect();
    let mut attacked = if active.is_empty() {
        Vec::new()
    } else {
        cw_l2_attack_batch_capped(model, &xs.select_rows(&active), &labels, config, &caps)?
    }
    .into_iter();

    Ok(reports
        .iter()
        .map(|r| match skip_reason(r) {
            Some(reason) => CertificateCheck::Skipped(reason),
            None => classify(r, attacked.next().expect("one result per active row")),
        })
        .collect())
}
