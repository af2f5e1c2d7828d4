//! Lipschitz margin training.
//!
//! Each step computes logits, estimates the Lipschitz bound `L` with one
//! warm-started power iteration per layer, and adds `β = √2·L·ε` to some of
//! the non-true logits before the softmax cross-entropy:
//!
//! * [`Strategy::Lmt`] inflates every class except the true one;
//! * [`Strategy::LcLmt`] inflates only the strongest rival, chosen on the
//!   un-inflated logits (lowest index on ties);
//! * [`Strategy::Baseline`] inflates nothing.
//!
//! `β` enters as a constant offset, so gradients flow through the logits
//! unchanged. Parameters are updated with SGD plus momentum.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::certify::{predicted_class, prediction_margin, strongest_rival, EVAL_CHUNK};
use crate::error::{Error, Result};
use crate::lipschitz::{
    certified_lipschitz, required_beta, spectral_norm_gradient, training_lipschitz,
};
use crate::mnist::Dataset;
use crate::model::{MlpModel, ParamVars};
use crate::optim::SgdMomentum;
use crate::tensor::{check_labels, softmax_ce_row, Gradients, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Baseline,
    Lmt,
    #[serde(rename = "lclmt")]
    LcLmt,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Baseline, Strategy::Lmt, Strategy::LcLmt];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Baseline => "baseline",
            Strategy::Lmt => "lmt",
            Strategy::LcLmt => "lclmt",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Strategy::Baseline),
            "lmt" => Ok(Strategy::Lmt),
            "lclmt" | "lc-lmt" => Ok(Strategy::LcLmt),
            _ => Err(Error::contract(format!(
                "unknown strategy {s:?} (baseline|lmt|lclmt)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Target ℓ2 radius in input space. Only reported for the baseline.
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Backpropagate through `β` as a function of the weights.
    #[serde(default = "default_true")]
    pub beta_gradient: bool,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(strategy: Strategy, epsilon: f64) -> Self {
        Self {
            strategy,
            epsilon,
            epochs: 100,
            batch_size: 128,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            beta_gradient: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract(format!("invalid training config {self:?}")));
        }
        SgdMomentum::new(self.learning_rate, self.momentum).map(|_| ())
    }

    /// ε used for logit inflation; the baseline never inflates.
    pub fn training_epsilon(&self) -> f64 {
        match self.strategy {
            Strategy::Baseline => 0.0,
            _ => self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub strategy: Strategy,
    pub epsilon: f64,
    pub mean_loss: f64,
    pub mean_margin: f64,
    pub required_beta: f64,
    pub train_accuracy: f64,
    pub lipschitz_bound: f64,
}

impl EpochMetrics {
    pub fn satisfies_bound(&self) -> bool {
        self.mean_margin >= self.required_beta
    }
}

/// Receives one [`EpochMetrics`] per finished epoch.
pub trait MetricsSink {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()>;
}

impl MetricsSink for Vec<EpochMetrics> {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()> {
        self.push(metrics.clone());
        Ok(())
    }
}

impl<F: FnMut(&EpochMetrics) -> Result<()>> MetricsSink for F {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()> {
        self(metrics)
    }
}

fn check_inflation(logits: &Tensor, labels: &[usize], beta: f64) -> Result<(usize, usize)> {
    let (m, c) = logits.dims2("inflate")?;
    if labels.len() != m {
        return Err(Error::Shape {
            op: "inflate",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if !(beta >= 0.0) || c < 2 {
        return Err(Error::contract(format!(
            "inflation needs beta >= 0 and at least two classes (beta {beta}, {c} classes)"
        )));
    }
    check_labels(labels, c)?;
    Ok((m, c))
}

/// The constant added to `logits` by `strategy`.
pub fn inflation_offsets(
    strategy: Strategy,
    logits: &Tensor,
    labels: &[usize],
    beta: f64,
) -> Result<Tensor> {
    let (m, c) = check_inflation(logits, labels, beta)?;
    let mut off = vec![0.0; m * c];
    for (i, &t) in labels.iter().enumerate() {
        let row = &mut off[i * c..(i + 1) * c];
        match strategy {
            Strategy::Baseline => {}
            Strategy::Lmt => {
                for (j, o) in row.iter_mut().enumerate() {
                    if j != t {
                        *o = beta;
                    }
                }
            }
            Strategy::LcLmt => row[strongest_rival(logits.row(i), t)] = beta,
        }
    }
    Tensor::matrix(m, c, off)
}

fn inflate(strategy: Strategy, logits: &Tensor, labels: &[usize], beta: f64) -> Result<Tensor> {
    let off = inflation_offsets(strategy, logits, labels, beta)?;
    let data = logits.data().iter().zip(off.data()).map(|(z, o)| z + o).collect();
    Tensor::new(logits.shape().to_vec(), data)
}

/// Adds `beta` to every logit except each row's true class.
pub fn inflate_lmt(logits: &Tensor, labels: &[usize], beta: f64) -> Result<Tensor> {
    inflate(Strategy::Lmt, logits, labels, beta)
}

/// Adds `beta` to each row's strongest non-true logit only.
pub fn inflate_lclmt(logits: &Tensor, labels: &[usize], beta: f64) -> Result<Tensor> {
    inflate(Strategy::LcLmt, logits, labels, beta)
}

/// Mean softmax cross-entropy of the inflated logits of `x`, without
/// touching the model.
pub fn inflated_loss(
    model: &MlpModel,
    x: &Tensor,
    labels: &[usize],
    strategy: Strategy,
    beta: f64,
) -> Result<f64> {
    let z = inflate(strategy, &model.forward(x)?, labels, beta)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &t)| softmax_ce_row(z.row(i), t).0)
        .sum();
    Ok(total / labels.len() as f64)
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lipschitz: f64,
    pub beta: f64,
}

/// Owns the model and optimiser state across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: MlpModel,
    config: TrainConfig,
    optimizer: SgdMomentum,
    epoch: usize,
    batch: usize,
}

impl Trainer {
    pub fn new(model: MlpModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = SgdMomentum::new(config.learning_rate, config.momentum)?;
        Ok(Self {
            model,
            config,
            optimizer,
            epoch: 0,
            batch: 0,
        })
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn into_model(self) -> MlpModel {
        self.model
    }

    /// Lipschitz estimate, forward, inflation, loss, backward, update.
    pub fn train_step(&mut self, x: &Tensor, labels: &[usize]) -> Result<StepStats> {
        let (epoch, batch) = (self.epoch, self.batch);
        let diverged = |lipschitz: f64, beta: f64| {
            move |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch,
                    batch,
                    lipschitz,
                    beta,
                },
                other => other,
            }
        };
        // The power iteration reads the weights only, so it can run first.
        let lipschitz = training_lipschitz(&mut self.model)
            .map_err(diverged(f64::NAN, f64::NAN))?
            .global_bound;
        let beta = required_beta(lipschitz, self.config.training_epsilon())
            .map_err(diverged(lipschitz, f64::NAN))?;
        let loss = self
            .descend(x, labels, beta)
            .map_err(diverged(lipschitz, beta))?;
        self.batch += 1;
        Ok(StepStats {
            loss,
            lipschitz,
            beta,
        })
    }

    fn descend(&mut self, x: &Tensor, labels: &[usize], beta: f64) -> Result<f64> {
        let step = inflated_loss_gradients(&self.model, x, labels, &self.config, beta)?;
        self.optimizer.step(&mut self.model, &step.params, &step.grads)?;
        Ok(step.loss)
    }

    /// One shuffled pass over `data`; returns the example-weighted mean loss.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<f64> {
        self.batch = 0;
        let mut total = 0.0;
        for batch in data.batches(self.config.batch_size, self.config.seed, self.epoch as u64)? {
            let stats = self.train_step(&batch.images, &batch.labels)?;
            total += stats.loss * batch.labels.len() as f64;
        }
        self.epoch += 1;
        Ok(total / data.len().max(1) as f64)
    }

    /// Epoch-end evaluation against the converged Lipschitz bound.
    pub fn evaluate(&self, data: &Dataset, mean_loss: f64) -> Result<EpochMetrics> {
        let lipschitz_bound = certified_lipschitz(&self.model)?.global_bound;
        let (mean_margin, train_accuracy) = margin_statistics(&self.model, data)?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            strategy: self.config.strategy,
            epsilon: self.config.epsilon,
            mean_loss,
            mean_margin,
            required_beta: required_beta(lipschitz_bound, self.config.epsilon)?,
            train_accuracy,
            lipschitz_bound,
        })
    }
}

/// Loss and parameter gradients of one training step, before the update.
pub struct StepGradients {
    pub loss: f64,
    pub params: ParamVars,
    pub grads: Gradients,
}

/// Inflated cross-entropy of `x` under `config.strategy` and its gradients.
///
/// `beta` must be `√2·ε·∏ ‖W_k v_k‖₂` for the model's stored power vectors
/// `v_k`. With `config.beta_gradient` the weight gradients include the path
/// through `β`, holding each `v_k` fixed.
pub fn inflated_loss_gradients(
    model: &MlpModel,
    x: &Tensor,
    labels: &[usize],
    config: &TrainConfig,
    beta: f64,
) -> Result<StepGradients> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let logits = model.forward_on(&mut tape, &params, xv)?;
    let offsets = inflation_offsets(config.strategy, tape.value(logits), labels, beta)?;
    let inflated = tape.shift(logits, &offsets)?;
    let loss_var = tape.softmax_cross_entropy(inflated, labels)?;
    let loss = tape.value(loss_var).item()?;
    let inflated_logits = tape.value(inflated).clone();
    let mut grads = tape.backward(loss_var)?;
    if config.beta_gradient && beta > 0.0 {
        let dbeta = inflated_mass(&inflated_logits, &offsets, labels);
        let scale = std::f64::consts::SQRT_2 * config.training_epsilon() * dbeta;
        add_beta_gradient(model, &mut grads, &params, scale)?;
    }
    Ok(StepGradients {
        loss,
        params,
        grads,
    })
}

/// Adds `scale · ∂(∏ σ_k)/∂W_k` to each weight gradient, `σ_k = ‖W_k v_k‖₂`.
fn add_beta_gradient(
    model: &MlpModel,
    grads: &mut Gradients,
    params: &ParamVars,
    scale: f64,
) -> Result<()> {
    let layers = model.layers();
    let vectors = model.power_vectors();
    let mut norms = Vec::with_capacity(layers.len());
    let mut dsigmas = Vec::with_capacity(layers.len());
    for (layer, v) in layers.iter().zip(vectors) {
        let d = spectral_norm_gradient(&layer.weight, v)?;
        norms.push(d.as_ref().map_or(0.0, |(sigma, _)| *sigma));
        dsigmas.push(d);
    }
    for (k, d) in dsigmas.into_iter().enumerate() {
        let Some((_, dsigma)) = d else { continue };
        let others: f64 = norms
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != k)
            .map(|(_, s)| s)
            .product();
        let g = grads
            .get_mut(params.weights[k])
            .ok_or_else(|| Error::contract("missing gradient for a model parameter"))?;
        for (gi, di) in g.iter_mut().zip(dsigma.data()) {
            *gi += scale * others * di;
        }
    }
    Ok(())
}

/// `∂loss/∂β`: batch mean of the softmax mass on inflated classes.
fn inflated_mass(inflated: &Tensor, offsets: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in labels.iter().enumerate() {
        let (_, p) = softmax_ce_row(inflated.row(i), t);
        total += p
            .iter()
            .zip(offsets.row(i))
            .filter(|&(_, &o)| o != 0.0)
            .map(|(pi, _)| pi)
            .sum::<f64>();
    }
    total / labels.len().max(1) as f64
}

/// Mean raw-logit margin and accuracy over `data`.
pub fn margin_statistics(model: &MlpModel, data: &Dataset) -> Result<(f64, f64)> {
    let logits = model.forward_chunked(&data.images, EVAL_CHUNK)?;
    let mut margin_sum = 0.0;
    let mut correct = 0usize;
    for (i, &t) in data.labels.iter().enumerate() {
        let row = logits.row(i);
        margin_sum += prediction_margin(row, t)?;
        if predicted_class(row, t) == t {
            correct += 1;
        }
    }
    let n = data.len().max(1) as f64;
    Ok((margin_sum / n, correct as f64 / n))
}

/// Trains `model` for `config.epochs` epochs, streaming metrics to `sink`.
pub fn train(
    model: MlpModel,
    data: &Dataset,
    config: &TrainConfig,
    sink: &mut dyn MetricsSink,
) -> Result<(MlpModel, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let loss = trainer.run_epoch(data)?;
        let metrics = trainer.evaluate(data, loss)?;
        sink.record(&metrics)?;
        history.push(metrics);
    }
    Ok((trainer.into_model(), history))
}

/// First epoch (1-based) whose mean margin reaches the required bound.
pub fn first_satisfying_epoch(history: &[EpochMetrics]) -> Option<usize> {
    history.iter().find(|m| m.satisfies_bound()).map(|m| m.epoch)
}
