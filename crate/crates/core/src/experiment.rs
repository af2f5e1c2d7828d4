//! The `train`, `certify`, `attack` and `reproduce` commands.
//!
//! Each command writes its artifacts plus a `manifest.json` into one output
//! directory. The manifest is written with status `running` before any work
//! starts and rewritten as `complete` at the end, so an interrupted run is
//! visible. CSV contents depend only on the flags, the input files and the
//! seed.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::attack::{accuracy_vs_perturbation_curve, AttackConfig, CurvePoint, RobustnessCurve};
use crate::certify::{certify_dataset, CertificationSummary};
use crate::error::{Error, Result};
use crate::mnist::{resolve_data_dir, Dataset, Split};
use crate::model::{build_mnist_mlp, load_weights_expecting, save_weights, MlpModel, MNIST_DIMS};
use crate::report::{
    write_accuracy_figure, write_attack_csv, write_certification_csv, write_curve_csv,
    write_loss_figure, write_margin_figure, MetricsCsv,
};
use crate::training::{first_satisfying_epoch, train, EpochMetrics, Strategy, TrainConfig};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.lmtw";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CERTIFICATION_FILE: &str = "certification.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const ATTACK_FILE: &str = "attack.csv";
pub const MARGIN_FIGURE: &str = "fig1a_margin.csv";
pub const LOSS_FIGURE: &str = "fig1b_loss.csv";
pub const ACCURACY_FIGURE: &str = "fig2a_accuracy.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub status: RunStatus,
    pub seed: u64,
    pub train: Option<TrainConfig>,
    pub attack: Option<AttackConfig>,
    pub data_dir: PathBuf,
    /// Model read by `certify`/`attack`.
    pub model: Option<PathBuf>,
    pub split: Option<Split>,
    pub epsilon: Option<f64>,
    pub example_limit: Option<usize>,
    pub norm_grid: Option<Vec<f64>>,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

impl RunManifest {
    fn new(command: &str, data_dir: &Path) -> Self {
        Self {
            command: command.into(),
            toolkit_version: TOOLKIT_VERSION.into(),
            status: RunStatus::Running,
            seed: 0,
            train: None,
            attack: None,
            data_dir: data_dir.to_path_buf(),
            model: None,
            split: None,
            epsilon: None,
            example_limit: None,
            norm_grid: None,
            artifacts: Vec::new(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            reason: e.to_string(),
        })
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("serializing manifest: {e}")))?;
        std::fs::write(&path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn finish(mut self, dir: &Path) -> Result<Self> {
        self.status = RunStatus::Complete;
        self.finished_unix = Some(now());
        self.save(dir)?;
        Ok(self)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

/// Parses `start:stop:step` into an ascending grid that includes `stop`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::contract(format!("invalid grid {text:?}: {why}"));
    let parts: Vec<f64> = text
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad("expected start:stop:step")))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad("expected start:stop:step"));
    };
    if !(start.is_finite() && stop.is_finite() && step.is_finite()) || start < 0.0 {
        return Err(bad("bounds must be finite and non-negative"));
    }
    if !(step > 0.0) || stop < start {
        return Err(bad("grid is empty"));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

fn load_split(data_dir: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let data = Dataset::load(data_dir, split)?;
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    /// Train on the first `n` training examples only.
    pub train_limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochMetrics>,
    pub manifest: RunManifest,
}

/// Trains into `out/strategy-prefix` and returns the relative artifact paths.
fn train_into(
    config: &TrainConfig,
    data: &Dataset,
    out: &Path,
    prefix: &str,
) -> Result<(MlpModel, Vec<EpochMetrics>, Vec<String>)> {
    let metrics = format!("{prefix}{METRICS_FILE}");
    let model_file = format!("{prefix}{MODEL_FILE}");
    let mut sink = MetricsCsv::create(&out.join(&metrics))?;
    let (model, history) = train(build_mnist_mlp(config.seed), data, config, &mut sink)?;
    save_weights(&model, &out.join(&model_file))?;
    Ok((model, history, vec![metrics, model_file]))
}

pub fn run_train(args: &TrainArgs) -> Result<TrainOutcome> {
    args.config.validate()?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref());
    let data = load_split(&data_dir, Split::Train, args.train_limit)?;
    prepare_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", &data_dir);
    manifest.seed = args.config.seed;
    manifest.train = Some(args.config.clone());
    manifest.example_limit = args.train_limit;
    manifest.artifacts = vec![METRICS_FILE.into(), MODEL_FILE.into()];
    manifest.save(&args.out)?;

    let (model, history, _) = train_into(&args.config, &data, &args.out, "")?;
    let manifest = manifest.finish(&args.out)?;
    Ok(TrainOutcome {
        model,
        history,
        manifest,
    })
}

#[derive(Clone, Debug)]
pub struct CertifyArgs {
    pub model: PathBuf,
    pub epsilon: f64,
    pub split: Split,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
    pub limit: Option<usize>,
}

pub fn run_certify(args: &CertifyArgs) -> Result<CertificationSummary> {
    if !(args.epsilon >= 0.0) {
        return Err(Error::contract(format!("epsilon must be >= 0, got {}", args.epsilon)));
    }
    let model = load_weights_expecting(&args.model, &MNIST_DIMS)?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref());
    let data = load_split(&data_dir, args.split, args.limit)?;
    prepare_dir(&args.out)?;
    let mut manifest = RunManifest::new("certify", &data_dir);
    manifest.model = Some(args.model.clone());
    manifest.split = Some(args.split);
    manifest.epsilon = Some(args.epsilon);
    manifest.example_limit = args.limit;
    manifest.artifacts = vec![CERTIFICATION_FILE.into()];
    manifest.save(&args.out)?;

    let cert = certify_dataset(&model, &data, args.epsilon)?;
    write_certification_csv(&args.out.join(CERTIFICATION_FILE), &cert)?;
    manifest.finish(&args.out)?;
    Ok(cert.summary)
}

#[derive(Clone, Debug)]
pub struct AttackArgs {
    pub model: PathBuf,
    pub config: AttackConfig,
    pub grid: Vec<f64>,
    /// Attack the first `n` test examples only.
    pub limit: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn run_attack(args: &AttackArgs) -> Result<RobustnessCurve> {
    args.config.validate()?;
    let model = load_weights_expecting(&args.model, &MNIST_DIMS)?;
    let data_dir = resolve_data_dir(args.data_dir.as_deref());
    let data = load_split(&data_dir, Split::Test, args.limit)?;
    prepare_dir(&args.out)?;
    let mut manifest = RunManifest::new("attack", &data_dir);
    manifest.model = Some(args.model.clone());
    manifest.split = Some(Split::Test);
    manifest.attack = Some(args.config.clone());
    manifest.example_limit = args.limit;
    manifest.norm_grid = Some(args.grid.clone());
    manifest.artifacts = vec![CURVE_FILE.into(), ATTACK_FILE.into()];
    manifest.save(&args.out)?;

    let curve = accuracy_vs_perturbation_curve(&model, &data, &args.config, &args.grid)?;
    write_curve_csv(&args.out.join(CURVE_FILE), &curve.points)?;
    write_attack_csv(&args.out.join(ATTACK_FILE), &curve.results)?;
    manifest.finish(&args.out)?;
    Ok(curve)
}

#[derive(Clone, Debug)]
pub struct ReproduceArgs {
    pub epochs: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub attack: AttackConfig,
    pub grid: Vec<f64>,
    /// Test examples attacked per model.
    pub attack_limit: usize,
    pub train_limit: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub out: PathBuf,
}

impl ReproduceArgs {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self {
            epochs: 100,
            epsilon: 1.0,
            seed: 0,
            attack: AttackConfig::default(),
            grid: parse_grid("0:3:0.1").expect("default grid"),
            attack_limit: 500,
            train_limit: None,
            data_dir: None,
            out: out.into(),
        }
    }

    pub fn train_config(&self, strategy: Strategy) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            seed: self.seed,
            ..TrainConfig::new(strategy, self.epsilon)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub first_satisfying_epoch: Option<usize>,
    pub final_mean_loss: f64,
    pub final_mean_margin: f64,
    pub final_required_beta: f64,
    pub final_train_accuracy: f64,
    pub test_clean_accuracy: f64,
    pub test_certified_accuracy: f64,
    pub test_lipschitz_bound: f64,
    /// Attacked-subset accuracy at the largest grid norm `≤ epsilon`.
    pub attack_accuracy_at_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproduceSummary {
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub strategies: Vec<StrategySummary>,
    /// LMT's first satisfying epoch minus LC-LMT's, when both exist.
    pub epoch_gap: Option<i64>,
}

impl ReproduceSummary {
    pub fn get(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

#[derive(Clone, Debug)]
pub struct ReproduceOutcome {
    pub summary: ReproduceSummary,
    pub runs: Vec<(Strategy, MlpModel, Vec<EpochMetrics>)>,
    pub curves: Vec<(Strategy, RobustnessCurve)>,
    pub manifest: RunManifest,
}

fn accuracy_at(points: &[CurvePoint], norm: f64) -> f64 {
    points
        .iter()
        .rev()
        .find(|p| p.norm <= norm + 1e-12)
        .map_or(f64::NAN, |p| p.accuracy)
}

/// Trains baseline, LMT and LC-LMT with a shared seed, certifies and attacks
/// each model, and writes the figure CSVs plus `summary.json`.
pub fn run_reproduce(args: &ReproduceArgs) -> Result<ReproduceOutcome> {
    args.attack.validate()?;
    for s in Strategy::ALL {
        args.train_config(s).validate()?;
    }
    if args.grid.is_empty() {
        return Err(Error::contract("empty norm grid"));
    }
    let data_dir = resolve_data_dir(args.data_dir.as_deref());
    let train_data = load_split(&data_dir, Split::Train, args.train_limit)?;
    let test_data = load_split(&data_dir, Split::Test, None)?;
    let attacked = test_data.take(args.attack_limit);
    prepare_dir(&args.out)?;

    let mut manifest = RunManifest::new("reproduce", &data_dir);
    manifest.seed = args.seed;
    manifest.train = Some(args.train_config(Strategy::LcLmt));
    manifest.attack = Some(args.attack.clone());
    manifest.epsilon = Some(args.epsilon);
    manifest.example_limit = Some(args.attack_limit);
    manifest.norm_grid = Some(args.grid.clone());
    for s in Strategy::ALL {
        manifest.artifacts.push(format!("{s}_{METRICS_FILE}"));
        manifest.artifacts.push(format!("{s}_{MODEL_FILE}"));
        manifest.artifacts.push(format!("{s}_{CERTIFICATION_FILE}"));
        manifest.artifacts.push(format!("{s}_{ATTACK_FILE}"));
    }
    manifest.artifacts.extend(
        [MARGIN_FIGURE, LOSS_FIGURE, ACCURACY_FIGURE, SUMMARY_FILE].map(String::from),
    );
    manifest.save(&args.out)?;

    let mut runs = Vec::new();
    let mut curves = Vec::new();
    let mut strategies = Vec::new();
    for strategy in Strategy::ALL {
        let config = args.train_config(strategy);
        let (model, history, _) =
            train_into(&config, &train_data, &args.out, &format!("{strategy}_"))?;
        let cert = certify_dataset(&model, &test_data, args.epsilon)?;
        write_certification_csv(&args.out.join(format!("{strategy}_{CERTIFICATION_FILE}")), &cert)?;
        let curve = accuracy_vs_perturbation_curve(&model, &attacked, &args.attack, &args.grid)?;
        write_attack_csv(&args.out.join(format!("{strategy}_{ATTACK_FILE}")), &curve.results)?;

        let last = history.last().expect("at least one epoch");
        strategies.push(StrategySummary {
            strategy,
            first_satisfying_epoch: first_satisfying_epoch(&history),
            final_mean_loss: last.mean_loss,
            final_mean_margin: last.mean_margin,
            final_required_beta: last.required_beta,
            final_train_accuracy: last.train_accuracy,
            test_clean_accuracy: cert.summary.clean_accuracy,
            test_certified_accuracy: cert.summary.certified_accuracy,
            test_lipschitz_bound: cert.summary.lipschitz_bound,
            attack_accuracy_at_epsilon: accuracy_at(&curve.points, args.epsilon),
        });
        runs.push((strategy, model, history));
        curves.push((strategy, curve));
    }

    let histories: Vec<_> = runs.iter().map(|(s, _, h)| (*s, h.clone())).collect();
    write_margin_figure(&args.out.join(MARGIN_FIGURE), &histories)?;
    write_loss_figure(&args.out.join(LOSS_FIGURE), &histories)?;
    let points: Vec<_> = curves.iter().map(|(s, c)| (*s, c.points.clone())).collect();
    write_accuracy_figure(&args.out.join(ACCURACY_FIGURE), &points)?;

    let epoch_of = |s: Strategy| {
        strategies
            .iter()
            .find(|x: &&StrategySummary| x.strategy == s)
            .and_then(|x| x.first_satisfying_epoch)
    };
    let epoch_gap = match (epoch_of(Strategy::Lmt), epoch_of(Strategy::LcLmt)) {
        (Some(a), Some(b)) => Some(a as i64 - b as i64),
        _ => None,
    };
    let summary = ReproduceSummary {
        epsilon: args.epsilon,
        epochs: args.epochs,
        seed: args.seed,
        strategies,
        epoch_gap,
    };
    let path = args.out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::contract(format!("serializing summary: {e}")))?;
    std::fs::write(&path, text + "\n")
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;

    let manifest = manifest.finish(&args.out)?;
    Ok(ReproduceOutcome {
        summary,
        runs,
        curves,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_includes_both_ends() {
        let g = parse_grid("0:3:0.1").unwrap();
        assert_eq!(g.len(), 31);
        assert_eq!(g[0], 0.0);
        assert!((g[30] - 3.0).abs() < 1e-12);
        assert_eq!(parse_grid("1:1:0.5").unwrap(), vec![1.0]);
        assert_eq!(parse_grid("0:1:0.3").unwrap().len(), 4);
    }

    #[test]
    fn bad_grids_are_rejected() {
        for text in ["", "0:1", "0:1:0", "1:0:0.1", "a:b:c", "0:1:-1", "-1:1:0.5"] {
            assert!(parse_grid(text).is_err(), "{text}");
        }
    }

    #[test]
    fn accuracy_lookup_picks_largest_norm_within_bound() {
        let pts: Vec<CurvePoint> = [(0.0, 1.0), (0.5, 0.8), (1.0, 0.6), (1.5, 0.1)]
            .iter()
            .map(|&(norm, accuracy)| CurvePoint { norm, accuracy })
            .collect();
        assert_eq!(accuracy_at(&pts, 1.0), 0.6);
        assert_eq!(accuracy_at(&pts, 0.7), 0.8);
    }
}
