use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lmt::attack::AttackConfig;
use lmt::experiment::{
    parse_grid, run_attack, run_certify, run_reproduce, run_train, AttackArgs, CertifyArgs,
    ReproduceArgs, TrainArgs,
};
use lmt::error::ErrorClass;
use lmt::mnist::Split;
use lmt::training::{Strategy, TrainConfig};

/// Lipschitz margin training, certification and CW-L2 evaluation on MNIST.
#[derive(Parser)]
#[command(name = "lmt", version, args_override_self = true)]
struct Cli {
    /// Directory holding the MNIST IDX files (overrides $LMT_DATA_DIR).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.lmtw, metrics.csv and manifest.json.
    Train(TrainFlags),
    /// Certify a model's predictions at radius epsilon.
    Certify(CertifyFlags),
    /// Run CW-L2 on test examples and write the accuracy-vs-norm curve.
    Attack(AttackFlags),
    /// Train all three strategies and write the figure CSVs.
    Reproduce(ReproduceFlags),
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value = "lclmt")]
    strategy: Strategy,
    #[arg(long, allow_negative_numbers = true)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Treat β as a constant offset instead of differentiating through L.
    #[arg(long)]
    constant_beta: bool,
    /// Train on the first N training examples only.
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Args)]
struct CertifyFlags {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    epsilon: f64,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "runs/certify")]
    out: PathBuf,
}

#[derive(Args)]
struct AttackFlags {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    /// Norm grid as start:stop:step, both ends included.
    #[arg(long, default_value = "0:3:0.1")]
    grid: String,
    /// Attack the first N test examples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value = "runs/attack")]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceFlags {
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value = "0:3:0.1")]
    grid: String,
    /// Test examples attacked per model.
    #[arg(long, default_value_t = 500)]
    attack_limit: usize,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long, default_value = "runs/reproduce")]
    out: PathBuf,
}

fn run(cli: Cli) -> lmt::Result<()> {
    let data_dir = cli.data_dir;
    match cli.command {
        Command::Train(f) => {
            if f.strategy == Strategy::Baseline && f.epsilon.is_some() {
                eprintln!("warning: --epsilon is ignored by the baseline strategy");
            }
            let config = TrainConfig {
                epochs: f.epochs,
                batch_size: f.batch_size,
                learning_rate: f.lr,
                momentum: f.momentum,
                seed: f.seed,
                beta_gradient: !f.constant_beta,
                ..TrainConfig::new(f.strategy, f.epsilon.unwrap_or(1.0))
            };
            let out = run_train(&TrainArgs {
                config,
                data_dir,
                out: f.out.clone(),
                train_limit: f.train_limit,
            })?;
            if let Some(m) = out.history.last() {
                println!(
                    "epoch {} loss {:.6} margin {:.6} beta {:.6} accuracy {:.4}",
                    m.epoch, m.mean_loss, m.mean_margin, m.required_beta, m.train_accuracy
                );
            }
            println!("wrote {}", f.out.display());
        }
        Command::Certify(f) => {
            let s = run_certify(&CertifyArgs {
                model: f.model,
                epsilon: f.epsilon,
                split: f.split,
                data_dir,
                out: f.out.clone(),
                limit: f.limit,
            })?;
            println!(
                "examples {} lipschitz {:.6} beta {:.6} clean {:.4} certified {:.4}",
                s.examples, s.lipschitz_bound, s.required_beta, s.clean_accuracy, s.certified_accuracy
            );
            println!("wrote {}", f.out.display());
        }
        Command::Attack(f) => {
            let curve = run_attack(&AttackArgs {
                model: f.model,
                config: AttackConfig {
                    iterations: f.iterations,
                    ..AttackConfig::default()
                },
                grid: parse_grid(&f.grid)?,
                limit: f.limit,
                data_dir,
                out: f.out.clone(),
            })?;
            for p in &curve.points {
                println!("norm {:.3} accuracy {:.4}", p.norm, p.accuracy);
            }
            println!("wrote {}", f.out.display());
        }
        Command::Reproduce(f) => {
            let args = ReproduceArgs {
                epochs: f.epochs,
                epsilon: f.epsilon,
                seed: f.seed,
                attack: AttackConfig {
                    iterations: f.iterations,
                    ..AttackConfig::default()
                },
                grid: parse_grid(&f.grid)?,
                attack_limit: f.attack_limit,
                train_limit: f.train_limit,
                data_dir,
                out: f.out.clone(),
            };
            let out = run_reproduce(&args)?;
            for s in &out.summary.strategies {
                println!(
                    "{:>8}: first satisfying epoch {:?}, test accuracy {:.4}, attacked accuracy at {} {:.4}",
                    s.strategy.as_str(),
                    s.first_satisfying_epoch,
                    s.test_clean_accuracy,
                    f.epsilon,
                    s.attack_accuracy_at_epsilon
                );
            }
            println!("epoch gap (lmt - lclmt): {:?}", out.summary.epoch_gap);
            println!("wrote {}", f.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(ErrorClass::Contract.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
