//! Trains LMT and LC-LMT side by side on MNIST and prints per-epoch margins.
//!
//! cargo run --release --example train_mnist -- [epochs] [strategies] [epsilon] [train-subset]

use std::path::Path;

use lmt::mnist::{resolve_data_dir, Dataset, Split};
use lmt::model::build_mnist_mlp;
use lmt::training::{train, EpochMetrics, Strategy, TrainConfig};

fn main() -> lmt::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let strategies: Vec<Strategy> = args
        .next()
        .unwrap_or_else(|| "lmt,lclmt".into())
        .split(',')
        .map(str::parse)
        .collect::<lmt::Result<_>>()?;
    let epsilon: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let subset: Option<usize> = args.next().and_then(|s| s.parse().ok());

    let dir = resolve_data_dir(None::<&Path>);
    let mut data = Dataset::load(&dir, Split::Train)?;
    if let Some(n) = subset {
        data = data.take(n);
    }

    for strategy in strategies {
        let config = TrainConfig { epochs, ..TrainConfig::new(strategy, epsilon) };
        let mut print = |m: &EpochMetrics| {
            println!(
                "{:>6} epoch {:>3}  loss {:.4}  margin {:.3}  beta {:.3}  acc {:.4}{}",
                m.strategy,
                m.epoch,
                m.mean_loss,
                m.mean_margin,
                m.required_beta,
                m.train_accuracy,
                if m.satisfies_bound() { "  *" } else { "" }
            );
            Ok(())
        };
        train(build_mnist_mlp(config.seed), &data, &config, &mut print)?;
    }
    Ok(())
}
