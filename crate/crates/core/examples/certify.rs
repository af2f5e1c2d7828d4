//! Trains a small LC-LMT model on synthetic blobs, certifies it and tries
//! to break each certificate with CW-L2 inside the certified radius.

use lmt::attack::AttackConfig;
use lmt::certify::{certify_dataset, verify_certificates, CertificateCheck};
use lmt::mnist::{Dataset, Split};
use lmt::training::{train, Strategy, TrainConfig};
use lmt::{MlpModel, Tensor};
use rand::{Rng, SeedableRng};

fn blobs(n: usize) -> lmt::Result<Dataset> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let centers = [[0.2, 0.2], [0.8, 0.3], [0.5, 0.85]];
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let k = i % 3;
        for c in centers[k] {
            images.push((c + rng.random_range(-0.12..0.12f64)).clamp(0.0, 1.0));
        }
        labels.push(k);
    }
    Dataset::new(Tensor::matrix(n, 2, images)?, labels, Split::Train)
}

fn main() -> lmt::Result<()> {
    let data = blobs(600)?;
    let config = TrainConfig {
        epochs: 30,
        batch_size: 32,
        ..TrainConfig::new(Strategy::LcLmt, 0.1)
    };
    let (model, history) = train(MlpModel::new(&[2, 32, 32, 3], 0)?, &data, &config, &mut Vec::new())?;
    let last = history.last().expect("trained");
    println!(
        "after {} epochs: margin {:.3}, beta {:.3}, accuracy {:.3}",
        last.epoch, last.mean_margin, last.required_beta, last.train_accuracy
    );

    for eps in [0.0, 0.05, 0.1, 0.2] {
        let s = certify_dataset(&model, &data, eps)?.summary;
        println!(
            "eps {eps:.2}: certified accuracy {:.3} (clean {:.3}, L {:.3})",
            s.certified_accuracy, s.clean_accuracy, s.lipschitz_bound
        );
    }

    let cert = certify_dataset(&model, &data, 0.1)?;
    let checks = verify_certificates(&model, &data.images, &cert.reports, &AttackConfig::default(), None)?;
    let count = |f: fn(&CertificateCheck) -> bool| checks.iter().filter(|c| f(c)).count();
    println!(
        "attacks inside the radius: {} held, {} violated, {} skipped",
        count(|c| matches!(c, CertificateCheck::Pass)),
        count(|c| matches!(c, CertificateCheck::Violation { .. })),
        count(|c| matches!(c, CertificateCheck::Skipped(_)))
    );
    Ok(())
}
