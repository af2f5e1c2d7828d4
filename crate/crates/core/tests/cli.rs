mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::write_synthetic_mnist;
use lmt::experiment::{RunManifest, RunStatus};

fn lmt(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmt"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .env_remove("LMT_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn data_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--strategy", "lclmt", "--epsilon", "0.1", "--epochs", "2", "--batch-size", "32",
        "--out",
    ];
    let out_s = out.to_str().unwrap();
    args.push(out_s);
    args.extend(extra);
    lmt(data, &args)
}

#[test]
fn train_writes_metrics_model_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 200, 50, false);
    let out = tmp.path().join("run");
    ok(&train_small(&data, &out, &[]));

    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(
        metrics.lines().next().unwrap(),
        "epoch,strategy,epsilon,mean_loss,mean_margin,required_beta,train_accuracy,lipschitz_bound"
    );
    let rows = data_rows(&metrics);
    assert_eq!(rows.len(), 2);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 8);
        assert_eq!(r[0], (i + 1).to_string());
        assert_eq!(r[1], "lclmt");
        for cell in &r[2..] {
            let v: f64 = cell.parse().unwrap();
            assert!(v.is_finite());
            // 17 significant digits
            assert_eq!(cell.split('e').next().unwrap().trim_start_matches('-').len(), 18);
        }
        let (beta, l, eps): (f64, f64, f64) =
            (r[5].parse().unwrap(), r[7].parse().unwrap(), r[2].parse().unwrap());
        assert!((beta - 2f64.sqrt() * l * eps).abs() <= 1e-12 * beta.max(1.0));
    }

    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.status, RunStatus::Complete);
    assert_eq!(manifest.artifacts, vec!["metrics.csv", "model.lmtw"]);
    assert_eq!(manifest.train.as_ref().unwrap().epochs, 2);
    assert!(manifest.finished_unix.unwrap() >= manifest.started_unix);
    assert!(out.join("model.lmtw").is_file());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 200, 50, true);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&train_small(&data, &a, &[]));
    ok(&train_small(&data, &b, &[]));
    for f in ["metrics.csv", "model.lmtw"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    // re-running from the manifest's config reproduces the weights
    let m = RunManifest::load(&a.join("manifest.json")).unwrap();
    let cfg = m.train.unwrap();
    let c = tmp.path().join("c");
    let eps = cfg.epsilon.to_string();
    let epochs = cfg.epochs.to_string();
    let bs = cfg.batch_size.to_string();
    let seed = cfg.seed.to_string();
    ok(&lmt(
        &m.data_dir,
        &[
            "train", "--strategy", cfg.strategy.as_str(), "--epsilon", &eps, "--epochs", &epochs,
            "--batch-size", &bs, "--seed", &seed, "--out", c.to_str().unwrap(),
        ],
    ));
    assert_eq!(std::fs::read(a.join("model.lmtw")).unwrap(), std::fs::read(c.join("model.lmtw")).unwrap());
}

#[test]
fn baseline_with_epsilon_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 64, 20, false);
    let out = tmp.path().join("run");
    let o = lmt(
        &data,
        &["train", "--strategy", "baseline", "--epsilon", "0.5", "--epochs", "1", "--out", out.to_str().unwrap()],
    );
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ignored"));
}

#[test]
fn certify_and_attack_emit_their_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 200, 40, false);
    let run = tmp.path().join("run");
    ok(&train_small(&data, &run, &[]));
    let model = run.join("model.lmtw");

    let mut certified = Vec::new();
    for eps in ["0", "0.2", "0.5", "1.0"] {
        let out = tmp.path().join(format!("cert{eps}"));
        ok(&lmt(
            &data,
            &["certify", "--model", model.to_str().unwrap(), "--epsilon", eps, "--split", "test", "--out", out.to_str().unwrap()],
        ));
        let text = read(&out.join("certification.csv"));
        assert_eq!(text.lines().next().unwrap(), "index,label,predicted,margin,certified_radius,certified");
        let rows = data_rows(&text);
        assert_eq!(rows.len(), 40);
        assert!(rows.iter().all(|r| r.len() == 6));
        let footer = text.lines().last().unwrap();
        assert!(footer.starts_with("# summary "));
        let field = |name: &str| -> f64 {
            footer
                .split_whitespace()
                .find_map(|kv| kv.strip_prefix(&format!("{name}=")))
                .unwrap()
                .parse()
                .unwrap()
        };
        if eps == "0" {
            assert_eq!(field("certified_accuracy"), field("clean_accuracy"));
        }
        certified.push(field("certified_accuracy"));
    }
    assert!(certified.windows(2).all(|w| w[1] <= w[0]), "{certified:?}");

    let out = tmp.path().join("attack");
    ok(&lmt(
        &data,
        &["attack", "--model", model.to_str().unwrap(), "--iterations", "10", "--grid", "0:1:0.25", "--limit", "12", "--out", out.to_str().unwrap()],
    ));
    let curve = read(&out.join("curve.csv"));
    assert_eq!(curve.lines().next().unwrap(), "norm,accuracy");
    let points = data_rows(&curve);
    assert_eq!(points.len(), 5);
    let acc: Vec<f64> = points.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(acc.windows(2).all(|w| w[1] <= w[0]));
    let per = read(&out.join("attack.csv"));
    assert_eq!(per.lines().next().unwrap(), "index,success,perturbation_norm,original_class,adversarial_class");
    assert_eq!(data_rows(&per).len(), 12);
    let manifest = RunManifest::load(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.artifacts, vec!["curve.csv", "attack.csv"]);
}

#[test]
fn reproduce_writes_figure_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 120, 30, false);
    let run = |dir: &Path| {
        ok(&lmt(
            &data,
            &["reproduce", "--epochs", "2", "--epsilon", "0.1", "--iterations", "5", "--grid", "0:2:0.5", "--attack-limit", "10", "--out", dir.to_str().unwrap()],
        ))
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);

    let margin = read(&a.join("fig1a_margin.csv"));
    assert_eq!(
        margin.lines().next().unwrap(),
        "epoch,baseline_margin,baseline_beta,lmt_margin,lmt_beta,lclmt_margin,lclmt_beta"
    );
    assert_eq!(data_rows(&margin).len(), 2);
    let loss = read(&a.join("fig1b_loss.csv"));
    assert_eq!(loss.lines().next().unwrap(), "epoch,baseline_loss,lmt_loss,lclmt_loss");
    assert_eq!(data_rows(&loss).len(), 2);
    let acc = read(&a.join("fig2a_accuracy.csv"));
    assert_eq!(acc.lines().next().unwrap(), "norm,baseline_accuracy,lmt_accuracy,lclmt_accuracy");
    assert_eq!(data_rows(&acc).len(), 5);

    let summary: lmt::experiment::ReproduceSummary =
        serde_json::from_str(&read(&a.join("summary.json"))).unwrap();
    assert_eq!(summary.strategies.len(), 3);

    let manifest = RunManifest::load(&a.join("manifest.json")).unwrap();
    let mut csvs: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    for f in &csvs {
        assert_eq!(manifest.artifacts.iter().filter(|x| *x == f).count(), 1, "{f}");
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_eq!(read(&a.join("summary.json")), read(&b.join("summary.json")));
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = tmp.path().join("o");

    let o = lmt(&empty, &["train", "--epochs", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train-images-idx3-ubyte") && err.contains("t10k-labels-idx1-ubyte"));

    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 20, 10, false);
    let bad_model = tmp.path().join("bad.lmtw");
    lmt::model::save_weights(&lmt::MlpModel::new(&[784, 10], 0).unwrap(), &bad_model).unwrap();
    let o = lmt(&data, &["certify", "--model", bad_model.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    std::fs::write(&bad_model, b"LMTW").unwrap();
    let o = lmt(&data, &["certify", "--model", bad_model.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let good = tmp.path().join("good.lmtw");
    lmt::model::save_weights(&lmt::model::build_mnist_mlp(0), &good).unwrap();
    let o = lmt(&data, &["attack", "--model", good.to_str().unwrap(), "--grid", "1:0:0.1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    let o = lmt(&data, &["certify", "--model", good.to_str().unwrap(), "--epsilon", "-1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn data_dir_can_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_synthetic_mnist(&data, 40, 10, true);
    let out = tmp.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_lmt"))
        .args(["train", "--epochs", "1", "--out", out.to_str().unwrap()])
        .env("LMT_DATA_DIR", &data)
        .output()
        .unwrap();
    ok(&o);
}
