//! CSV artifacts. Every float is written with 17 significant digits so the
//! files round-trip to the exact `f64`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::attack::{AttackResult, CurvePoint};
use crate::certify::Certification;
use crate::error::{Error, Result};
use crate::training::{EpochMetrics, MetricsSink, Strategy};

pub const METRICS_HEADER: &str =
    "epoch,strategy,epsilon,mean_loss,mean_margin,required_beta,train_accuracy,lipschitz_bound";
pub const CERTIFICATION_HEADER: &str = "index,label,predicted,margin,certified_radius,certified";
pub const CURVE_HEADER: &str = "norm,accuracy";
pub const ATTACK_HEADER: &str = "index,success,perturbation_norm,original_class,adversarial_class";
/// Prefix of the footer line in certification reports.
pub const SUMMARY_PREFIX: &str = "# summary";

/// `x` with 17 significant digits; `inf`, `-inf` and `nan` spelled out.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_lines<I>(path: &Path, header: &str, lines: I) -> Result<()>
where
    I: IntoIterator<Item = String>,
{
    let ctx = || format!("writing {}", path.display());
    let mut out = create(path)?;
    writeln!(out, "{header}").map_err(|e| Error::io(ctx(), e))?;
    for line in lines {
        writeln!(out, "{line}").map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.epoch,
        m.strategy,
        fmt_f64(m.epsilon),
        fmt_f64(m.mean_loss),
        fmt_f64(m.mean_margin),
        fmt_f64(m.required_beta),
        fmt_f64(m.train_accuracy),
        fmt_f64(m.lipschitz_bound)
    )
}

pub fn write_metrics_csv(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    write_lines(path, METRICS_HEADER, history.iter().map(metrics_row))
}

/// A [`MetricsSink`] that appends one flushed row per epoch, so partial runs
/// leave a readable file behind.
pub struct MetricsCsv {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        writeln!(out, "{METRICS_HEADER}")
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out,
        })
    }
}

impl MetricsSink for MetricsCsv {
    fn record(&mut self, metrics: &EpochMetrics) -> Result<()> {
        writeln!(self.out, "{}", metrics_row(metrics))
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}

pub fn write_certification_csv(path: &Path, cert: &Certification) -> Result<()> {
    let s = &cert.summary;
    let rows = cert.reports.iter().map(|r| {
        format!(
            "{},{},{},{},{},{}",
            r.example_index,
            r.label,
            r.predicted,
            fmt_f64(r.margin),
            fmt_f64(r.certified_radius),
            r.certified_at_epsilon
        )
    });
    let footer = format!(
        "{SUMMARY_PREFIX} examples={} epsilon={} lipschitz_bound={} required_beta={} \
         clean_accuracy={} certified_accuracy={} mean_margin={}",
        s.examples,
        fmt_f64(s.epsilon),
        fmt_f64(s.lipschitz_bound),
        fmt_f64(s.required_beta),
        fmt_f64(s.clean_accuracy),
        fmt_f64(s.certified_accuracy),
        fmt_f64(s.mean_margin)
    );
    write_lines(path, CERTIFICATION_HEADER, rows.chain(std::iter::once(footer)))
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_lines(
        path,
        CURVE_HEADER,
        points
            .iter()
            .map(|p| format!("{},{}", fmt_f64(p.norm), fmt_f64(p.accuracy))),
    )
}

pub fn write_attack_csv(path: &Path, results: &[AttackResult]) -> Result<()> {
    write_lines(
        path,
        ATTACK_HEADER,
        results.iter().enumerate().map(|(i, r)| {
            format!(
                "{},{},{},{},{}",
                i,
                r.success,
                fmt_f64(r.perturbation_norm),
                r.original_class,
                r.adversarial_class
            )
        }),
    )
}

/// Mean margin and required β per epoch, one column pair per strategy.
pub fn write_margin_figure(path: &Path, runs: &[(Strategy, Vec<EpochMetrics>)]) -> Result<()> {
    let header = std::iter::once("epoch".to_string())
        .chain(runs.iter().flat_map(|(s, _)| [format!("{s}_margin"), format!("{s}_beta")]))
        .collect::<Vec<_>>()
        .join(",");
    write_per_epoch(path, &header, runs, |m| {
        vec![fmt_f64(m.mean_margin), fmt_f64(m.required_beta)]
    })
}

/// Mean training loss per epoch, one column per strategy.
pub fn write_loss_figure(path: &Path, runs: &[(Strategy, Vec<EpochMetrics>)]) -> Result<()> {
    let header = std::iter::once("epoch".to_string())
        .chain(runs.iter().map(|(s, _)| format!("{s}_loss")))
        .collect::<Vec<_>>()
        .join(",");
    write_per_epoch(path, &header, runs, |m| vec![fmt_f64(m.mean_loss)])
}

fn write_per_epoch(
    path: &Path,
    header: &str,
    runs: &[(Strategy, Vec<EpochMetrics>)],
    cells: impl Fn(&EpochMetrics) -> Vec<String>,
) -> Result<()> {
    let epochs = runs.first().map_or(0, |(_, h)| h.len());
    if runs.iter().any(|(_, h)| h.len() != epochs) {
        return Err(Error::contract("runs cover different numbers of epochs"));
    }
    let rows = (0..epochs).map(|e| {
        let mut row = vec![runs[0].1[e].epoch.to_string()];
        for (_, h) in runs {
            row.extend(cells(&h[e]));
        }
        row.join(",")
    });
    write_lines(path, header, rows)
}

/// Accuracy against the attack per norm, one column per strategy.
pub fn write_accuracy_figure(path: &Path, curves: &[(Strategy, Vec<CurvePoint>)]) -> Result<()> {
    let header = std::iter::once("norm".to_string())
        .chain(curves.iter().map(|(s, _)| format!("{s}_accuracy")))
        .collect::<Vec<_>>()
        .join(",");
    let n = curves.first().map_or(0, |(_, c)| c.len());
    if curves.iter().any(|(_, c)| c.len() != n) {
        return Err(Error::contract("curves cover different norm grids"));
    }
    let rows = (0..n).map(|i| {
        std::iter::once(fmt_f64(curves[0].1[i].norm))
            .chain(curves.iter().map(|(_, c)| fmt_f64(c[i].accuracy)))
            .collect::<Vec<_>>()
            .join(",")
    });
    write_lines(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 123456789.12345679, 0.0] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NAN), "nan");
    }

    fn metrics(epoch: usize, strategy: Strategy) -> EpochMetrics {
        EpochMetrics {
            epoch,
            strategy,
            epsilon: 1.0,
            mean_loss: 0.5,
            mean_margin: 2.0,
            required_beta: 1.5,
            train_accuracy: 0.9,
            lipschitz_bound: 1.0,
        }
    }

    #[test]
    fn figure_rows_align_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.csv");
        let runs = vec![
            (Strategy::Lmt, vec![metrics(1, Strategy::Lmt), metrics(2, Strategy::Lmt)]),
            (Strategy::LcLmt, vec![metrics(1, Strategy::LcLmt), metrics(2, Strategy::LcLmt)]),
        ];
        write_margin_figure(&path, &runs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,lmt_margin,lmt_beta,lclmt_margin,lclmt_beta");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));

        let uneven = vec![runs[0].clone(), (Strategy::LcLmt, vec![metrics(1, Strategy::LcLmt)])];
        assert!(write_loss_figure(&path, &uneven).is_err());
    }

    #[test]
    fn streaming_sink_flushes_each_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut sink = MetricsCsv::create(&path).unwrap();
        sink.record(&metrics(1, Strategy::Baseline)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,baseline,1.0000000000000000e0,"));
    }
}
