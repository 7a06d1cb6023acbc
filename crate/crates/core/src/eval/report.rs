use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ApSummary, CorruptionKind, EvalConfig};
use crate::data::Dataset;
use crate::detcore::Detector;
use crate::{Error, Result};

/// Metrics of one detector on one dataset. Values are percentages rounded to
/// two decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub dataset_hash: String,
    pub model_fingerprint: String,
    pub epsilon_255: f32,
    pub clean: ApSummary,
    pub adv_per_step: BTreeMap<usize, ApSummary>,
    pub adv_avg: Option<ApSummary>,
    /// Mean performance under the corruptions listed in `corruptions`.
    pub mpc: Option<ApSummary>,
    pub corruptions: Vec<String>,
}

impl MetricReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: &str,
        data: &Dataset,
        det: &Detector<f32>,
        clean: ApSummary,
        adv_per_step: BTreeMap<usize, ApSummary>,
        adv_avg: Option<ApSummary>,
        mpc: Option<ApSummary>,
        cfg: &EvalConfig,
    ) -> Self {
        let adv_per_step: BTreeMap<usize, ApSummary> = adv_per_step.into_iter().map(|(k, v)| (k, v.rounded())).collect();
        // the average is taken over the reported (rounded) per-step values
        let adv_avg = adv_avg.and_then(|_| ApSummary::mean(&adv_per_step.values().copied().collect::<Vec<_>>())).map(ApSummary::rounded);
        MetricReport {
            label: label.to_string(),
            dataset_hash: data.content_hash.clone(),
            model_fingerprint: det.params().fingerprint(),
            epsilon_255: cfg.epsilon_255,
            clean: clean.rounded(),
            adv_per_step,
            adv_avg,
            mpc: mpc.map(ApSummary::rounded),
            corruptions: cfg.corruptions.iter().map(|k: &CorruptionKind| k.name().to_string()).collect(),
        }
    }
}

/// One JSON object per line.
pub fn write_reports(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).expect("report serializes"));
        text.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: impl AsRef<Path>) -> Result<Vec<MetricReport>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn cell(v: Option<f64>, reference: Option<f64>) -> String {
    match (v, reference) {
        (Some(v), Some(r)) => format!("{v:.2} ({:+.1})", v - r),
        (Some(v), None) => format!("{v:.2}"),
        (None, _) => "-".to_string(),
    }
}

/// Plain-text comparison table. When `reference` names a row, every other
/// row carries `(+x.x)` deltas against it. Reports from different datasets
/// are refused.
pub fn format_table(reports: &[MetricReport], reference: Option<&str>) -> Result<String> {
    let Some(first) = reports.first() else {
        return Ok(String::new());
    };
    if let Some(bad) = reports.iter().find(|r| r.dataset_hash != first.dataset_hash) {
        return Err(Error::Config(format!(
            "report {:?} was computed on dataset {}, expected {}",
            bad.label, bad.dataset_hash, first.dataset_hash
        )));
    }
    let with_mpc: Vec<&MetricReport> = reports.iter().filter(|r| r.mpc.is_some()).collect();
    if let Some(bad) = with_mpc.iter().find(|r| r.corruptions != with_mpc[0].corruptions) {
        return Err(Error::Config(format!("report {:?} averages over different corruptions", bad.label)));
    }
    let with_adv: Vec<&MetricReport> = reports.iter().filter(|r| r.adv_avg.is_some()).collect();
    if let Some(bad) = with_adv.iter().find(|r| r.epsilon_255 != with_adv[0].epsilon_255 || r.adv_per_step.keys().ne(with_adv[0].adv_per_step.keys())) {
        return Err(Error::Config(format!("report {:?} uses a different attack budget or step set", bad.label)));
    }
    let base = match reference {
        Some(name) => Some(
            reports
                .iter()
                .find(|r| r.label == name)
                .ok_or_else(|| Error::Argument(format!("no report labelled {name:?}")))?,
        ),
        None => None,
    };
    type Column = (&'static str, fn(&MetricReport) -> Option<f64>);
    let columns: [Column; 7] = [
        ("AP", |r| Some(r.clean.ap)),
        ("AP50", |r| Some(r.clean.ap50)),
        ("AP75", |r| Some(r.clean.ap75)),
        ("advAP", |r| r.adv_avg.map(|a| a.ap)),
        ("advAP50", |r| r.adv_avg.map(|a| a.ap50)),
        ("advAP75", |r| r.adv_avg.map(|a| a.ap75)),
        ("mPC50", |r| r.mpc.map(|a| a.ap50)),
    ];
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("Method".to_string()).chain(columns.iter().map(|c| c.0.to_string())).collect()];
    for r in reports {
        let is_base = base.is_some_and(|b| std::ptr::eq(b, r));
        let mut row = vec![r.label.clone()];
        for (_, f) in &columns {
            let reference = if is_base { None } else { base.and_then(f) };
            row.push(cell(f(r), reference));
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        let _ = writeln!(out, "| {} |", line.join(" | "));
        if i == 0 {
            let sep: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            let _ = writeln!(out, "| {} |", sep.join(" | "));
        }
    }
    if let Some(r) = with_mpc.first() {
        let _ = writeln!(out, "\nmPC over: {}", r.corruptions.join(", "));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(label: &str, hash: &str, ap50: f64) -> MetricReport {
        MetricReport {
            label: label.into(),
            dataset_hash: hash.into(),
            model_fingerprint: String::new(),
            epsilon_255: 8.0,
            clean: ApSummary { ap: 40.0, ap50, ap75: 30.0 },
            adv_per_step: BTreeMap::from([(1, ApSummary { ap: 10.0, ap50: 20.0, ap75: 5.0 })]),
            adv_avg: Some(ApSummary { ap: 10.0, ap50: 20.0, ap75: 5.0 }),
            mpc: None,
            corruptions: vec![],
        }
    }

    #[test]
    fn deltas_and_hash_check() {
        let rows = vec![report("PRE", "h", 70.0), report("UDFA", "h", 71.25)];
        let t = format_table(&rows, Some("PRE")).unwrap();
        assert!(t.contains("71.25 (+1.2)") || t.contains("71.25 (+1.3)"), "{t}");
        assert!(t.contains("| PRE "));
        let bad = vec![report("PRE", "h", 70.0), report("X", "other", 1.0)];
        assert!(matches!(format_table(&bad, None), Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        let rows = vec![report("A", "h", 1.0), report("B", "h", 2.0)];
        write_reports(&p, &rows).unwrap();
        assert_eq!(read_reports(&p).unwrap(), rows);
    }
}
