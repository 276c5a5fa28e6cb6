//! Report files: step logs (JSONL), episode summaries (JSON) and per-class
//! histograms (CSV), plus the aggregation used by `analyze`.
//!
//! Formats are versioned by a `schema` tag: `fata.steps.v1` (first JSONL
//! line is a header, each following line one step), `fata.summary.v1`.
//! Nothing wall-clock dependent is written, so identical runs produce
//! byte-identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::{selection_histogram, AdaptConfig, AdaptReport, Method, StepRecord};
use crate::data::{Scenario, StreamSpec};
use crate::error::{Error, Result};

pub const STEPS_SCHEMA: &str = "fata.steps.v1";
pub const SUMMARY_SCHEMA: &str = "fata.summary.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsHeader {
    pub schema: String,
    pub method: Method,
    pub seed: u64,
}

/// One line of header, then one line per step.
pub fn steps_jsonl(report: &AdaptReport) -> Result<String> {
    let mut out = serde_json::to_string(&StepsHeader {
        schema: STEPS_SCHEMA.to_string(),
        method: report.method,
        seed: report.seed,
    })?;
    out.push('\n');
    for s in &report.steps {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_steps_jsonl(text: &str) -> Result<(StepsHeader, Vec<StepRecord>)> {
    let mut lines = text.lines();
    let header: StepsHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| Error::Config("empty steps file".into()))?,
    )?;
    if header.schema != STEPS_SCHEMA {
        return Err(Error::Config(format!("unsupported steps schema {:?}", header.schema)));
    }
    let steps = lines
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<StepRecord>, _>>()?;
    Ok((header, steps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub method: Method,
    pub seed: u64,
    pub family: String,
    pub severity: u8,
    pub scenario: Scenario,
    pub num_steps: usize,
    pub total_samples: usize,
    pub accuracy: f64,
    pub total_selected: usize,
    pub selected_fraction: f64,
    pub mean_prediction_entropy: f64,
    pub per_class_selected: Vec<u64>,
    pub num_collapse_steps: usize,
    pub first_collapse_step: Option<usize>,
    pub num_degenerate_bn_steps: usize,
    pub num_skipped_steps: usize,
    pub config: AdaptConfig,
    pub stream: StreamSpec,
}

impl Summary {
    pub fn from_report(report: &AdaptReport) -> Self {
        Summary {
            schema: SUMMARY_SCHEMA.to_string(),
            method: report.method,
            seed: report.seed,
            family: report.stream.corruption.family.name().to_string(),
            severity: report.stream.corruption.severity,
            scenario: report.stream.scenario,
            num_steps: report.steps.len(),
            total_samples: report.total_samples,
            accuracy: report.accuracy,
            total_selected: report.total_selected,
            selected_fraction: report.selected_fraction,
            mean_prediction_entropy: report.mean_prediction_entropy,
            per_class_selected: report.per_class_selected.clone(),
            num_collapse_steps: report.collapse_steps.len(),
            first_collapse_step: report.collapse_steps.first().copied(),
            num_degenerate_bn_steps: report.steps.iter().filter(|s| s.degenerate_bn).count(),
            num_skipped_steps: report.steps.iter().filter(|s| s.skipped_nonfinite).count(),
            config: report.config.clone(),
            stream: report.stream.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let v: Summary = serde_json::from_str(s)?;
        if v.schema != SUMMARY_SCHEMA {
            return Err(Error::Config(format!("unsupported summary schema {:?}", v.schema)));
        }
        Ok(v)
    }
}

/// `class,selected` rows.
pub fn histogram_csv(report: &AdaptReport) -> String {
    let hist = selection_histogram(report);
    let mut out = String::from("class,selected\n");
    for (c, n) in hist.per_class.iter().enumerate() {
        out.push_str(&format!("{c},{n}\n"));
    }
    out
}

/// `bucket,classes` rows over the selection-count buckets.
pub fn buckets_csv(report: &AdaptReport) -> String {
    let hist = selection_histogram(report);
    let mut out = String::from("bucket,classes\n");
    for b in &hist.buckets {
        out.push_str(&format!("{},{}\n", b.label, b.num_classes));
    }
    out
}

/// Writes `{stem}.steps.jsonl`, `{stem}.summary.json`, `{stem}.histogram.csv`.
pub fn write_episode_files(dir: &Path, stem: &str, report: &AdaptReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths = [
        dir.join(format!("{stem}.steps.jsonl")),
        dir.join(format!("{stem}.summary.json")),
        dir.join(format!("{stem}.histogram.csv")),
    ];
    fs::write(&paths[0], steps_jsonl(report)?)?;
    fs::write(&paths[1], Summary::from_report(report).to_json()?)?;
    fs::write(&paths[2], histogram_csv(report))?;
    Ok(paths.to_vec())
}

/// Loads every `*.summary.json` under `dir` (sorted by file name).
pub fn load_summaries(dir: &Path) -> Result<Vec<Summary>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(".summary.json")))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        out.push(Summary::from_json(&fs::read_to_string(&f)?)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// aggregation

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub method: String,
    pub family: String,
    pub severity: u8,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_selected_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BucketRow {
    pub method: String,
    pub bucket: String,
    pub num_classes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AggregateTables {
    pub accuracy: Vec<AccuracyRow>,
    pub buckets: Vec<BucketRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(method, family, severity) accuracy over seeds, plus per-method
/// class-selection buckets (per-class counts summed over all runs).
pub fn aggregate(summaries: &[Summary]) -> AggregateTables {
    let mut keys: Vec<(String, String, u8)> = summaries
        .iter()
        .map(|s| (s.method.name().to_string(), s.family.clone(), s.severity))
        .collect();
    keys.sort();
    keys.dedup();

    let accuracy = keys
        .iter()
        .map(|(m, f, sev)| {
            let group: Vec<&Summary> = summaries
                .iter()
                .filter(|s| s.method.name() == m && &s.family == f && s.severity == *sev)
                .collect();
            let accs: Vec<f64> = group.iter().map(|s| s.accuracy).collect();
            let fracs: Vec<f64> = group.iter().map(|s| s.selected_fraction).collect();
            let (mean, std) = mean_std(&accs);
            AccuracyRow {
                method: m.clone(),
                family: f.clone(),
                severity: *sev,
                runs: group.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                mean_selected_fraction: mean_std(&fracs).0,
            }
        })
        .collect();

    let mut methods: Vec<String> = summaries.iter().map(|s| s.method.name().to_string()).collect();
    methods.sort();
    methods.dedup();
    let mut buckets = Vec::new();
    for m in &methods {
        let group: Vec<&Summary> = summaries.iter().filter(|s| s.method.name() == m).collect();
        let classes = group.iter().map(|s| s.per_class_selected.len()).max().unwrap_or(0);
        let mut per_class = vec![0u64; classes];
        for s in &group {
            for (i, &n) in s.per_class_selected.iter().enumerate() {
                per_class[i] += n;
            }
        }
        // average count per class over runs, then bucket
        let runs = group.len().max(1) as u64;
        let averaged: Vec<u64> = per_class.iter().map(|&n| n / runs).collect();
        for (label, lo, hi) in [
            ("0", 0u64, Some(0u64)),
            ("1-5", 1, Some(5)),
            ("6-10", 6, Some(10)),
            ("11-20", 11, Some(20)),
            ("21-50", 21, Some(50)),
            ("51+", 51, None),
        ] {
            let n = averaged
                .iter()
                .filter(|&&c| c >= lo && hi.is_none_or(|h| c <= h))
                .count() as u64;
            buckets.push(BucketRow {
                method: m.clone(),
                bucket: label.to_string(),
                num_classes: n,
            });
        }
    }
    AggregateTables { accuracy, buckets }
}

pub fn accuracy_csv(tables: &AggregateTables) -> String {
    let mut out =
        String::from("method,family,severity,runs,mean_accuracy,std_accuracy,mean_selected_fraction\n");
    for r in &tables.accuracy {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            r.method, r.family, r.severity, r.runs, r.mean_accuracy, r.std_accuracy,
            r.mean_selected_fraction
        ));
    }
    out
}

pub fn aggregate_buckets_csv(tables: &AggregateTables) -> String {
    let mut out = String::from("method,bucket,classes\n");
    for r in &tables.buckets {
        out.push_str(&format!("{},{},{}\n", r.method, r.bucket, r.num_classes));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CorruptionSpec, Family};

    fn fake_report(seed: u64, acc_bias: usize) -> AdaptReport {
        let steps: Vec<StepRecord> = (0..4)
            .map(|i| StepRecord {
                step: i,
                l_tta: 0.5,
                l_fata: 0.25,
                total: 0.75,
                batch_size: 2,
                batch_accuracy: if i < acc_bias { 1.0 } else { 0.0 },
                num_selected: 1,
                mean_entropy: 0.4,
                labels: vec![i % 3, (i + 1) % 3],
                predictions: vec![i % 3, i % 3],
                selected: vec![true, false],
                degenerate_bn: false,
                skipped_nonfinite: false,
            })
            .collect();
        let mut per_class = vec![0u64; 3];
        for s in &steps {
            for (l, m) in s.labels.iter().zip(s.selected.iter()) {
                if *m {
                    per_class[*l] += 1;
                }
            }
        }
        let total_selected = per_class.iter().sum::<u64>() as usize;
        AdaptReport {
            schema: crate::adapt::REPORT_SCHEMA.to_string(),
            method: Method::EntMinFata,
            seed,
            config: AdaptConfig { seed, ..Default::default() },
            stream: StreamSpec {
                scenario: Scenario::Normal,
                batch_size: 2,
                num_batches: None,
                corruption: CorruptionSpec { family: Family::GaussNoise, severity: 5, seed: 1 },
                seed,
            },
            num_classes: 3,
            total_samples: 8,
            total_correct: 2 * acc_bias,
            accuracy: acc_bias as f64 / 4.0,
            total_selected,
            selected_fraction: total_selected as f64 / 8.0,
            per_class_selected: per_class,
            mean_prediction_entropy: 0.4,
            collapse_steps: vec![],
            steps,
        }
    }

    #[test]
    fn steps_jsonl_roundtrip() {
        let report = fake_report(3, 2);
        let text = steps_jsonl(&report).unwrap();
        let (header, steps) = parse_steps_jsonl(&text).unwrap();
        assert_eq!(header.seed, 3);
        assert_eq!(steps, report.steps);
    }

    #[test]
    fn summary_roundtrip() {
        let report = fake_report(5, 3);
        let s = Summary::from_report(&report);
        let back = Summary::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        assert_eq!(back.family, "gauss_noise");
        assert_eq!(back.accuracy, 0.75);
    }

    #[test]
    fn csv_shapes() {
        let report = fake_report(1, 1);
        let csv = histogram_csv(&report);
        assert_eq!(csv.lines().count(), 4, "header + one row per class");
        let bcsv = buckets_csv(&report);
        assert_eq!(bcsv.lines().count(), 7, "header + 6 buckets");
    }

    #[test]
    fn aggregate_single_report_equals_report() {
        let report = fake_report(1, 2);
        let tables = aggregate(&[Summary::from_report(&report)]);
        assert_eq!(tables.accuracy.len(), 1);
        let row = &tables.accuracy[0];
        assert_eq!(row.runs, 1);
        assert!((row.mean_accuracy - report.accuracy).abs() < 1e-12);
        assert_eq!(row.std_accuracy, 0.0);
        let total: u64 = tables.buckets.iter().map(|b| b.num_classes).sum();
        assert_eq!(total, 3, "buckets partition the classes");
    }

    #[test]
    fn aggregate_mean_std_over_seeds() {
        let a = Summary::from_report(&fake_report(1, 0));
        let b = Summary::from_report(&fake_report(2, 4));
        let tables = aggregate(&[a, b]);
        assert_eq!(tables.accuracy.len(), 1);
        let row = &tables.accuracy[0];
        assert_eq!(row.runs, 2);
        assert!((row.mean_accuracy - 0.5).abs() < 1e-12);
        assert!((row.std_accuracy - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn episode_files_written() {
        let dir = tempfile::tempdir().unwrap();
        let report = fake_report(7, 2);
        let paths = write_episode_files(dir.path(), "test_ep", &report).unwrap();
        assert_eq!(paths.len(), 3);
        for p in &paths {
            assert!(p.exists(), "{p:?} missing");
        }
        let summaries = load_summaries(dir.path()).unwrap();
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].seed, 7);
    }
}
