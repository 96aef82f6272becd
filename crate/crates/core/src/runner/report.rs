//! Aggregation of finished runs into delimited tables.
//!
//! Every function here is a pure fold over immutable record files; record
//! order never changes a value.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_records, seed_summary, RunError, RunManifest, TrialRecord, MANIFEST_FILE, RECORDS_FILE};
use crate::dataset::ClassLabel;
use crate::metrics::{error_consistency, threshold_sweep, BiasReport, OutcomeCounts, ProfiledOutcome, SweepPoint};
use crate::steering::PerturbationSpec;

#[derive(Debug, Clone)]
pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<TrialRecord>,
}

impl RunData {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    /// Records sorted by `(seed, item_id)`.
    fn sorted(&self) -> Vec<&TrialRecord> {
        let mut v: Vec<&TrialRecord> = self.records.iter().collect();
        v.sort_by(|a, b| (a.seed, &a.item_id).cmp(&(b.seed, &b.item_id)));
        v
    }

    fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.records.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

pub fn load_run(dir: impl AsRef<Path>) -> Result<RunData, RunError> {
    let dir = dir.as_ref();
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath)?;
    let manifest = serde_json::from_str(&text).map_err(|e| RunError::Json {
        path: mpath,
        message: e.to_string(),
    })?;
    Ok(RunData {
        dir: dir.to_path_buf(),
        manifest,
        records: read_records(dir.join(RECORDS_FILE))?,
    })
}

/// All runs must have been evaluated on the same dataset.
pub fn check_same_dataset(runs: &[RunData]) -> Result<(), RunError> {
    if let Some(first) = runs.first() {
        for r in &runs[1..] {
            if r.manifest.dataset_hash != first.manifest.dataset_hash {
                return Err(RunError::ManifestMismatch {
                    expected: format!("{} ({})", first.manifest.dataset_hash, first.name()),
                    found: format!("{} ({})", r.manifest.dataset_hash, r.name()),
                });
            }
        }
    }
    Ok(())
}

/// Percent with one decimal (shape bias columns).
pub fn pct1(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

/// Percent with two decimals (accuracy columns).
pub fn pct2(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub run: String,
    pub n: u64,
    pub shape_bias: Option<f64>,
    /// Cue accuracy over attempted trials.
    pub accuracy: Option<f64>,
    pub accuracy_of_total: f64,
    pub avg_tokens: Option<f64>,
    pub single_class_ratio: Option<f64>,
    pub generic_ratio: Option<f64>,
}

pub fn bias_row(run: &RunData) -> BiasRow {
    let s = seed_summary(None, run.records.iter());
    BiasRow {
        run: run.name().to_string(),
        n: s.n_total,
        shape_bias: s.report.as_ref().and_then(|r| r.shape_bias),
        accuracy: s.accuracy_of_attempted,
        accuracy_of_total: s.accuracy_of_total,
        avg_tokens: s.caption.map(|c| c.avg_tokens),
        single_class_ratio: s.caption.map(|c| c.single_class_ratio),
        generic_ratio: s.caption.map(|c| c.generic_ratio),
    }
}

pub fn bias_csv(rows: &[BiasRow]) -> String {
    let mut out = String::from(
        "run,n,shape_bias_pct,accuracy_pct,accuracy_of_total_pct,avg_tokens,single_class_pct,generic_pct\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            field(&r.run),
            r.n,
            opt(r.shape_bias, pct1),
            opt(r.accuracy, pct2),
            pct2(r.accuracy_of_total),
            opt(r.avg_tokens, |t| format!("{t:.1}")),
            opt(r.single_class_ratio, pct1),
            opt(r.generic_ratio, pct1),
        );
    }
    out
}

pub const DEFAULT_THRESHOLDS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];

/// Confidence-threshold curve over a run's profiled trials; `None` if no trial has a profile.
pub fn threshold_curve(run: &RunData, thresholds: &[f64]) -> Option<Vec<SweepPoint>> {
    let trials: Vec<ProfiledOutcome> = run
        .sorted()
        .into_iter()
        .filter_map(|r| {
            Some(ProfiledOutcome {
                item_id: r.item_id.clone(),
                outcome: r.outcome?,
                profile: Some(r.profile.clone()?),
            })
        })
        .collect();
    threshold_sweep(&trials, thresholds).ok()
}

pub fn thresholds_csv(runs: &[RunData], thresholds: &[f64]) -> String {
    let mut out = String::from("run,threshold,retained_n,shape_bias_pct,shape_frac_pct,texture_frac_pct\n");
    for run in runs {
        for p in threshold_curve(run, thresholds).unwrap_or_default() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                field(run.name()),
                p.threshold,
                p.retained_n,
                opt(p.shape_bias, pct1),
                opt(p.shape_frac, pct2),
                opt(p.texture_frac, pct2)
            );
        }
    }
    out
}

/// Pooled report per shape class.
pub fn classwise(run: &RunData) -> BTreeMap<ClassLabel, BiasReport> {
    let mut buckets: BTreeMap<ClassLabel, OutcomeCounts> = BTreeMap::new();
    for r in &run.records {
        if let Some(o) = r.outcome {
            buckets.entry(r.shape).or_default().add(o);
        }
    }
    buckets
        .into_iter()
        .filter_map(|(c, counts)| BiasReport::from_counts(counts).ok().map(|r| (c, r)))
        .collect()
}

pub fn classwise_csv(runs: &[RunData]) -> String {
    let mut out = String::from("run,class,n,shape_bias_pct,accuracy_pct\n");
    for run in runs {
        for (c, r) in classwise(run) {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                field(run.name()),
                c,
                r.n_trials,
                opt(r.shape_bias, pct1),
                pct2(r.cue_accuracy)
            );
        }
    }
    out
}

/// Per-item shape correctness of one system (a run, a human panel, an encoder).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponsePattern {
    pub name: String,
    pub correct_shape: BTreeMap<String, bool>,
}

impl ResponsePattern {
    /// Pattern of a run's lowest seed; errored trials are left out.
    pub fn from_run(run: &RunData) -> Self {
        let seed = run.seeds().first().copied();
        Self {
            name: run.name().to_string(),
            correct_shape: run
                .records
                .iter()
                .filter(|r| Some(r.seed) == seed)
                .filter_map(|r| Some((r.item_id.clone(), r.outcome?.is_shape_hit())))
                .collect(),
        }
    }

    /// `item_id,correct_shape` rows with `correct_shape` in {0, 1}; one header line allowed.
    pub fn parse_csv(name: impl Into<String>, text: &str) -> Result<Self, RunError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (i == 0 && line.starts_with("item_id")) {
                continue;
            }
            let (id, v) = line
                .split_once(',')
                .ok_or_else(|| RunError::Config(format!("pattern line {}: expected `item_id,0|1`", i + 1)))?;
            let b = match v.trim() {
                "0" => false,
                "1" => true,
                other => return Err(RunError::Config(format!("pattern line {}: `{other}` is not 0 or 1", i + 1))),
            };
            map.insert(id.trim().to_string(), b);
        }
        Ok(Self {
            name: name.into(),
            correct_shape: map,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self, RunError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse_csv(name, &std::fs::read_to_string(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("item_id,correct_shape\n");
        for (id, b) in &self.correct_shape {
            let _ = writeln!(out, "{id},{}", u8::from(*b));
        }
        out
    }
}

/// Kappa over the items both patterns cover; `None` if they share none or kappa is undefined.
pub fn pattern_kappa(a: &ResponsePattern, b: &ResponsePattern) -> Option<f64> {
    let (xs, ys): (Vec<bool>, Vec<bool>) = a
        .correct_shape
        .iter()
        .filter_map(|(id, x)| b.correct_shape.get(id).map(|y| (*x, *y)))
        .unzip();
    error_consistency(&xs, &ys).ok().and_then(|r| r.kappa)
}

pub fn kappa_matrix(patterns: &[ResponsePattern]) -> Vec<Vec<Option<f64>>> {
    patterns
        .iter()
        .map(|a| patterns.iter().map(|b| pattern_kappa(a, b)).collect())
        .collect()
}

pub fn kappa_csv(patterns: &[ResponsePattern]) -> String {
    let m = kappa_matrix(patterns);
    let mut out = String::from("system");
    for p in patterns {
        out.push(',');
        out.push_str(&field(&p.name));
    }
    out.push('\n');
    for (p, row) in patterns.iter().zip(m) {
        out.push_str(&field(&p.name));
        for k in row {
            out.push(',');
            out.push_str(&opt(k, |v| format!("{v:.4}")));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringPoint {
    pub run: String,
    pub kind: String,
    /// Patch size in pixels or noise variance; `None` for the unperturbed run.
    pub param: Option<f64>,
    /// Mean of per-seed shape biases.
    pub mean_shape_bias: Option<f64>,
    pub cue_accuracy: Option<f64>,
    pub seeds: usize,
}

pub fn steering_point(run: &RunData) -> SteeringPoint {
    let (kind, param) = match run.manifest.config.perturbation {
        PerturbationSpec::None => ("none", None),
        PerturbationSpec::PatchShuffle { patch_px, .. } => ("patch_shuffle", Some(f64::from(patch_px))),
        PerturbationSpec::GaussianNoise { variance, .. } => ("gaussian_noise", Some(variance)),
    };
    let seeds = run.seeds();
    let biases: Vec<f64> = seeds
        .iter()
        .filter_map(|&s| {
            seed_summary(Some(s), run.records.iter().filter(|r| r.seed == s))
                .report
                .and_then(|r| r.shape_bias)
        })
        .collect();
    SteeringPoint {
        run: run.name().to_string(),
        kind: kind.to_string(),
        param,
        mean_shape_bias: (!biases.is_empty()).then(|| biases.iter().sum::<f64>() / biases.len() as f64),
        cue_accuracy: seed_summary(None, run.records.iter()).accuracy_of_attempted,
        seeds: seeds.len(),
    }
}

pub fn steering_csv(runs: &[RunData]) -> String {
    let mut points: Vec<SteeringPoint> = runs.iter().map(steering_point).collect();
    points.sort_by(|a, b| {
        (&a.kind, a.param.unwrap_or(f64::INFINITY))
            .partial_cmp(&(&b.kind, b.param.unwrap_or(f64::INFINITY)))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = String::from("run,kind,param,seeds,mean_shape_bias_pct,accuracy_pct\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            field(&p.run),
            p.kind,
            p.param.map(|v| v.to_string()).unwrap_or_default(),
            p.seeds,
            opt(p.mean_shape_bias, pct1),
            opt(p.cue_accuracy, pct2)
        );
    }
    out
}

/// Write every table for `runs` (plus external patterns) into `out_dir`.
pub fn write_report(runs: &[RunData], external: &[ResponsePattern], out_dir: impl AsRef<Path>) -> Result<(), RunError> {
    check_same_dataset(runs)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let rows: Vec<BiasRow> = runs.iter().map(bias_row).collect();
    std::fs::write(out_dir.join("bias.csv"), bias_csv(&rows))?;
    std::fs::write(out_dir.join("thresholds.csv"), thresholds_csv(runs, &DEFAULT_THRESHOLDS))?;
    std::fs::write(out_dir.join("classwise.csv"), classwise_csv(runs))?;
    let mut patterns: Vec<ResponsePattern> = runs.iter().map(ResponsePattern::from_run).collect();
    patterns.extend(external.iter().cloned());
    std::fs::write(out_dir.join("consistency.csv"), kappa_csv(&patterns))?;
    std::fs::write(out_dir.join("steering.csv"), steering_csv(runs))?;
    Ok(())
}
