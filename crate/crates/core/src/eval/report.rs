//! Per-view reports and multi-seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{coco_map, AreaBounds, Detection, ImageTruth, ViewMetrics};
use crate::error::{Error, Result};
use crate::stats::{mean, population_std};
use crate::synth::{SceneSample, View};

/// Metrics of one split: all images pooled, then each view alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub overall: ViewMetrics,
    /// `None` when the split has no image of that view.
    pub ground: Option<ViewMetrics>,
    pub aerial: Option<ViewMetrics>,
    /// Ground mAP minus aerial mAP.
    pub gap: Option<f64>,
}

impl EvalReport {
    /// Flat `(name, value)` list used for aggregation and CSV output.
    pub fn metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        let blocks = [
            ("overall", Some(&self.overall)),
            ("ground", self.ground.as_ref()),
            ("aerial", self.aerial.as_ref()),
        ];
        for (name, block) in blocks {
            let m = block.copied().unwrap_or_default();
            for (col, v) in [
                ("map", m.map),
                ("map50", m.map50),
                ("map75", m.map75),
                ("map_s", m.map_s),
                ("map_m", m.map_m),
            ] {
                out.push((format!("{name}.{col}"), v));
            }
        }
        out.push(("gap".to_string(), self.gap));
        out
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub const REPORT_CSV_HEADER: &str = "label,view,mAP,mAP50,mAP75,mAP_S,mAP_M,gap";

impl EvalReport {
    /// Three CSV rows (overall, ground, aerial) under [`REPORT_CSV_HEADER`].
    pub fn csv_rows(&self, label: &str) -> Vec<String> {
        let row = |view: &str, m: Option<&ViewMetrics>, gap: Option<f64>| {
            let m = m.copied().unwrap_or_default();
            format!(
                "{label},{view},{},{},{},{},{},{}",
                fmt_cell(m.map),
                fmt_cell(m.map50),
                fmt_cell(m.map75),
                fmt_cell(m.map_s),
                fmt_cell(m.map_m),
                fmt_cell(gap)
            )
        };
        vec![
            row("all", Some(&self.overall), self.gap),
            row("ground", self.ground.as_ref(), None),
            row("aerial", self.aerial.as_ref(), None),
        ]
    }
}

fn truth_of(s: &SceneSample) -> ImageTruth {
    ImageTruth {
        boxes: s.boxes.clone(),
        categories: s.categories.clone(),
    }
}

/// Evaluates detections for `samples`, pooled and split by view.
pub fn view_report(samples: &[SceneSample], dets: &[Vec<Detection>], bounds: AreaBounds) -> Result<EvalReport> {
    if samples.len() != dets.len() {
        return Err(Error::invalid(format!(
            "{} samples but {} detection lists",
            samples.len(),
            dets.len()
        )));
    }
    let truths: Vec<ImageTruth> = samples.iter().map(truth_of).collect();
    let overall = coco_map(dets, &truths, bounds);
    let block = |view: View| {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].view == view).collect();
        if idx.is_empty() {
            return None;
        }
        let d: Vec<Vec<Detection>> = idx.iter().map(|&i| dets[i].clone()).collect();
        let t: Vec<ImageTruth> = idx.iter().map(|&i| truths[i].clone()).collect();
        Some(coco_map(&d, &t, bounds))
    };
    let ground = block(View::Ground);
    let aerial = block(View::Aerial);
    let gap = match (ground.and_then(|g| g.map), aerial.and_then(|a| a.map)) {
        (Some(g), Some(a)) => Some(g - a),
        _ => None,
    };
    Ok(EvalReport {
        samples: samples.len(),
        overall,
        ground,
        aerial,
        gap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub report: Option<EvalReport>,
    /// Why the run produced no report.
    pub error: Option<String>,
}

/// Per-seed reports with population mean and std per metric. Failed seeds
/// are listed and excluded from the statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<u64>,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

impl SeedReport {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in runs.iter().filter_map(|r| r.report.as_ref()) {
            for (name, v) in r.metrics() {
                if let Some(v) = v {
                    values.entry(name).or_default().push(v);
                }
            }
        }
        Self {
            seeds: runs.iter().map(|r| r.seed).collect(),
            failures: runs.iter().filter(|r| r.report.is_none()).map(|r| r.seed).collect(),
            mean: values.iter().map(|(k, v)| (k.clone(), mean(v))).collect(),
            std: values.iter().map(|(k, v)| (k.clone(), population_std(v))).collect(),
            runs,
        }
    }

    /// One row per seed plus `mean` and `std` rows; metric columns in name order.
    pub fn to_csv(&self) -> String {
        let names: Vec<String> = self.mean.keys().cloned().collect();
        let mut out = format!("seed,status,{}\n", names.join(","));
        for run in &self.runs {
            let vals: BTreeMap<String, Option<f64>> =
                run.report.as_ref().map(|r| r.metrics().into_iter().collect()).unwrap_or_default();
            let cells: Vec<String> = names.iter().map(|n| fmt_cell(vals.get(n).copied().flatten())).collect();
            let status = if run.report.is_some() { "ok" } else { "failed" };
            out.push_str(&format!("{},{status},{}\n", run.seed, cells.join(",")));
        }
        for (label, map) in [("mean", &self.mean), ("std", &self.std)] {
            let cells: Vec<String> = names.iter().map(|n| fmt_cell(map.get(n).copied())).collect();
            out.push_str(&format!("{label},,{}\n", cells.join(",")));
        }
        out
    }
}

/// Runs `run` for each seed. Divergence is recorded as a failed seed; other
/// errors abort the sweep.
pub fn seed_sweep<F>(seeds: &[u64], mut run: F) -> Result<SeedReport>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    if seeds.is_empty() {
        return Err(Error::invalid("seed sweep needs at least one seed"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        match run(seed) {
            Ok(report) => runs.push(SeedRun {
                seed,
                report: Some(report),
                error: None,
            }),
            Err(e @ Error::Diverged { .. }) => {
                log::warn!("seed {seed} failed: {e}");
                runs.push(SeedRun {
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SeedReport::from_runs(runs))
}
