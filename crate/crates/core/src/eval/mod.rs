//! COCO-style detection metrics.
//!
//! Matching and accumulation follow the pycocotools rules: per image and
//! category, detections are taken in score order (at most 100), each one
//! claims the unmatched truth with the highest IoU at or above the threshold,
//! preferring truths inside the area range. Truths outside the area range
//! and unmatched detections outside it are ignored. AP is the mean of
//! interpolated precision at 101 recall points, averaged over categories that
//! have truths.
//!
//! Equal scores are ordered by the box key `(y, x, w, h)` so results do not
//! depend on input order. IoU ties between truths go to the lower truth index.

mod report;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub use crate::geometry::iou;
pub use report::{seed_sweep, view_report, EvalReport, SeedReport, SeedRun, REPORT_CSV_HEADER};

pub const MAX_DETECTIONS: usize = 100;
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`, spaced like `numpy.linspace(0.5, 0.95, 10)`.
pub fn iou_thresholds() -> [f64; 10] {
    linspace(0.5, 0.95)
}

/// `0.00, 0.01, ..., 1.00`, spaced like `numpy.linspace(0, 1, 101)`.
pub fn recall_thresholds() -> [f64; RECALL_POINTS] {
    linspace(0.0, 1.0)
}

fn linspace<const N: usize>(start: f64, stop: f64) -> [f64; N] {
    let step = (stop - start) / (N - 1) as f64;
    std::array::from_fn(|i| if i + 1 == N { stop } else { i as f64 * step + start })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub category: usize,
    pub score: f64,
}

/// Score descending, then box key ascending, then category.
pub fn canonical_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.bbox.tie_key(&b.bbox))
        .then(a.category.cmp(&b.category))
}

/// Greedy per-category suppression in canonical order: a detection is kept
/// iff its IoU with every kept detection of the same category is at most
/// `threshold`. Output is in canonical order.
pub fn nms(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(canonical_cmp);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        if kept
            .iter()
            .filter(|k| k.category == d.category)
            .all(|k| iou(&k.bbox, &d.bbox) <= threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Area range `[lo, hi)` in square pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaRange {
    pub lo: f64,
    pub hi: f64,
}

impl AreaRange {
    pub const ALL: AreaRange = AreaRange {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, area: f64) -> bool {
        area >= self.lo && area < self.hi
    }
}

/// Small/medium split points in square pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AreaBounds {
    pub small: f64,
    pub medium: f64,
}

impl Default for AreaBounds {
    fn default() -> Self {
        Self {
            small: 32.0 * 32.0,
            medium: 96.0 * 96.0,
        }
    }
}

impl AreaBounds {
    pub fn small_range(&self) -> AreaRange {
        AreaRange { lo: 0.0, hi: self.small }
    }
    pub fn medium_range(&self) -> AreaRange {
        AreaRange {
            lo: self.small,
            hi: self.medium,
        }
    }
    pub fn large_range(&self) -> AreaRange {
        AreaRange {
            lo: self.medium,
            hi: f64::INFINITY,
        }
    }
}

/// Ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTruth {
    pub boxes: Vec<BBox>,
    pub categories: Vec<usize>,
}

/// Per-detection outcome of matching one image and category.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatch {
    pub scores: Vec<f64>,
    pub matched: Vec<bool>,
    pub ignored: Vec<bool>,
    /// Truths that count towards recall.
    pub positives: usize,
}

/// Greedy matching of `dets` (any order) against `truths` for one image and
/// one category.
pub fn match_image(dets: &[Detection], truths: &[BBox], range: AreaRange, threshold: f64) -> ImageMatch {
    let mut dets = dets.to_vec();
    dets.sort_by(canonical_cmp);
    dets.truncate(MAX_DETECTIONS);

    let truth_ignored: Vec<bool> = truths.iter().map(|t| !range.contains(t.area())).collect();
    let mut truth_used = vec![false; truths.len()];
    let mut out = ImageMatch {
        scores: Vec::with_capacity(dets.len()),
        matched: Vec::with_capacity(dets.len()),
        ignored: Vec::with_capacity(dets.len()),
        positives: truth_ignored.iter().filter(|&&i| !i).count(),
    };
    for d in &dets {
        // Best candidate as (is_regular, iou, index); regular truths win
        // over ignored ones regardless of IoU.
        let mut best: Option<(bool, f64, usize)> = None;
        for (g, t) in truths.iter().enumerate() {
            if truth_used[g] {
                continue;
            }
            let v = iou(&d.bbox, t);
            if v < threshold {
                continue;
            }
            let cand = (!truth_ignored[g], v, g);
            let better = match best {
                None => true,
                Some((reg, bv, _)) => (cand.0, cand.1) > (reg, bv),
            };
            if better {
                best = Some(cand);
            }
        }
        out.scores.push(d.score);
        match best {
            Some((_, _, g)) => {
                truth_used[g] = true;
                out.matched.push(true);
                out.ignored.push(truth_ignored[g]);
            }
            None => {
                out.matched.push(false);
                out.ignored.push(!range.contains(d.bbox.area()));
            }
        }
    }
    out
}

/// 101-point interpolated AP from per-image matches, concatenated in image
/// order and stably sorted by score. `None` when there are no positives.
pub fn accumulate(images: &[ImageMatch]) -> Option<f64> {
    let positives: usize = images.iter().map(|m| m.positives).sum();
    if positives == 0 {
        return None;
    }
    let mut entries: Vec<(f64, bool)> = Vec::new();
    for m in images {
        for i in 0..m.scores.len() {
            if !m.ignored[i] {
                entries.push((m.scores[i], m.matched[i]));
            }
        }
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(entries.len());
    let mut precision = Vec::with_capacity(entries.len());
    for &(_, hit) in &entries {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut total = 0.0;
    for thr in recall_thresholds() {
        let idx = recall.partition_point(|&x| x < thr);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    Some(total / RECALL_POINTS as f64)
}

/// AP of one category in one image at one IoU threshold, in `[0, 1]`.
/// Returns 0 when there are no truths.
pub fn average_precision(dets: &[Detection], truths: &[BBox], threshold: f64) -> f64 {
    accumulate(&[match_image(dets, truths, AreaRange::ALL, threshold)]).unwrap_or(0.0)
}

/// Columns of one COCO summary, in percent. `None` marks a column with no
/// truths in range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub map: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub map_s: Option<f64>,
    pub map_m: Option<f64>,
    /// Large-object AP; computed but not part of the serialized report.
    #[serde(skip)]
    pub map_l: Option<f64>,
}

/// Mean over categories with truths of the AP at each threshold; one value
/// per threshold, `None` when no category has truths in `range`.
fn per_threshold_map(
    dets: &[Vec<Detection>],
    truths: &[ImageTruth],
    range: AreaRange,
    thresholds: &[f64],
) -> Vec<Option<f64>> {
    let mut cats: Vec<usize> = truths.iter().flat_map(|t| t.categories.iter().copied()).collect();
    cats.sort_unstable();
    cats.dedup();
    thresholds
        .iter()
        .map(|&thr| {
            let aps: Vec<f64> = cats
                .iter()
                .filter_map(|&c| {
                    let matches: Vec<ImageMatch> = dets
                        .iter()
                        .zip(truths)
                        .map(|(d, t)| {
                            let cd: Vec<Detection> = d.iter().filter(|x| x.category == c).copied().collect();
                            let ct: Vec<BBox> = t
                                .boxes
                                .iter()
                                .zip(&t.categories)
                                .filter(|(_, &k)| k == c)
                                .map(|(b, _)| *b)
                                .collect();
                            match_image(&cd, &ct, range, thr)
                        })
                        .collect();
                    accumulate(&matches)
                })
                .collect();
            if aps.is_empty() {
                None
            } else {
                Some(aps.iter().sum::<f64>() / aps.len() as f64)
            }
        })
        .collect()
}

fn mean_percent(v: &[Option<f64>]) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.iter().copied().collect();
    vals.map(|vals| 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
}

/// COCO summary over images. `dets[i]` are the detections of the image whose
/// truth is `truths[i]`. Categories absent from the truths are skipped.
pub fn coco_map(dets: &[Vec<Detection>], truths: &[ImageTruth], bounds: AreaBounds) -> ViewMetrics {
    assert_eq!(dets.len(), truths.len(), "one detection list per image");
    let thr = iou_thresholds();
    let all = per_threshold_map(dets, truths, AreaRange::ALL, &thr);
    let sized = |r| mean_percent(&per_threshold_map(dets, truths, r, &thr));
    ViewMetrics {
        map: mean_percent(&all),
        map50: all[0].map(|v| 100.0 * v),
        map75: all[5].map(|v| 100.0 * v),
        map_s: sized(bounds.small_range()),
        map_m: sized(bounds.medium_range()),
        map_l: sized(bounds.large_range()),
    }
}
