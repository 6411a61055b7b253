//! Shared fixtures and oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xview_core::eval::{AreaRange, Detection, ImageTruth};
use xview_core::geometry::BBox;
use xview_core::numerics::Array;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, limit: f64) -> Array {
    Array::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect()).unwrap()
}

pub fn random_vector(rng: &mut impl Rng, n: usize, limit: f64) -> Array {
    Array::vector(&(0..n).map(|_| rng.random_range(-limit..limit)).collect::<Vec<_>>())
}

/// Plain triple loop, `k` ascending.
pub fn naive_matmul(a: &Array, b: &Array) -> Array {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a.get(i, t) * b.get(t, j);
            }
            out[i * m + j] = s;
        }
    }
    Array::matrix(n, m, out).unwrap()
}

/// Intersection over union written out from corner coordinates.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Every partial injection from `0..n_dets` into `0..n_truths`, as
/// `assignment[d] = Some(truth)`.
fn all_assignments(n_dets: usize, n_truths: usize) -> Vec<Vec<Option<usize>>> {
    fn rec(d: usize, n_dets: usize, n_truths: usize, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, out: &mut Vec<Vec<Option<usize>>>) {
        if d == n_dets {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        rec(d + 1, n_dets, n_truths, used, cur, out);
        cur.pop();
        for t in 0..n_truths {
            if !used[t] {
                used[t] = true;
                cur.push(Some(t));
                rec(d + 1, n_dets, n_truths, used, cur, out);
                cur.pop();
                used[t] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n_dets, n_truths, &mut vec![false; n_truths], &mut Vec::new(), &mut out);
    out
}

/// Sort key: score descending, then box y, x, w, h, then category.
fn rank_order(dets: &[Detection]) -> Vec<Detection> {
    let mut d = dets.to_vec();
    d.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.bbox.y.partial_cmp(&b.bbox.y).unwrap())
            .then(a.bbox.x.partial_cmp(&b.bbox.x).unwrap())
            .then(a.bbox.w.partial_cmp(&b.bbox.w).unwrap())
            .then(a.bbox.h.partial_cmp(&b.bbox.h).unwrap())
            .then(a.category.cmp(&b.category))
    });
    d.truncate(100);
    d
}

/// Per-detection outcome in rank order: `(score, matched, ignored)`.
type Outcome = Vec<(f64, bool, bool)>;

/// Exhaustive matcher. Among all valid assignments (IoU >= threshold) the
/// chosen one maximizes, detection by detection in rank order, the tuple
/// (matched, truth in range, IoU, -truth index). That lexicographic optimum
/// is what a greedy matcher must produce.
pub fn brute_force_match(dets: &[Detection], truths: &[BBox], range: AreaRange, threshold: f64) -> (Outcome, usize) {
    let dets = rank_order(dets);
    let in_range: Vec<bool> = truths.iter().map(|t| t.area() >= range.lo && t.area() < range.hi).collect();
    let positives = in_range.iter().filter(|&&r| r).count();
    type Key = (bool, bool, f64, i64);
    let mut best: Option<(Vec<Key>, Vec<Option<usize>>)> = None;
    for a in all_assignments(dets.len(), truths.len()) {
        let mut keys = Vec::with_capacity(dets.len());
        let mut valid = true;
        for (d, m) in a.iter().enumerate() {
            match m {
                Some(t) => {
                    let v = oracle_iou(&dets[d].bbox, &truths[*t]);
                    if v < threshold {
                        valid = false;
                        break;
                    }
                    keys.push((true, in_range[*t], v, -(*t as i64)));
                }
                None => keys.push((false, false, 0.0, 0)),
            }
        }
        if !valid {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bk, _)) => keys.partial_cmp(bk) == Some(std::cmp::Ordering::Greater),
        };
        if better {
            best = Some((keys, a));
        }
    }
    let (_, assignment) = best.expect("the empty assignment is always valid");
    let outcome = dets
        .iter()
        .zip(&assignment)
        .map(|(d, m)| match m {
            Some(t) => (d.score, true, !in_range[*t]),
            None => {
                let area = d.bbox.area();
                (d.score, false, !(area >= range.lo && area < range.hi))
            }
        })
        .collect();
    (outcome, positives)
}

/// 101-point interpolated AP computed from its definition: at each recall
/// level, the best precision over all cut-offs reaching that recall.
pub fn brute_force_ap(per_image: &[(Outcome, usize)]) -> Option<f64> {
    let positives: usize = per_image.iter().map(|(_, p)| p).sum();
    if positives == 0 {
        return None;
    }
    let mut entries: Vec<(f64, bool)> = Vec::new();
    for (o, _) in per_image {
        for &(s, m, ig) in o {
            if !ig {
                entries.push((s, m));
            }
        }
    }
    // Stable: equal scores keep image order, then rank order.
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &(_, m) in &entries {
        if m {
            tp += 1
        } else {
            fp += 1
        }
        points.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    for i in 0..101 {
        let r = i as f64 * 0.01;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= r)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

pub struct OracleMetrics {
    pub map: Option<f64>,
    pub map50: Option<f64>,
    pub map75: Option<f64>,
    pub map_s: Option<f64>,
    pub map_m: Option<f64>,
}

/// COCO summary from the brute-force matcher and AP.
pub fn brute_force_coco(dets: &[Vec<Detection>], truths: &[ImageTruth], small: f64, medium: f64) -> OracleMetrics {
    let step = (0.95 - 0.5) / 9.0;
    let thresholds: Vec<f64> = (0..10).map(|i| i as f64 * step + 0.5).collect();
    let mut cats: Vec<usize> = truths.iter().flat_map(|t| t.categories.clone()).collect();
    cats.sort();
    cats.dedup();
    let per_thr = |range: AreaRange| -> Vec<Option<f64>> {
        thresholds
            .iter()
            .map(|&thr| {
                let aps: Vec<f64> = cats
                    .iter()
                    .filter_map(|&c| {
                        let imgs: Vec<(Outcome, usize)> = dets
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
                                brute_force_match(&cd, &ct, range, thr)
                            })
                            .collect();
                        brute_force_ap(&imgs)
                    })
                    .collect();
                (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
            })
            .collect()
    };
    let mean = |v: &[Option<f64>]| -> Option<f64> {
        let v: Option<Vec<f64>> = v.iter().copied().collect();
        v.map(|v| 100.0 * v.iter().sum::<f64>() / v.len() as f64)
    };
    let all = per_thr(AreaRange::ALL);
    OracleMetrics {
        map: mean(&all),
        map50: all[0].map(|v| 100.0 * v),
        map75: all[5].map(|v| 100.0 * v),
        map_s: mean(&per_thr(AreaRange { lo: 0.0, hi: small })),
        map_m: mean(&per_thr(AreaRange { lo: small, hi: medium })),
    }
}
