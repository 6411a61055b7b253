//! Synthetic paired ground/aerial scenes.
//!
//! Ground views hold a few large boxes clustered around one point; aerial
//! views hold many small boxes spread uniformly. Both views of a pair share a
//! location-level category set but no object correspondence.
//!
//! Features are rendered analytically: each object contributes a
//! cell-averaged Gaussian bump, scaled by box size, times a channel vector
//! made of a fixed category embedding followed by four geometry channels
//! (centre offset from the cell centre in cell units, log width and log
//! height in cell units). Seeded Gaussian noise is added on top.

pub mod coco;
pub mod dataset;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numerics::Array;
use crate::pathways::TokenGrid;

pub use coco::{load_coco, save_coco, CocoDocument};
pub use dataset::{
    generate_dataset, load_dataset, DatasetManifest, GuardedSplit, SelectionToken, Split, SplitAccess, SplitSizes,
    DATASET_FORMAT_VERSION, MANIFEST_FILE,
};

/// Number of geometry channels appended after the category embedding.
pub const GEOMETRY_CHANNELS: usize = 4;

pub const DEFAULT_CATEGORIES: [&str; 10] = [
    "tram",
    "bicycle",
    "van",
    "truck",
    "bus",
    "person",
    "car",
    "other",
    "streetlight",
    "traffic light",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Ground,
    Aerial,
}

impl View {
    pub fn as_str(&self) -> &'static str {
        match self {
            View::Ground => "ground",
            View::Aerial => "aerial",
        }
    }

    pub fn opposite(&self) -> View {
        match self {
            View::Ground => View::Aerial,
            View::Aerial => View::Ground,
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground" => Ok(View::Ground),
            "aerial" => Ok(View::Aerial),
            other => Err(Error::invalid(format!("unknown view `{other}`"))),
        }
    }
}

/// One image: labels, view, pair membership and (once rendered) features.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub pair_id: u64,
    pub view: View,
    pub width: f64,
    pub height: f64,
    pub boxes: Vec<BBox>,
    pub categories: Vec<usize>,
    /// Seed of the additive feature noise; part of the on-disk record.
    pub noise_seed: u64,
    pub features: Option<TokenGrid>,
}

impl SceneSample {
    pub fn object_count(&self) -> usize {
        self.boxes.len()
    }

    pub fn features(&self) -> Result<&TokenGrid> {
        self.features
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("sample {} has no rendered features", self.id)))
    }

    pub fn validate(&self, num_categories: usize) -> Result<()> {
        if self.boxes.len() != self.categories.len() {
            return Err(Error::invalid(format!(
                "sample {}: {} boxes but {} categories",
                self.id,
                self.boxes.len(),
                self.categories.len()
            )));
        }
        if let Some(b) = self.boxes.iter().find(|b| !b.inside(self.width, self.height)) {
            return Err(Error::invalid(format!("sample {}: box {b:?} outside the image", self.id)));
        }
        if let Some(c) = self.categories.iter().find(|&&c| c >= num_categories) {
            return Err(Error::invalid(format!("sample {}: category {c} out of range", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    /// Inclusive object-count range.
    pub count: (usize, usize),
    /// Inclusive box-side range in pixels; width and height are drawn independently.
    pub side: (f64, f64),
    /// Spread of object centres around a random cluster centre; `None` places
    /// centres uniformly over the image.
    pub cluster_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Square image side in pixels.
    pub image_size: f64,
    /// Token grid side.
    pub grid: usize,
    pub channels: usize,
    pub categories: Vec<String>,
    pub ground: RegimeConfig,
    pub aerial: RegimeConfig,
    /// Probability that an object keeps a category from the shared location set.
    pub consistency: f64,
    /// Largest size of the shared location category set.
    pub max_shared_categories: usize,
    pub noise_std: f64,
    pub embedding_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 256.0,
            grid: 16,
            channels: 32,
            categories: DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect(),
            ground: RegimeConfig {
                count: (5, 15),
                side: (24.0, 64.0),
                cluster_sigma: Some(24.0),
            },
            aerial: RegimeConfig {
                count: (20, 60),
                side: (6.0, 20.0),
                cluster_sigma: None,
            },
            consistency: 0.8,
            max_shared_categories: 4,
            noise_std: 0.05,
            embedding_seed: 0x5eed_cafe,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.image_size > 0.0) || self.grid == 0 {
            return bad("image size and grid must be positive".into());
        }
        if self.channels <= GEOMETRY_CHANNELS {
            return bad(format!("channels must exceed {GEOMETRY_CHANNELS}"));
        }
        if self.categories.is_empty() {
            return bad("at least one category is required".into());
        }
        if !(0.0..=1.0).contains(&self.consistency) {
            return bad(format!("consistency {} outside [0, 1]", self.consistency));
        }
        if self.max_shared_categories == 0 {
            return bad("max_shared_categories must be at least 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        for (name, r) in [("ground", &self.ground), ("aerial", &self.aerial)] {
            if r.count.0 > r.count.1 {
                return bad(format!("{name}: empty count range"));
            }
            if !(r.side.0 > 0.0 && r.side.0 <= r.side.1 && r.side.1 + 2.0 < self.image_size) {
                return bad(format!("{name}: side range must be positive and fit the image"));
            }
            if let Some(s) = r.cluster_sigma {
                if !(s > 0.0) {
                    return bad(format!("{name}: cluster_sigma must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        self.image_size / self.grid as f64
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    fn regime(&self, view: View) -> &RegimeConfig {
        match view {
            View::Ground => &self.ground,
            View::Aerial => &self.aerial,
        }
    }
}

/// Unit-norm embeddings of width `channels - 4`, one row per category, fixed
/// by `embedding_seed`.
pub fn category_embeddings(cfg: &GeneratorConfig) -> Array {
    let width = cfg.channels - GEOMETRY_CHANNELS;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.embedding_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(cfg.num_categories() * width);
    for _ in 0..cfg.num_categories() {
        let v: Vec<f64> = (0..width).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    Array::matrix(cfg.num_categories(), width, data).expect("consistent shape")
}

/// Mean of a unit-mass Gaussian `N(mu, sigma)` over `[lo, hi)`, scaled so
/// that an interval of the same width centred on `mu` gives 1.
fn cell_weight(mu: f64, sigma: f64, lo: f64, hi: f64) -> f64 {
    let s = sigma * std::f64::consts::SQRT_2;
    let mass = 0.5 * (erf((hi - mu) / s) - erf((lo - mu) / s));
    let half = 0.5 * (hi - lo);
    let peak = erf(half / s);
    mass / peak
}

fn render_object(cfg: &GeneratorConfig, emb: &Array, b: &BBox, cat: usize, out: &mut [f64]) {
    let g = cfg.grid;
    let cell = cfg.cell_size();
    let d = cfg.channels;
    let (cx, cy) = b.center();
    let (sx, sy) = (0.5 * b.w, 0.5 * b.h);
    let wx: Vec<f64> = (0..g)
        .map(|j| cell_weight(cx, sx, j as f64 * cell, (j + 1) as f64 * cell))
        .collect();
    let wy: Vec<f64> = (0..g)
        .map(|i| cell_weight(cy, sy, i as f64 * cell, (i + 1) as f64 * cell))
        .collect();
    let e = emb.row(cat);
    let lw = (b.w / cell).ln();
    let lh = (b.h / cell).ln();
    for i in 0..g {
        for j in 0..g {
            let a = wy[i] * wx[j];
            if a == 0.0 {
                continue;
            }
            let base = (i * g + j) * d;
            let row = &mut out[base..base + d];
            for (o, v) in row.iter_mut().zip(e) {
                *o += a * v;
            }
            let k = d - GEOMETRY_CHANNELS;
            row[k] += a * (cx / cell - (j as f64 + 0.5));
            row[k + 1] += a * (cy / cell - (i as f64 + 0.5));
            row[k + 2] += a * lw;
            row[k + 3] += a * lh;
        }
    }
}

/// Renders the feature grid for a set of labelled boxes. `noise_seed = None`
/// disables the noise term.
pub fn render_features(
    boxes: &[BBox],
    categories: &[usize],
    cfg: &GeneratorConfig,
    noise_seed: Option<u64>,
) -> Result<TokenGrid> {
    if boxes.len() != categories.len() {
        return Err(Error::invalid("boxes and categories differ in length"));
    }
    if let Some(b) = boxes.iter().find(|b| !b.is_valid()) {
        return Err(Error::invalid(format!("invalid box {b:?}")));
    }
    if categories.iter().any(|&c| c >= cfg.num_categories()) {
        return Err(Error::invalid("category out of range"));
    }
    let emb = category_embeddings(cfg);
    render_with_embeddings(boxes, categories, cfg, &emb, noise_seed)
}

pub(crate) fn render_with_embeddings(
    boxes: &[BBox],
    categories: &[usize],
    cfg: &GeneratorConfig,
    emb: &Array,
    noise_seed: Option<u64>,
) -> Result<TokenGrid> {
    let n = cfg.grid * cfg.grid;
    let mut data = vec![0.0; n * cfg.channels];
    for (b, &c) in boxes.iter().zip(categories) {
        render_object(cfg, emb, b, c, &mut data);
    }
    if let (Some(seed), true) = (noise_seed, cfg.noise_std > 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    TokenGrid::new(Array::matrix(n, cfg.channels, data)?, cfg.grid, cfg.grid)
}

fn draw_boxes(cfg: &GeneratorConfig, view: View, n: usize, rng: &mut impl Rng) -> Vec<BBox> {
    let r = cfg.regime(view);
    let size = cfg.image_size;
    let normal = r.cluster_sigma.map(|s| Normal::new(0.0, s).expect("validated sigma"));
    let centre = (
        rng.random_range(0.25 * size..0.75 * size),
        rng.random_range(0.25 * size..0.75 * size),
    );
    (0..n)
        .map(|_| {
            let w = rng.random_range(r.side.0..=r.side.1);
            let h = rng.random_range(r.side.0..=r.side.1);
            let (cx, cy) = match &normal {
                Some(nd) => (centre.0 + nd.sample(rng), centre.1 + nd.sample(rng)),
                None => (rng.random_range(0.0..size), rng.random_range(0.0..size)),
            };
            // Keep a one-pixel margin so every box lies strictly inside.
            let x = (cx - 0.5 * w).clamp(1.0, size - w - 1.0);
            let y = (cy - 0.5 * h).clamp(1.0, size - h - 1.0);
            BBox::new(x, y, w, h)
        })
        .collect()
}

fn draw_categories(cfg: &GeneratorConfig, shared: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let c = cfg.num_categories();
    (0..n)
        .map(|i| {
            // The first objects cover the shared set so that the set survives
            // whenever no object is resampled.
            let kept = if i < shared.len() {
                shared[i]
            } else {
                *shared.choose(rng).expect("non-empty shared set")
            };
            if rng.random::<f64>() < cfg.consistency {
                kept
            } else {
                rng.random_range(0..c)
            }
        })
        .collect()
}

fn draw_view(
    cfg: &GeneratorConfig,
    emb: &Array,
    view: View,
    pair_id: u64,
    shared: &[usize],
    rng: &mut impl Rng,
) -> Result<SceneSample> {
    let r = cfg.regime(view);
    let n = rng.random_range(r.count.0..=r.count.1);
    let boxes = draw_boxes(cfg, view, n, rng);
    let categories = draw_categories(cfg, shared, n, rng);
    let noise_seed = rng.random::<u64>();
    let features = render_with_embeddings(&boxes, &categories, cfg, emb, Some(noise_seed))?;
    Ok(SceneSample {
        id: image_id(pair_id, view),
        pair_id,
        view,
        width: cfg.image_size,
        height: cfg.image_size,
        boxes,
        categories,
        noise_seed,
        features: Some(features),
    })
}

/// Image id convention: `2 * pair_id` for ground, `2 * pair_id + 1` for aerial.
pub fn image_id(pair_id: u64, view: View) -> u64 {
    2 * pair_id
        + match view {
            View::Ground => 0,
            View::Aerial => 1,
        }
}

/// Draws one ground/aerial pair.
pub fn generate_pair(cfg: &GeneratorConfig, pair_id: u64, rng: &mut impl Rng) -> Result<(SceneSample, SceneSample)> {
    cfg.validate()?;
    let emb = category_embeddings(cfg);
    generate_pair_with(cfg, &emb, pair_id, rng)
}

pub(crate) fn generate_pair_with(
    cfg: &GeneratorConfig,
    emb: &Array,
    pair_id: u64,
    rng: &mut impl Rng,
) -> Result<(SceneSample, SceneSample)> {
    let c = cfg.num_categories();
    let min_count = cfg.ground.count.0.min(cfg.aerial.count.0).max(1);
    let k_max = cfg.max_shared_categories.min(c).min(min_count);
    let k = rng.random_range(1..=k_max);
    let all: Vec<usize> = (0..c).collect();
    let mut shared: Vec<usize> = all.choose_multiple(rng, k).copied().collect();
    shared.sort_unstable();
    let ground = draw_view(cfg, emb, View::Ground, pair_id, &shared, rng)?;
    let aerial = draw_view(cfg, emb, View::Aerial, pair_id, &shared, rng)?;
    Ok((ground, aerial))
}

/// Seed of the generator for pair `index` under `master_seed`.
pub fn pair_seed(master_seed: u64, index: u64) -> u64 {
    master_seed.wrapping_add(index)
}

/// Pairs `first_id .. first_id + count`, each from its own derived seed.
pub fn generate_pairs(
    cfg: &GeneratorConfig,
    master_seed: u64,
    first_id: u64,
    count: usize,
) -> Result<Vec<(SceneSample, SceneSample)>> {
    cfg.validate()?;
    let emb = category_embeddings(cfg);
    (0..count as u64)
        .map(|i| {
            let id = first_id + i;
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed(master_seed, id));
            generate_pair_with(cfg, &emb, id, &mut rng)
        })
        .collect()
}

/// Re-renders features for samples loaded from annotations alone.
pub fn attach_features(samples: &mut [SceneSample], cfg: &GeneratorConfig) -> Result<()> {
    let emb = category_embeddings(cfg);
    for s in samples.iter_mut() {
        s.validate(cfg.num_categories())?;
        s.features = Some(render_with_embeddings(&s.boxes, &s.categories, cfg, &emb, Some(s.noise_seed))?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GeneratorConfig {
        GeneratorConfig {
            noise_std: 0.0,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        GeneratorConfig::default().validate().unwrap();
        let mut c = GeneratorConfig::default();
        c.consistency = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let e = category_embeddings(&GeneratorConfig::default());
        assert_eq!(e.shape(), &[10, 28]);
        for r in 0..10 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_weight_is_one_at_centre() {
        assert!((cell_weight(8.0, 5.0, 0.0, 16.0) - 1.0).abs() < 1e-15);
        assert!(cell_weight(8.0, 5.0, 16.0, 32.0) < 1.0);
    }

    #[test]
    fn centred_object_peaks_at_centre_cell() {
        let cfg = quiet();
        // Centre (136, 136) sits in the middle of cell (8, 8).
        let b = BBox::new(136.0 - 16.0, 136.0 - 16.0, 32.0, 32.0);
        let grid = render_features(&[b], &[3], &cfg, None).unwrap();
        let emb = category_embeddings(&cfg);
        let k = (0..emb.cols()).max_by(|&a, &b| emb.get(3, a).abs().total_cmp(&emb.get(3, b).abs())).unwrap();
        let col: Vec<f64> = (0..grid.len()).map(|i| grid.tokens().get(i, k).abs()).collect();
        let arg = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(arg, 8 * 16 + 8);
        assert!((grid.tokens().get(arg, k) - emb.get(3, k)).abs() < 1e-12);
    }

    #[test]
    fn pair_shapes_and_tags() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, a) = generate_pair(&GeneratorConfig::default(), 7, &mut rng).unwrap();
        assert_eq!((g.view, a.view), (View::Ground, View::Aerial));
        assert_eq!((g.pair_id, a.pair_id), (7, 7));
        assert_eq!((g.id, a.id), (14, 15));
        g.validate(10).unwrap();
        a.validate(10).unwrap();
        assert_eq!(g.features().unwrap().tokens().shape(), &[256, 32]);
    }
}
