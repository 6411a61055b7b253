//! Grid-cell detector over rendered feature grids.
//!
//! A per-token two-layer encoder feeds two linear heads: class logits over
//! `C + 1` classes (background last) and four box offsets. The cell holding a
//! box centre is responsible for that box; offsets are the centre position
//! relative to the cell centre in cell units and log width/height in cell
//! units.

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{nms, Detection};
use crate::geometry::BBox;
use crate::numerics::{glorot, softmax, Array, Graph, ParamStore, Var};
use crate::pathways::{cpa_forward_var, CpaCoefficients, CpaConfig, CpaParams, CpaVars};
use crate::synth::SceneSample;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedModel};
pub use train::{
    evaluate, init_model, select_epoch, train, EpochRecord, Mode, RoutingSummary, RunRecord, SelectionMetric,
    TrainConfig, TrainOutcome, RUN_RECORD_VERSION,
};

pub(crate) mod names {
    pub const ENC_W1: &str = "det.enc.w1";
    pub const ENC_B1: &str = "det.enc.b1";
    pub const ENC_W2: &str = "det.enc.w2";
    pub const ENC_B2: &str = "det.enc.b2";
    pub const TEXT_EMB: &str = "det.text.emb";
    pub const CLS_W: &str = "det.head.cls.w";
    pub const CLS_B: &str = "det.head.cls.b";
    pub const BOX_W: &str = "det.head.box.w";
    pub const BOX_B: &str = "det.head.box.b";
}

/// Log-size predictions are clamped to this magnitude before decoding.
const MAX_LOG_SIZE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorShape {
    pub channels: usize,
    pub categories: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    shape: DetectorShape,
    store: ParamStore,
}

impl DetectorParams {
    /// Random encoder and text table; zero heads, so an untrained model
    /// predicts background everywhere.
    pub fn init(shape: DetectorShape, rng: &mut impl Rng) -> Self {
        use names::*;
        let d = shape.channels;
        let c = shape.categories;
        let mut s = ParamStore::new();
        s.insert(ENC_W1, glorot(rng, d, d));
        s.insert(ENC_B1, Array::zeros(&[d]));
        s.insert(ENC_W2, glorot(rng, d, d));
        s.insert(ENC_B2, Array::zeros(&[d]));
        s.insert(TEXT_EMB, glorot(rng, c, d));
        s.insert(CLS_W, Array::zeros(&[d, c + 1]));
        s.insert(CLS_B, Array::zeros(&[c + 1]));
        s.insert(BOX_W, Array::zeros(&[d, 4]));
        s.insert(BOX_B, Array::zeros(&[4]));
        let p = Self { shape, store: s };
        log::info!("detector: {} parameters", p.store.scalar_count());
        p
    }

    /// Derives the shape from the stored tensors and validates every block.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let emb = store.require(names::TEXT_EMB)?;
        if emb.ndim() != 2 {
            return Err(Error::shape("detector_params", "text embedding must be 2-D"));
        }
        let shape = DetectorShape {
            channels: emb.cols(),
            categories: emb.rows(),
        };
        let (d, c) = (shape.channels, shape.categories);
        let expected: [(&str, Vec<usize>); 9] = [
            (names::ENC_W1, vec![d, d]),
            (names::ENC_B1, vec![d]),
            (names::ENC_W2, vec![d, d]),
            (names::ENC_B2, vec![d]),
            (names::TEXT_EMB, vec![c, d]),
            (names::CLS_W, vec![d, c + 1]),
            (names::CLS_B, vec![c + 1]),
            (names::BOX_W, vec![d, 4]),
            (names::BOX_B, vec![4]),
        ];
        for (name, shape) in &expected {
            let a = store.require(name)?;
            if a.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "detector_params",
                    format!("{name}: expected {shape:?}, got {:?}", a.shape()),
                ));
            }
        }
        if store.len() != expected.len() {
            return Err(Error::invalid("detector store holds unexpected entries"));
        }
        Ok(Self { shape, store })
    }

    pub fn shape(&self) -> DetectorShape {
        self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn text_embeddings(&self) -> &Array {
        self.store.get(names::TEXT_EMB).expect("validated")
    }
}

/// Inference settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Score detections by head probability instead of a uniform 1.0.
    pub scored: bool,
    pub nms_threshold: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            scored: false,
            nms_threshold: 0.5,
        }
    }
}

pub(crate) fn encode_var(g: &mut Graph, x: Var, store: &ParamStore) -> Result<Var> {
    let w1 = g.param(store, names::ENC_W1)?;
    let b1 = g.param(store, names::ENC_B1)?;
    let w2 = g.param(store, names::ENC_W2)?;
    let b2 = g.param(store, names::ENC_B2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h)?;
    let t = g.matmul(h, w2)?;
    g.add_bias(t, b2)
}

pub(crate) fn heads_var(g: &mut Graph, tokens: Var, store: &ParamStore) -> Result<(Var, Var)> {
    let cw = g.param(store, names::CLS_W)?;
    let cb = g.param(store, names::CLS_B)?;
    let bw = g.param(store, names::BOX_W)?;
    let bb = g.param(store, names::BOX_B)?;
    let logits = g.matmul(tokens, cw)?;
    let logits = g.add_bias(logits, cb)?;
    let boxes = g.matmul(tokens, bw)?;
    let boxes = g.add_bias(boxes, bb)?;
    Ok((logits, boxes))
}

/// Encoder output tokens for one sample.
pub fn encode(sample: &SceneSample, params: &DetectorParams) -> Result<Array> {
    let mut g = Graph::new();
    let x = g.constant(sample.features()?.tokens().clone());
    let t = encode_var(&mut g, x, params.store())?;
    Ok(g.value(t).clone())
}

/// Cell geometry shared by target assignment and decoding.
#[derive(Clone, Copy, Debug)]
struct CellGrid {
    rows: usize,
    cols: usize,
    cell_w: f64,
    cell_h: f64,
}

impl CellGrid {
    fn of(sample: &SceneSample) -> Result<Self> {
        let f = sample.features()?;
        Ok(Self {
            rows: f.grid_h(),
            cols: f.grid_w(),
            cell_w: sample.width / f.grid_w() as f64,
            cell_h: sample.height / f.grid_h() as f64,
        })
    }

    fn cell_of(&self, b: &BBox) -> usize {
        let (cx, cy) = b.center();
        let j = ((cx / self.cell_w).floor() as isize).clamp(0, self.cols as isize - 1) as usize;
        let i = ((cy / self.cell_h).floor() as isize).clamp(0, self.rows as isize - 1) as usize;
        i * self.cols + j
    }

    fn encode_box(&self, cell: usize, b: &BBox) -> [f64; 4] {
        let (i, j) = (cell / self.cols, cell % self.cols);
        let (cx, cy) = b.center();
        [
            cx / self.cell_w - (j as f64 + 0.5),
            cy / self.cell_h - (i as f64 + 0.5),
            (b.w / self.cell_w).ln(),
            (b.h / self.cell_h).ln(),
        ]
    }

    fn decode_box(&self, cell: usize, o: &[f64], width: f64, height: f64) -> Option<BBox> {
        let (i, j) = (cell / self.cols, cell % self.cols);
        let cx = (j as f64 + 0.5 + o[0]) * self.cell_w;
        let cy = (i as f64 + 0.5 + o[1]) * self.cell_h;
        let w = o[2].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * self.cell_w;
        let h = o[3].clamp(-MAX_LOG_SIZE, MAX_LOG_SIZE).exp() * self.cell_h;
        let x0 = (cx - 0.5 * w).max(0.0);
        let y0 = (cy - 0.5 * h).max(0.0);
        let x1 = (cx + 0.5 * w).min(width);
        let y1 = (cy + 0.5 * h).min(height);
        let b = BBox::new(x0, y0, x1 - x0, y1 - y0);
        (b.is_valid() && b.inside(width, height)).then_some(b)
    }
}

/// Per-cell training targets: class index (background = `C`) and, for
/// positive cells, box offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets {
    pub classes: Vec<usize>,
    pub positive_cells: Vec<usize>,
    pub offsets: Vec<[f64; 4]>,
}

/// Centre-cell assignment; when several boxes share a cell the lowest
/// object index wins.
pub fn assign_targets(sample: &SceneSample, categories: usize) -> Result<Targets> {
    let grid = CellGrid::of(sample)?;
    let n = grid.rows * grid.cols;
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for (k, b) in sample.boxes.iter().enumerate() {
        let cell = grid.cell_of(b);
        if owner[cell].is_none() {
            owner[cell] = Some(k);
        }
    }
    let mut classes = vec![categories; n];
    let mut positive_cells = Vec::new();
    let mut offsets = Vec::new();
    for (cell, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            let c = sample.categories[k];
            if c >= categories {
                return Err(Error::invalid(format!("category {c} out of range")));
            }
            classes[cell] = c;
            positive_cells.push(cell);
            offsets.push(grid.encode_box(cell, &sample.boxes[k]));
        }
    }
    Ok(Targets {
        classes,
        positive_cells,
        offsets,
    })
}

/// Detection loss of one sample: mean cross-entropy over cells plus the L1
/// box error summed over coordinates and averaged over positive cells.
pub(crate) fn detection_loss_var(
    g: &mut Graph,
    sample: &SceneSample,
    store: &ParamStore,
    categories: usize,
) -> Result<(Var, Var)> {
    let x = g.constant(sample.features()?.tokens().clone());
    let tokens = encode_var(g, x, store)?;
    let (logits, boxes) = heads_var(g, tokens, store)?;
    let targets = assign_targets(sample, categories)?;
    let ce = g.cross_entropy(logits, targets.classes)?;
    let loss = if targets.positive_cells.is_empty() {
        ce
    } else {
        let p = targets.positive_cells.len();
        let pred = g.gather_rows(boxes, targets.positive_cells)?;
        let flat: Vec<f64> = targets.offsets.iter().flatten().copied().collect();
        let tgt = g.constant(Array::matrix(p, 4, flat)?);
        let diff = g.sub(pred, tgt)?;
        let abs = g.abs(diff)?;
        let l1 = g.sum_all(abs)?;
        let l1 = g.scale(l1, 1.0 / p as f64)?;
        g.add(ce, l1)?
    };
    Ok((loss, tokens))
}

/// Graph nodes of one batch loss.
pub(crate) struct BatchLoss {
    pub total: Var,
    pub detection: Var,
    pub aux: Option<Var>,
    pub routing: Vec<CpaVars>,
}

/// Mean over the batch of detection loss plus, when `cpa` is given, the
/// per-sample auxiliary loss, minus `balance * H(mean routing weights)`.
pub(crate) fn batch_loss_var(
    g: &mut Graph,
    batch: &[&SceneSample],
    det: &ParamStore,
    categories: usize,
    cpa: Option<(&CpaParams, &CpaCoefficients)>,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut det_terms = Vec::with_capacity(batch.len());
    let mut aux_terms = Vec::new();
    let mut routing = Vec::new();
    for s in batch {
        let (loss, tokens) = detection_loss_var(g, s, det, categories)?;
        det_terms.push(loss);
        if let Some((params, coeffs)) = cpa {
            let f = s.features()?;
            let text = g.param(det, names::TEXT_EMB)?;
            let (vars, aux) = cpa_forward_var(
                g,
                tokens,
                (f.grid_h(), f.grid_w()),
                text,
                params.config(),
                params.store(),
                coeffs,
            )?;
            aux_terms.push(aux);
            routing.push(vars);
        }
    }
    let mean_of = |g: &mut Graph, terms: &[Var]| -> Result<Var> {
        let stacked = g.concat(terms)?;
        let s = g.sum_all(stacked)?;
        g.scale(s, scale)
    };
    let detection = mean_of(g, &det_terms)?;
    let mut total = detection;
    let mut aux = None;
    if let Some((_, coeffs)) = cpa {
        let a = mean_of(g, &aux_terms)?;
        total = g.add(total, a)?;
        aux = Some(a);
        if coeffs.balance != 0.0 {
            let ws: Vec<Var> = routing.iter().map(|r| r.w).collect();
            let stacked = g.stack_rows(&ws)?;
            let mean_w = g.mean(stacked, 0)?;
            let h = g.entropy(mean_w)?;
            let h = g.scale(h, -coeffs.balance)?;
            total = g.add(total, h)?;
        }
    }
    Ok(BatchLoss {
        total,
        detection,
        aux,
        routing,
    })
}

/// Scalar training loss of a batch; CPA terms are included iff `cpa` is given.
pub fn forward_train(
    batch: &[&SceneSample],
    det: &DetectorParams,
    cpa: Option<(&CpaParams, &CpaCoefficients)>,
) -> Result<f64> {
    let mut g = Graph::new();
    let loss = batch_loss_var(&mut g, batch, det.store(), det.shape().categories, cpa)?;
    Ok(g.scalar(loss.total))
}

/// Batch training loss as a graph node, with detector and pathway tensors
/// read by name from one merged store. Lets the whole model be checked by
/// `grad_check` in a single pass.
pub fn training_loss_var(
    g: &mut Graph,
    batch: &[&SceneSample],
    store: &ParamStore,
    categories: usize,
    cpa: Option<(CpaConfig, &CpaCoefficients)>,
) -> Result<Var> {
    let cpa = cpa
        .map(|(cfg, coeffs)| CpaParams::from_store(cfg, store.with_prefix("cpa.")).map(|p| (p, coeffs)))
        .transpose()?;
    let loss = batch_loss_var(g, batch, store, categories, cpa.as_ref().map(|(p, c)| (p, *c)))?;
    Ok(loss.total)
}

/// Detections for one sample. Depends only on the sample and the detector
/// parameters.
pub fn infer(sample: &SceneSample, params: &DetectorParams, cfg: &InferConfig) -> Result<Vec<Detection>> {
    let grid = CellGrid::of(sample)?;
    let mut g = Graph::new();
    let x = g.constant(sample.features()?.tokens().clone());
    let tokens = encode_var(&mut g, x, params.store())?;
    let (logits, boxes) = heads_var(&mut g, tokens, params.store())?;
    let logits = g.value(logits);
    let boxes = g.value(boxes);
    let bg = params.shape().categories;
    let probs = if cfg.scored { Some(softmax(logits, 1)?) } else { None };

    let mut dets = Vec::new();
    for cell in 0..logits.rows() {
        let row = logits.row(cell);
        // Lowest index wins ties; a class must strictly beat background.
        let (best, &best_logit) = row[..bg]
            .iter()
            .enumerate()
            .fold((0, &row[0]), |acc, (k, v)| if *v > *acc.1 { (k, v) } else { acc });
        if best_logit <= row[bg] {
            continue;
        }
        let Some(bbox) = grid.decode_box(cell, boxes.row(cell), sample.width, sample.height) else {
            continue;
        };
        let score = probs.as_ref().map_or(1.0, |p| p.get(cell, best));
        if score > 0.0 {
            dets.push(Detection {
                bbox,
                category: best,
                score,
            });
        }
    }
    Ok(nms(&dets, cfg.nms_threshold))
}

/// A detector with optional training-time pathway parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub detector: DetectorParams,
    pub cpa: Option<CpaParams>,
}

impl Model {
    pub fn infer(&self, sample: &SceneSample, cfg: &InferConfig) -> Result<Vec<Detection>> {
        infer(sample, &self.detector, cfg)
    }
}
