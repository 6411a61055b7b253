//! Training loop, checkpoint selection and the run record.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{batch_loss_var, infer, DetectorParams, DetectorShape, InferConfig, Model};
use crate::curriculum::{PairedDataset, Sampler, Schedule};
use crate::error::{Error, Result};
use crate::eval::{view_report, AreaBounds, EvalReport};
use crate::numerics::{checkpoint, AdamW, AdamWConfig, Graph};
use crate::pathways::{routing_trace, CpaCoefficients, CpaConfig, CpaParams, GateInit, RoutingTrace};
use crate::synth::{GuardedSplit, SceneSample, SelectionToken};

pub const RUN_RECORD_VERSION: u32 = 1;

// Independent random streams derived from the run seed.
const CPA_STREAM: u64 = 0xC0FF_EE00_0000_0001;
const SAMPLER_STREAM: u64 = 0x5A3B_1E00_0000_0002;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Cpa,
    Curriculum,
    Both,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Cpa, Mode::Curriculum, Mode::Both];

    pub fn uses_cpa(&self) -> bool {
        matches!(self, Mode::Cpa | Mode::Both)
    }

    pub fn uses_curriculum(&self) -> bool {
        matches!(self, Mode::Curriculum | Mode::Both)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Cpa => "cpa",
            Mode::Curriculum => "curriculum",
            Mode::Both => "both",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

/// Validation metric that drives checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    /// mAP on the aerial images of the validation split.
    Aerial,
    /// mAP over all validation images.
    Overall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Batches per epoch; defaults to one pass worth of training images.
    pub steps_per_epoch: Option<usize>,
    pub optimizer: AdamWConfig,
    pub coefficients: CpaCoefficients,
    pub t1: f64,
    pub t2: f64,
    pub estimator_hidden: Option<usize>,
    /// Scale of the estimator and gate output layers at init; 0 zeroes them.
    pub gate_init_scale: f64,
    pub regions: (usize, usize),
    pub selection: SelectionMetric,
    pub infer: InferConfig,
    pub area_bounds: AreaBounds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Both,
            seed: 42,
            epochs: 10,
            batch_size: 8,
            steps_per_epoch: None,
            optimizer: AdamWConfig::default(),
            coefficients: CpaCoefficients::default(),
            t1: 1.0 / 3.0,
            t2: 2.0 / 3.0,
            estimator_hidden: None,
            gate_init_scale: 0.01,
            regions: (2, 2),
            selection: SelectionMetric::Aerial,
            infer: InferConfig::default(),
            area_bounds: AreaBounds::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("batch size must be even and >= 2, got {}", self.batch_size)));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::invalid("steps_per_epoch must be positive"));
        }
        if !(self.gate_init_scale.is_finite() && self.gate_init_scale >= 0.0) {
            return Err(Error::invalid("gate_init_scale must be finite and non-negative"));
        }
        Schedule::new(self.t1, self.t2, 1)?;
        Ok(())
    }

    pub fn cpa_config(&self, channels: usize) -> CpaConfig {
        let mut c = CpaConfig::for_channels(channels);
        if let Some(h) = self.estimator_hidden {
            c.estimator_hidden = h;
        }
        c.regions = self.regions;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_detection_loss: f64,
    pub mean_aux_loss: Option<f64>,
    /// Fraction of draws that took a complete pair.
    pub paired_fraction: f64,
    /// Mean gate weights over training samples (sparse, medium, dense).
    pub mean_routing: Option<[f64; 3]>,
    pub val: EvalReport,
}

/// Routing on the validation split for the selected checkpoint.
pub type RoutingSummary = RoutingTrace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: TrainConfig,
    pub detector_parameters: usize,
    pub cpa_parameters: Option<usize>,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    /// SHA-256 of the selected checkpoint bytes.
    pub checkpoint_sha256: String,
    pub val: EvalReport,
    pub test: EvalReport,
    pub routing: Option<RoutingSummary>,
}

impl RunRecord {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// 1-based index of the first maximum.
pub fn select_epoch(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i + 1)
}

/// Runs inference on every sample and scores it.
pub fn evaluate(model: &DetectorParams, samples: &[SceneSample], cfg: &InferConfig, bounds: AreaBounds) -> Result<EvalReport> {
    let dets = samples
        .iter()
        .map(|s| infer(s, model, cfg))
        .collect::<Result<Vec<_>>>()?;
    view_report(samples, &dets, bounds)
}

fn selection_score(report: &EvalReport, metric: SelectionMetric) -> f64 {
    let v = match metric {
        SelectionMetric::Aerial => report.aerial.and_then(|a| a.map),
        SelectionMetric::Overall => report.overall.map,
    };
    v.unwrap_or(f64::NEG_INFINITY)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            detail: e.to_string(),
        },
        other => other,
    }
}


/// Trained model plus its run record.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: Model,
}

/// Fresh parameters drawn from the streams the trainer uses for `seed`.
pub fn init_model(shape: DetectorShape, cpa: Option<(CpaConfig, GateInit)>, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let detector = DetectorParams::init(shape, &mut rng);
    let cpa = cpa.map(|(cfg, gate)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CPA_STREAM);
        CpaParams::init(cfg, gate, &mut rng)
    });
    Model { detector, cpa }
}

/// Trains per `cfg`, selects the best validation epoch, and only then opens
/// the test split.
pub fn train(
    cfg: &TrainConfig,
    categories: usize,
    data: &PairedDataset,
    val: &[SceneSample],
    test: &GuardedSplit,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = data
        .flat()
        .first()
        .ok_or_else(|| Error::invalid("empty training set"))?;
    let channels = first.features()?.channels();
    let shape = DetectorShape { channels, categories };

    let gate = if cfg.gate_init_scale == 0.0 {
        GateInit::Neutral
    } else {
        GateInit::Near(cfg.gate_init_scale)
    };
    let Model { mut detector, mut cpa } = init_model(shape, cfg.mode.uses_cpa().then(|| (cfg.cpa_config(channels), gate)), cfg.seed);

    let steps_per_epoch = cfg
        .steps_per_epoch
        .unwrap_or_else(|| data.flat().len().div_ceil(cfg.batch_size));
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let schedule = if cfg.mode.uses_curriculum() {
        Some(Schedule::new(cfg.t1, cfg.t2, total_steps)?)
    } else {
        None
    };
    let mut sampler = Sampler::new(cfg.seed ^ SAMPLER_STREAM, schedule);
    let mut opt = AdamW::new(cfg.optimizer);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Model)> = None;
    for epoch in 1..=cfg.epochs {
        let (mut sum_loss, mut sum_det, mut sum_aux) = (0.0, 0.0, 0.0);
        let (mut paired, mut draws) = (0usize, 0usize);
        let mut routing_sum = [0.0; 3];
        let mut routing_n = 0usize;
        for step in 0..steps_per_epoch {
            let batch = sampler.next_batch(data, cfg.batch_size)?;
            paired += batch.paired_draws;
            draws += batch.draws();
            let samples = batch.samples(data);
            let mut g = Graph::new();
            let loss = batch_loss_var(
                &mut g,
                &samples,
                detector.store(),
                categories,
                cpa.as_ref().map(|c| (c, &cfg.coefficients)),
            )
            .map_err(|e| diverged(epoch, step, e))?;
            let total = g.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!("loss {total}"),
                });
            }
            sum_loss += total;
            sum_det += g.scalar(loss.detection);
            if let Some(a) = loss.aux {
                sum_aux += g.scalar(a);
            }
            for r in &loss.routing {
                for (acc, v) in routing_sum.iter_mut().zip(g.value(r.w).data()) {
                    *acc += v;
                }
                routing_n += 1;
            }
            let grads = g.backward(loss.total).map_err(|e| diverged(epoch, step, e))?.params();
            let mut stores = vec![detector.store_mut()];
            if let Some(c) = cpa.as_mut() {
                stores.push(c.store_mut());
            }
            opt.step(&mut stores, &grads)?;
        }

        let val_report = evaluate(&detector, val, &cfg.infer, cfg.area_bounds)?;
        let score = selection_score(&val_report, cfg.selection);
        let n = steps_per_epoch as f64;
        log::info!(
            "epoch {epoch}: loss {:.4}, val selection mAP {:.2}",
            sum_loss / n,
            score
        );
        epochs.push(EpochRecord {
            epoch,
            mean_loss: sum_loss / n,
            mean_detection_loss: sum_det / n,
            mean_aux_loss: cpa.as_ref().map(|_| sum_aux / n),
            paired_fraction: paired as f64 / draws as f64,
            mean_routing: (routing_n > 0).then(|| routing_sum.map(|v| v / routing_n as f64)),
            val: val_report,
        });
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((
                epoch,
                score,
                Model {
                    detector: detector.clone(),
                    cpa: cpa.clone(),
                },
            ));
        }
    }

    let (selected_epoch, _, model) = best.expect("at least one epoch");
    debug_assert_eq!(
        Some(selected_epoch),
        select_epoch(&epochs.iter().map(|e| selection_score(&e.val, cfg.selection)).collect::<Vec<_>>())
    );
    let bytes = checkpoint::encode(&super::checkpoint::to_store(&model, Some(selected_epoch))?);
    let checkpoint_sha256 = hex(&Sha256::digest(&bytes));

    let val_report = epochs[selected_epoch - 1].val.clone();
    let routing = match &model.cpa {
        Some(c) => Some(routing_trace(&model.detector, c, val)?),
        None => None,
    };

    // Selection is final; the test split may be read now.
    let token = SelectionToken::new(selected_epoch);
    let test_report = evaluate(&model.detector, test.open(&token), &cfg.infer, cfg.area_bounds)?;

    let record = RunRecord {
        format_version: RUN_RECORD_VERSION,
        config: cfg.clone(),
        detector_parameters: model.detector.store().scalar_count(),
        cpa_parameters: model.cpa.as_ref().map(|c| c.parameter_count()),
        steps_per_epoch,
        epochs,
        selected_epoch,
        checkpoint_sha256,
        val: val_report,
        test: test_report,
        routing,
    };
    Ok(TrainOutcome { record, model })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
