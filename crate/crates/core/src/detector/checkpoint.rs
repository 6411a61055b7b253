//! Model checkpoints.
//!
//! Detector tensors live under `det.`, pathway tensors under `cpa.`. Two
//! metadata entries ride along: `meta.cpa.regions` (the medium-pathway region
//! grid, present iff pathway tensors are) and `meta.selected_epoch` (present
//! for checkpoints written after validation-based selection).

use std::path::Path;

use super::{DetectorParams, Model};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, Array, ParamStore};
use crate::pathways::{names as cpa_names, CpaConfig, CpaParams};
use crate::synth::SelectionToken;

const META_REGIONS: &str = "meta.cpa.regions";
const META_SELECTED: &str = "meta.selected_epoch";

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel {
    pub model: Model,
    pub selected_epoch: Option<usize>,
}

impl LoadedModel {
    /// Test-split access for checkpoints that went through selection.
    pub fn selection_token(&self) -> Option<SelectionToken> {
        self.selected_epoch.map(SelectionToken::new)
    }
}

pub(crate) fn to_store(model: &Model, selected_epoch: Option<usize>) -> Result<ParamStore> {
    let mut store = model.detector.store().clone();
    if let Some(c) = &model.cpa {
        store = store.merged(c.store())?;
        let (rh, rw) = c.config().regions;
        store.insert(META_REGIONS, Array::vector(&[rh as f64, rw as f64]));
    }
    if let Some(e) = selected_epoch {
        store.insert(META_SELECTED, Array::vector(&[e as f64]));
    }
    Ok(store)
}

fn meta_usize(a: &Array, name: &str) -> Result<Vec<usize>> {
    a.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::Checkpoint(format!("{name}: expected non-negative integers")))
            }
        })
        .collect()
}

pub(crate) fn from_store(store: &ParamStore) -> Result<LoadedModel> {
    let unknown: Vec<&String> = store
        .names()
        .filter(|n| !(n.starts_with("det.") || n.starts_with("cpa.") || n.starts_with("meta.")))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Checkpoint(format!("unknown entries {unknown:?}")));
    }
    let detector = DetectorParams::from_store(store.with_prefix("det."))?;
    let cpa_store = store.with_prefix("cpa.");
    let cpa = if cpa_store.is_empty() {
        None
    } else {
        let regions = store
            .get(META_REGIONS)
            .ok_or_else(|| Error::Checkpoint(format!("missing {META_REGIONS}")))
            .and_then(|a| meta_usize(a, META_REGIONS))?;
        let [rh, rw] = regions[..] else {
            return Err(Error::Checkpoint(format!("{META_REGIONS} must hold two values")));
        };
        let est = cpa_store.require(cpa_names::EST_W1)?;
        let align = cpa_store.require(cpa_names::ALIGN_W)?;
        let cfg = CpaConfig {
            channels: detector.shape().channels,
            estimator_hidden: est.shape().get(1).copied().unwrap_or(0),
            align_dim: align.shape().get(1).copied().unwrap_or(0),
            regions: (rh, rw),
        };
        Some(CpaParams::from_store(cfg, cpa_store)?)
    };
    let selected_epoch = match store.get(META_SELECTED) {
        Some(a) => match meta_usize(a, META_SELECTED)?[..] {
            [e] => Some(e),
            _ => return Err(Error::Checkpoint(format!("{META_SELECTED} must hold one value"))),
        },
        None => None,
    };
    Ok(LoadedModel {
        model: Model { detector, cpa },
        selected_epoch,
    })
}

pub fn save_checkpoint(path: &Path, model: &Model, selected_epoch: Option<usize>) -> Result<()> {
    checkpoint::save(&to_store(model, selected_epoch)?, path)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    from_store(&checkpoint::load(path)?)
}
