//! Paired sampling schedule and the batch sampler that follows it.
//!
//! `p_pair(t)` is 1 before `T1`, decays linearly to 0 between `T1` and `T2`,
//! and stays 0 afterwards. Each batch is filled two samples at a time: with
//! probability `p_pair(t)` both views of one random pair, otherwise two
//! independent uniform draws over all training images. `t` counts batches.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{SceneSample, View};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub t1: f64,
    pub t2: f64,
    pub total_steps: u64,
}

impl Schedule {
    /// `t1 == t2` is accepted and gives a step function.
    pub fn new(t1: f64, t2: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&t1) || !(t2 > 0.0 && t2 <= 1.0) || t1 > t2 {
            return Err(Error::invalid(format!(
                "schedule needs 0 <= t1 <= t2 <= 1 with t1 < 1 and t2 > 0, got t1={t1}, t2={t2}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self { t1, t2, total_steps })
    }

    pub fn default_for(total_steps: u64) -> Result<Self> {
        Self::new(1.0 / 3.0, 2.0 / 3.0, total_steps)
    }

    /// `(T1, T2)` in steps.
    pub fn boundaries(&self) -> (f64, f64) {
        let n = self.total_steps as f64;
        (self.t1 * n, self.t2 * n)
    }

    pub fn p_pair(&self, t: f64) -> Result<f64> {
        p_pair(t, self)
    }
}

pub fn p_pair(t: f64, s: &Schedule) -> Result<f64> {
    if !(0.0..=s.total_steps as f64).contains(&t) {
        return Err(Error::invalid(format!(
            "step {t} outside [0, {}]",
            s.total_steps
        )));
    }
    let (b1, b2) = s.boundaries();
    Ok(if t < b1 {
        1.0
    } else if t >= b2 {
        0.0
    } else {
        1.0 - (t - b1) / (b2 - b1)
    })
}

/// Training samples grouped into ground/aerial pairs.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    samples: Vec<SceneSample>,
    pairs: Vec<(usize, usize)>,
}

impl PairedDataset {
    /// Groups samples by pair id. Every pair must have exactly one ground and
    /// one aerial member.
    pub fn new(samples: Vec<SceneSample>) -> Result<Self> {
        let mut by_pair: BTreeMap<u64, (Option<usize>, Option<usize>)> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            let slot = by_pair.entry(s.pair_id).or_default();
            let target = match s.view {
                View::Ground => &mut slot.0,
                View::Aerial => &mut slot.1,
            };
            if target.replace(i).is_some() {
                return Err(Error::invalid(format!(
                    "pair {} has two {} samples",
                    s.pair_id, s.view
                )));
            }
        }
        let pairs = by_pair
            .into_iter()
            .map(|(id, slot)| match slot {
                (Some(g), Some(a)) => Ok((g, a)),
                _ => Err(Error::invalid(format!("pair {id} is missing a view"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, pairs })
    }

    /// All individual samples in input order.
    pub fn flat(&self) -> &[SceneSample] {
        &self.samples
    }

    /// `(ground, aerial)` indices into `flat`, ordered by pair id.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair(&self, i: usize) -> (&SceneSample, &SceneSample) {
        let (g, a) = self.pairs[i];
        (&self.samples[g], &self.samples[a])
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Indices into `PairedDataset::flat`, two per draw.
    pub indices: Vec<usize>,
    /// Draws that took a complete pair.
    pub paired_draws: usize,
    /// Step at which the batch was drawn.
    pub step: u64,
}

impl Batch {
    pub fn samples<'a>(&self, data: &'a PairedDataset) -> Vec<&'a SceneSample> {
        self.indices.iter().map(|&i| &data.flat()[i]).collect()
    }

    pub fn draws(&self) -> usize {
        self.indices.len() / 2
    }
}

/// Seeded batch sampler. Without a schedule every draw is uniform.
#[derive(Clone, Debug)]
pub struct Sampler {
    rng: ChaCha8Rng,
    step: u64,
    schedule: Option<Schedule>,
}

impl Sampler {
    pub fn new(seed: u64, schedule: Option<Schedule>) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            schedule,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        self.schedule.as_ref()
    }

    /// Paired-draw probability at the current step. Steps past the schedule
    /// end are clamped to its last value.
    pub fn current_p(&self) -> Result<f64> {
        match &self.schedule {
            None => Ok(0.0),
            Some(s) => s.p_pair(self.step.min(s.total_steps) as f64),
        }
    }

    pub fn next_batch(&mut self, data: &PairedDataset, batch_size: usize) -> Result<Batch> {
        if batch_size < 2 || !batch_size.is_multiple_of(2) {
            return Err(Error::invalid(format!("batch size must be even and >= 2, got {batch_size}")));
        }
        if data.is_empty() {
            return Err(Error::invalid("cannot sample from an empty dataset"));
        }
        let p = self.current_p()?;
        let n = data.flat().len();
        let mut indices = Vec::with_capacity(batch_size);
        let mut paired_draws = 0;
        for _ in 0..batch_size / 2 {
            // Always consume the coin so that the stream layout does not depend on p.
            let u: f64 = self.rng.random();
            if u < p {
                let (g, a) = data.pairs()[self.rng.random_range(0..data.len())];
                indices.extend([g, a]);
                paired_draws += 1;
            } else {
                indices.push(self.rng.random_range(0..n));
                indices.push(self.rng.random_range(0..n));
            }
        }
        let batch = Batch {
            indices,
            paired_draws,
            step: self.step,
        };
        self.step += 1;
        Ok(batch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub t1: f64,
    pub t2: f64,
    pub val_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    /// Largest minus smallest validation mAP across cells.
    pub fn spread(&self) -> f64 {
        let max = self.cells.iter().map(|c| c.val_map).fold(f64::NEG_INFINITY, f64::max);
        let min = self.cells.iter().map(|c| c.val_map).fold(f64::INFINITY, f64::min);
        max - min
    }
}

pub const DEFAULT_SWEEP_T1: [f64; 3] = [0.23, 0.33, 0.43];
pub const DEFAULT_SWEEP_T2: [f64; 3] = [0.57, 0.67, 0.77];

/// Runs `train_fn(t1, t2)` for every grid cell in row-major order and
/// collects the returned validation mAP.
pub fn sensitivity_sweep<F>(t1s: &[f64], t2s: &[f64], mut train_fn: F) -> Result<SweepTable>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    let mut cells = Vec::with_capacity(t1s.len() * t2s.len());
    for &t1 in t1s {
        for &t2 in t2s {
            // Validate the cell before spending a training run on it.
            Schedule::new(t1, t2, 1)?;
            cells.push(SweepCell {
                t1,
                t2,
                val_map: train_fn(t1, t2)?,
            });
        }
    }
    Ok(SweepTable { cells })
}
