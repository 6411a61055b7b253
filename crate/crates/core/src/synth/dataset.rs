//! On-disk dataset directories.
//!
//! ```text
//! <root>/manifest.json   generator config, master seed, split sizes
//! <root>/train.json      COCO document per split
//! <root>/val.json
//! <root>/test.json
//! ```
//!
//! Pair ids run consecutively through train, val and test; pair `i` is drawn
//! from seed `master_seed + i`, so any split can be regenerated alone.
//! Features are not stored; they are re-rendered from each image's noise
//! seed on load.

use std::cell::Cell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::coco::{read_document, save_coco};
use super::{attach_features, generate_pairs, GeneratorConfig, SceneSample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 400,
            val: 50,
            test: 150,
        }
    }
}

impl SplitSizes {
    /// Divides `total` pairs in the default 8:1:3 proportion, keeping at
    /// least one pair in every split.
    pub fn proportional(total: usize) -> Result<Self> {
        if total < 3 {
            return Err(Error::invalid(format!("need at least 3 pairs, got {total}")));
        }
        let d = Self::default();
        let sum = (d.train + d.val + d.test) as f64;
        let val = ((total as f64 * d.val as f64 / sum).round() as usize).max(1);
        let test = ((total as f64 * d.test as f64 / sum).round() as usize).max(1);
        let train = total
            .checked_sub(val + test)
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::invalid(format!("cannot split {total} pairs")))?;
        Ok(Self { train, val, test })
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(&self) -> &'static str {
        match self {
            Split::Train => "train.json",
            Split::Val => "val.json",
            Split::Test => "test.json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub splits: SplitSizes,
    pub generator: GeneratorConfig,
}

impl DatasetManifest {
    fn first_pair(&self, split: Split) -> u64 {
        match split {
            Split::Train => 0,
            Split::Val => self.splits.train as u64,
            Split::Test => (self.splits.train + self.splits.val) as u64,
        }
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        }
    }

    /// Generates one split in memory.
    pub fn generate_split(&self, split: Split) -> Result<Vec<SceneSample>> {
        let pairs = generate_pairs(&self.generator, self.master_seed, self.first_pair(split), self.count(split))?;
        Ok(pairs.into_iter().flat_map(|(g, a)| [g, a]).collect())
    }
}

/// Writes a dataset directory. `out` must be absent or empty unless `force`.
pub fn generate_dataset(
    cfg: &GeneratorConfig,
    master_seed: u64,
    sizes: SplitSizes,
    out: &Path,
    force: bool,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    prepare_dir(out, force)?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        master_seed,
        splits: sizes,
        generator: cfg.clone(),
    };
    for split in [Split::Train, Split::Val, Split::Test] {
        let samples = manifest.generate_split(split)?;
        save_coco(&samples, &cfg.categories, &out.join(split.file_name()))?;
    }
    let path = out.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub(crate) fn prepare_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = std::fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "{} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// Proof that checkpoint selection has finished; required to read test labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionToken {
    selected_epoch: usize,
}

impl SelectionToken {
    pub(crate) fn new(selected_epoch: usize) -> Self {
        Self { selected_epoch }
    }

    pub fn selected_epoch(&self) -> usize {
        self.selected_epoch
    }
}

/// Test samples behind a selection token, with a read counter for audits.
#[derive(Debug)]
pub struct GuardedSplit {
    samples: Vec<SceneSample>,
    reads: Cell<usize>,
}

impl GuardedSplit {
    pub fn new(samples: Vec<SceneSample>) -> Self {
        Self {
            samples,
            reads: Cell::new(0),
        }
    }

    pub fn open(&self, _token: &SelectionToken) -> &[SceneSample] {
        self.reads.set(self.reads.get() + 1);
        &self.samples
    }

    /// Number of times the labels have been handed out.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Read access to a dataset directory.
#[derive(Debug)]
pub struct SplitAccess {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl SplitAccess {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported dataset format {}",
                manifest.format_version
            )));
        }
        manifest.generator.validate()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn read(&self, split: Split) -> Result<Vec<SceneSample>> {
        let doc = read_document(&self.root.join(split.file_name()))?;
        let mut samples = doc.to_samples()?;
        attach_features(&mut samples, &self.manifest.generator)?;
        Ok(samples)
    }

    /// Train or validation samples with rendered features.
    pub fn load(&self, split: Split) -> Result<Vec<SceneSample>> {
        if split == Split::Test {
            return Err(Error::invalid("test labels are only available through load_test_guarded"));
        }
        self.read(split)
    }

    pub fn load_test_guarded(&self) -> Result<GuardedSplit> {
        Ok(GuardedSplit::new(self.read(Split::Test)?))
    }
}

/// Loads `(train, val, guarded test)` from a dataset directory.
pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<SceneSample>, Vec<SceneSample>, GuardedSplit)> {
    let access = SplitAccess::open(root)?;
    let train = access.load(Split::Train)?;
    let val = access.load(Split::Val)?;
    let test = access.load_test_guarded()?;
    Ok((access.manifest.clone(), train, val, test))
}
