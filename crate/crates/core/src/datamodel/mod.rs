//! Semi-paired multimodal datasets: in-memory representation, split
//! planning, the synthetic generator and the on-disk format.

mod io;
mod splits;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{decode_f32_plane, decode_mask_planes, load_dataset, save_dataset, Manifest, ManifestRecord};
pub use splits::{plan_splits, SplitCounts};
pub use synth::{synth_generate, ContentField, ModalityStyle, SynthOracle, SynthSpec, TumorGeometry};

/// Default modality names, in the order used throughout the crate.
pub const DEFAULT_MODALITIES: [&str; 4] = ["T1ce", "T1", "T2", "Flair"];
/// Default target regions. WT contains TC.
pub const DEFAULT_REGIONS: [&str; 2] = ["WT", "TC"];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub index: usize,
    pub name: String,
}

impl ModalityId {
    pub fn new(index: usize, name: impl Into<String>) -> Self {
        Self {
            index,
            name: name.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One image of one modality. Pixel values are in `[-1, 1]`; the mask has
/// one binary plane per target region.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub modality: ModalityId,
    pub image: Array2<f32>,
    pub mask: Option<Array3<u8>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.nrows()
    }

    pub fn width(&self) -> usize {
        self.image.ncols()
    }

    /// Checks the shape and range invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(mask) = &self.mask {
            let (_, h, w) = mask.dim();
            if (h, w) != self.image.dim() {
                return Err(Error::subject(
                    &self.subject_id,
                    format!("mask is {h}x{w} but image is {:?}", self.image.dim()),
                ));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::subject(&self.subject_id, "mask values outside {0,1}"));
            }
        }
        for &v in self.image.iter() {
            if !v.is_finite() {
                return Err(Error::subject(&self.subject_id, "non-finite pixel"));
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::subject(&self.subject_id, format!("pixel {v} outside [-1,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub available_modalities: BTreeSet<usize>,
    pub paired: bool,
    pub split: Split,
}

impl SubjectRecord {
    pub fn validate(&self, n_modalities: usize) -> Result<()> {
        let n = self.available_modalities.len();
        if let Some(&m) = self.available_modalities.iter().find(|&&m| m >= n_modalities) {
            return Err(Error::subject(
                &self.subject_id,
                format!("modality index {m} out of range for M={n_modalities}"),
            ));
        }
        if self.paired {
            if n < 2 {
                return Err(Error::subject(&self.subject_id, "paired subject needs at least two modalities"));
            }
            if self.split != Split::Train {
                return Err(Error::subject(&self.subject_id, "only training subjects may be paired"));
            }
        } else if n != 1 {
            return Err(Error::subject(
                &self.subject_id,
                format!("unpaired subject must have exactly one modality, has {n}"),
            ));
        }
        Ok(())
    }
}

/// A partitioned semi-paired collection of 2D samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SemiPairedDataset {
    pub records: Vec<SubjectRecord>,
    pub samples: BTreeMap<(String, usize), Sample>,
    pub height: usize,
    pub width: usize,
    pub modality_names: Vec<String>,
    pub region_names: Vec<String>,
    /// Analytic ground truth, present for synthetic datasets.
    pub oracle: Option<SynthOracle>,
    /// Hash of the configuration that produced this dataset.
    pub config_hash: String,
}

impl SemiPairedDataset {
    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn n_regions(&self) -> usize {
        self.region_names.len()
    }

    pub fn modality(&self, index: usize) -> Result<ModalityId> {
        self.modality_names
            .get(index)
            .map(|n| ModalityId::new(index, n.clone()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality index {index}")))
    }

    pub fn sample(&self, subject: &str, modality: usize) -> Option<&Sample> {
        self.samples.get(&(subject.to_string(), modality))
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SubjectRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// All samples of a split, in record order then modality order.
    pub fn samples_in(&self, split: Split) -> Vec<&Sample> {
        self.records_in(split)
            .flat_map(|r| {
                r.available_modalities
                    .iter()
                    .filter_map(move |&m| self.sample(&r.subject_id, m))
            })
            .collect()
    }

    /// Per-modality sample counts for a split.
    pub fn modality_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_modalities()];
        for r in self.records_in(split) {
            for &m in &r.available_modalities {
                counts[m] += 1;
            }
        }
        counts
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        let m = self.n_modalities();
        if m == 0 {
            return Err(Error::Manifest("dataset has no modalities".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::subject(&r.subject_id, "duplicate subject id"));
            }
            r.validate(m)?;
            for &mi in &r.available_modalities {
                let s = self
                    .sample(&r.subject_id, mi)
                    .ok_or_else(|| Error::subject(&r.subject_id, format!("missing sample for modality {mi}")))?;
                if s.image.dim() != (self.height, self.width) {
                    return Err(Error::subject(&r.subject_id, "image shape differs from dataset shape"));
                }
                if let Some(mask) = &s.mask {
                    if mask.dim().0 != self.n_regions() {
                        return Err(Error::subject(&r.subject_id, "mask region count differs from manifest"));
                    }
                }
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Keeps only the samples referenced by `records`, replacing the
    /// current records.
    pub fn restrict_to(&mut self, records: Vec<SubjectRecord>) -> Result<()> {
        let keep: BTreeSet<(String, usize)> = records
            .iter()
            .flat_map(|r| r.available_modalities.iter().map(move |&m| (r.subject_id.clone(), m)))
            .collect();
        for key in &keep {
            if !self.samples.contains_key(key) {
                return Err(Error::subject(&key.0, format!("no stored sample for modality {}", key.1)));
            }
        }
        self.samples.retain(|k, _| keep.contains(k));
        self.records = records;
        Ok(())
    }
}

/// Expands a modality index to a one-hot `M x H x W` label volume.
pub fn expand_modality_label(modality: usize, n_modalities: usize, height: usize, width: usize) -> Result<Array3<f32>> {
    if modality >= n_modalities {
        return Err(Error::InvalidArgument(format!(
            "modality index {modality} out of range for M={n_modalities}"
        )));
    }
    let mut label = Array3::zeros((n_modalities, height, width));
    label.index_axis_mut(ndarray::Axis(0), modality).fill(1.0);
    Ok(label)
}
