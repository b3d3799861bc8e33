//! Directory format:
//!
//! ```text
//! <root>/manifest.json
//! <root>/data/<subject>_<modality>.f32       little-endian float32, row-major HxW
//! <root>/data/<subject>_<modality>.mask.u8   uint8 {0,1}, R planes of HxW
//! <root>/data/<subject>.content.f32          synthetic only: [head, tissue, wt, tc]
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{ContentField, ModalityId, ModalityStyle, Sample, SemiPairedDataset, Split, SubjectRecord, SynthOracle};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MAX_SIDE: usize = 8192;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub subject_id: String,
    pub paired: bool,
    pub split: Split,
    pub modalities: Vec<usize>,
    #[serde(default)]
    pub masks: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub styles: Vec<ModalityStyle>,
    pub wt_contrast: f32,
    pub tc_contrast: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "M")]
    pub m: usize,
    pub modalities: Vec<String>,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub regions: Vec<String>,
    pub config_hash: String,
    pub records: Vec<ManifestRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 128
        && !name.starts_with('.')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Manifest(format!("{kind} name {name:?} is not a safe file name component")))
    }
}

impl Manifest {
    /// Parses and structurally validates a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.m == 0 || self.m != self.modalities.len() {
            return Err(Error::Manifest(format!("M={} but {} modality names", self.m, self.modalities.len())));
        }
        if self.h == 0 || self.w == 0 || self.h > MAX_SIDE || self.w > MAX_SIDE {
            return Err(Error::Manifest(format!("invalid image size {}x{}", self.h, self.w)));
        }
        if self.regions.is_empty() {
            return Err(Error::Manifest("no regions declared".into()));
        }
        for name in &self.modalities {
            check_name("modality", name)?;
        }
        if self.modalities.iter().collect::<BTreeSet<_>>().len() != self.m {
            return Err(Error::Manifest("duplicate modality names".into()));
        }
        if let Some(synth) = &self.synth {
            if synth.styles.len() != self.m {
                return Err(Error::Manifest("synth section needs one style per modality".into()));
            }
        }
        let mut seen = BTreeSet::new();
        for r in &self.records {
            check_name("subject", &r.subject_id)?;
            if !seen.insert(r.subject_id.as_str()) {
                return Err(Error::subject(&r.subject_id, "duplicate subject id"));
            }
            let mods: BTreeSet<usize> = r.modalities.iter().copied().collect();
            if mods.len() != r.modalities.len() {
                return Err(Error::subject(&r.subject_id, "duplicate modality in record"));
            }
            SubjectRecord {
                subject_id: r.subject_id.clone(),
                available_modalities: mods,
                paired: r.paired,
                split: r.split,
            }
            .validate(self.m)?;
        }
        Ok(())
    }
}

/// Decodes a raw little-endian float32 `h x w` plane.
pub fn decode_f32_plane(bytes: &[u8], h: usize, w: usize) -> Result<Array2<f32>> {
    let planes = decode_f32_planes(bytes, 1, h, w)?;
    Ok(planes.index_axis_move(ndarray::Axis(0), 0))
}

fn decode_f32_planes(bytes: &[u8], n: usize, h: usize, w: usize) -> Result<Array3<f32>> {
    let count = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Shape("plane size overflows".into()))?;
    if Some(bytes.len()) != count.checked_mul(4) {
        return Err(Error::Shape(format!("expected {} bytes for {n}x{h}x{w} float32, got {}", count * 4, bytes.len())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("non-finite value at element {pos}")));
    }
    Ok(Array3::from_shape_vec((n, h, w), values).expect("length checked"))
}

/// Decodes `regions` binary uint8 planes of `h x w`.
pub fn decode_mask_planes(bytes: &[u8], regions: usize, h: usize, w: usize) -> Result<Array3<u8>> {
    let count = regions
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::Shape("mask size overflows".into()))?;
    if bytes.len() != count {
        return Err(Error::Shape(format!("expected {count} mask bytes, got {}", bytes.len())));
    }
    if let Some(pos) = bytes.iter().position(|&v| v > 1) {
        return Err(Error::Shape(format!("mask value {} at element {pos} is not binary", bytes[pos])));
    }
    Ok(Array3::from_shape_vec((regions, h, w), bytes.to_vec()).expect("length checked"))
}

fn encode_f32(values: impl Iterator<Item = f32>) -> Vec<u8> {
    values.flat_map(f32::to_le_bytes).collect()
}

fn sample_path(root: &Path, subject: &str, modality: &str) -> PathBuf {
    root.join("data").join(format!("{subject}_{modality}.f32"))
}

fn mask_path(root: &Path, subject: &str, modality: &str) -> PathBuf {
    root.join("data").join(format!("{subject}_{modality}.mask.u8"))
}

fn content_path(root: &Path, subject: &str) -> PathBuf {
    root.join("data").join(format!("{subject}.content.f32"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path, subject: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::subject(subject, format!("cannot read {}: {e}", path.display())))
}

pub fn save_dataset(ds: &SemiPairedDataset, root: &Path) -> Result<()> {
    ds.validate()?;
    let data = root.join("data");
    fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;

    let records = ds
        .records
        .iter()
        .map(|r| ManifestRecord {
            subject_id: r.subject_id.clone(),
            paired: r.paired,
            split: r.split,
            modalities: r.available_modalities.iter().copied().collect(),
            masks: r
                .available_modalities
                .iter()
                .all(|&m| ds.sample(&r.subject_id, m).is_some_and(|s| s.mask.is_some())),
        })
        .collect();
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        m: ds.n_modalities(),
        modalities: ds.modality_names.clone(),
        h: ds.height,
        w: ds.width,
        regions: ds.region_names.clone(),
        config_hash: ds.config_hash.clone(),
        records,
        synth: ds.oracle.as_ref().map(|o| SynthSection {
            styles: o.styles.clone(),
            wt_contrast: o.wt_contrast,
            tc_contrast: o.tc_contrast,
        }),
    };
    manifest.validate()?;

    for r in &manifest.records {
        for &m in &r.modalities {
            let s = ds.sample(&r.subject_id, m).expect("validated");
            let name = &ds.modality_names[m];
            write(&sample_path(root, &r.subject_id, name), &encode_f32(s.image.iter().copied()))?;
            if r.masks {
                let mask = s.mask.as_ref().expect("checked above");
                write(&mask_path(root, &r.subject_id, name), &mask.iter().copied().collect::<Vec<u8>>())?;
            }
        }
        if let Some(field) = ds.oracle.as_ref().and_then(|o| o.content.get(&r.subject_id)) {
            write(&content_path(root, &r.subject_id), &encode_f32(field.to_planes().iter().copied()))?;
        }
    }
    let text = serde_json::to_string_pretty(&manifest)?;
    write(&root.join("manifest.json"), text.as_bytes())
}

pub fn load_dataset(root: &Path) -> Result<SemiPairedDataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest::from_json(&text)?;
    let (h, w, n_regions) = (manifest.h, manifest.w, manifest.regions.len());

    let mut samples = BTreeMap::new();
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut content = BTreeMap::new();
    for r in &manifest.records {
        let sid = &r.subject_id;
        for &m in &r.modalities {
            let name = &manifest.modalities[m];
            let bytes = read(&sample_path(root, sid, name), sid)?;
            let image = decode_f32_plane(&bytes, h, w).map_err(|e| Error::subject(sid, e.to_string()))?;
            let mask = if r.masks {
                let bytes = read(&mask_path(root, sid, name), sid)?;
                Some(decode_mask_planes(&bytes, n_regions, h, w).map_err(|e| Error::subject(sid, e.to_string()))?)
            } else {
                None
            };
            let sample = Sample {
                subject_id: sid.clone(),
                modality: ModalityId::new(m, name.clone()),
                image,
                mask,
            };
            sample.validate()?;
            samples.insert((sid.clone(), m), sample);
        }
        if manifest.synth.is_some() {
            let bytes = read(&content_path(root, sid), sid)?;
            let planes = decode_f32_planes(&bytes, 4, h, w).map_err(|e| Error::subject(sid, e.to_string()))?;
            content.insert(sid.clone(), ContentField::from_planes(&planes).map_err(|e| Error::subject(sid, e.to_string()))?);
        }
        records.push(SubjectRecord {
            subject_id: sid.clone(),
            available_modalities: r.modalities.iter().copied().collect(),
            paired: r.paired,
            split: r.split,
        });
    }

    let ds = SemiPairedDataset {
        records,
        samples,
        height: h,
        width: w,
        modality_names: manifest.modalities,
        region_names: manifest.regions,
        oracle: manifest.synth.map(|s| SynthOracle {
            styles: s.styles,
            wt_contrast: s.wt_contrast,
            tc_contrast: s.tc_contrast,
            content,
        }),
        config_hash: manifest.config_hash,
    };
    ds.validate()?;
    Ok(ds)
}
