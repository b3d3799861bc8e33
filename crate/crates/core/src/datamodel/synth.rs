//! Synthetic multimodal "brain" images with analytic ground truth.
//!
//! Every subject owns one content field: a head mask, a smooth tissue
//! intensity map and two nested tumor regions. A modality is an invertible
//! intensity map of that field, so the correct translation of any image to
//! any other modality is known exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::f32::consts::PI;

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{plan_splits, ModalityId, Sample, SemiPairedDataset, Split, SplitCounts, SubjectRecord};
use crate::error::{Error, Result};
use crate::hash::config_hash;

const TISSUE_MIN: f32 = 0.25;
const TISSUE_MAX: f32 = 0.75;
const MAX_GEOMETRY_ATTEMPTS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityStyle {
    pub gain: f32,
    pub bias: f32,
    pub gamma: f32,
    /// +1 when the tumor is brighter than tissue, -1 when darker.
    pub tumor_sign: f32,
}

/// Ranges for the random head and tumor ellipses. Head axes are fractions
/// of the half image size, tumor axes fractions of the full size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TumorGeometry {
    pub head_axis_min: f32,
    pub head_axis_max: f32,
    pub wt_axis_min: f32,
    pub wt_axis_max: f32,
    pub core_ratio_min: f32,
    pub core_ratio_max: f32,
}

impl Default for TumorGeometry {
    fn default() -> Self {
        Self {
            head_axis_min: 0.78,
            head_axis_max: 0.9,
            wt_axis_min: 0.08,
            wt_axis_max: 0.16,
            core_ratio_min: 0.4,
            core_ratio_max: 0.65,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_paired: usize,
    pub height: usize,
    pub width: usize,
    pub modality_names: Vec<String>,
    pub seed: u64,
    pub geometry: TumorGeometry,
    pub styles: Vec<ModalityStyle>,
    pub wt_contrast: f32,
    pub tc_contrast: f32,
}

impl Default for SynthSpec {
    /// The desk-scale dataset: 120 subjects, 24 paired, four modalities at 64x64.
    fn default() -> Self {
        Self {
            n_subjects: 120,
            n_train: 80,
            n_val: 20,
            n_test: 20,
            n_paired: 24,
            height: 64,
            width: 64,
            modality_names: super::DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect(),
            seed: 0,
            geometry: TumorGeometry::default(),
            styles: vec![
                ModalityStyle { gain: 0.9, bias: 0.2, gamma: 1.0, tumor_sign: 1.0 },
                ModalityStyle { gain: 0.8, bias: 0.55, gamma: 1.3, tumor_sign: -1.0 },
                ModalityStyle { gain: 1.0, bias: 0.3, gamma: 0.75, tumor_sign: 1.0 },
                ModalityStyle { gain: 1.1, bias: 0.1, gamma: 1.5, tumor_sign: 1.0 },
            ],
            wt_contrast: 0.35,
            tc_contrast: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn n_modalities(&self) -> usize {
        self.modality_names.len()
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.n_train,
            val: self.n_val,
            test: self.n_test,
            paired: self.n_paired,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.modality_names.is_empty() || self.styles.len() != self.modality_names.len() {
            return bad(format!(
                "{} modality names but {} styles",
                self.modality_names.len(),
                self.styles.len()
            ));
        }
        if self.height < 16 || self.width < 16 {
            return bad(format!("image size {}x{} below 16x16", self.height, self.width));
        }
        if self.n_train + self.n_val + self.n_test > self.n_subjects {
            return bad("split counts exceed subject count".into());
        }
        if self.n_paired > self.n_train {
            return bad("more paired subjects than training subjects".into());
        }
        if self.n_paired > 0 && self.n_modalities() < 2 {
            return bad("pairing needs at least two modalities".into());
        }
        let g = &self.geometry;
        let ordered = |lo: f32, hi: f32| lo > 0.0 && lo <= hi;
        if !(ordered(g.head_axis_min, g.head_axis_max)
            && g.head_axis_max <= 0.95
            && ordered(g.wt_axis_min, g.wt_axis_max)
            && g.wt_axis_max <= 0.3
            && ordered(g.core_ratio_min, g.core_ratio_max)
            && g.core_ratio_max < 1.0)
        {
            return bad(format!("invalid geometry {g:?}"));
        }
        if self.wt_contrast < 0.0 || self.tc_contrast < 0.0 {
            return bad("tumor contrasts must be non-negative".into());
        }
        let tumor = self.wt_contrast + self.tc_contrast;
        for (i, s) in self.styles.iter().enumerate() {
            if !(s.gain > 0.0 && s.gamma > 0.0 && (s.tumor_sign == 1.0 || s.tumor_sign == -1.0)) {
                return bad(format!("style {i} needs gain>0, gamma>0, sign=±1"));
            }
            // Worst-case head intensity (offset from -1) must stay in [0, 2]
            // so that the style map never clips and stays invertible.
            let t_lo = s.gain * TISSUE_MIN.powf(s.gamma);
            let t_hi = s.gain * TISSUE_MAX.powf(s.gamma);
            let lo = s.bias + t_lo - if s.tumor_sign < 0.0 { tumor } else { 0.0 };
            let hi = s.bias + t_hi + if s.tumor_sign > 0.0 { tumor } else { 0.0 };
            if lo < 0.0 || hi > 2.0 {
                return bad(format!("style {i} leaves [-1,1] (range [{}, {}])", lo - 1.0, hi - 1.0));
            }
        }
        Ok(())
    }
}

/// Modality-invariant anatomy of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentField {
    pub head: Array2<f32>,
    pub tissue: Array2<f32>,
    pub wt: Array2<u8>,
    pub tc: Array2<u8>,
}

impl ContentField {
    pub fn dim(&self) -> (usize, usize) {
        self.head.dim()
    }

    /// Region masks stacked as `[WT, TC]`.
    pub fn mask(&self) -> Array3<u8> {
        ndarray::stack(Axis(0), &[self.wt.view(), self.tc.view()]).expect("equal shapes")
    }

    /// Planes `[head, tissue, wt, tc]` as float32, the on-disk layout.
    pub fn to_planes(&self) -> Array3<f32> {
        let wt = self.wt.mapv(f32::from);
        let tc = self.tc.mapv(f32::from);
        ndarray::stack(Axis(0), &[self.head.view(), self.tissue.view(), wt.view(), tc.view()]).expect("equal shapes")
    }

    pub fn from_planes(planes: &Array3<f32>) -> Result<Self> {
        if planes.dim().0 != 4 {
            return Err(Error::Shape(format!("content field needs 4 planes, got {}", planes.dim().0)));
        }
        let to_u8 = |a: ndarray::ArrayView2<f32>| -> Result<Array2<u8>> {
            a.iter()
                .map(|&v| match v {
                    0.0 => Ok(0u8),
                    1.0 => Ok(1u8),
                    _ => Err(Error::Shape(format!("region plane value {v} is not binary"))),
                })
                .collect::<Result<Vec<u8>>>()
                .map(|v| Array2::from_shape_vec(a.dim(), v).expect("same length"))
        };
        Ok(Self {
            head: planes.index_axis(Axis(0), 0).to_owned(),
            tissue: planes.index_axis(Axis(0), 1).to_owned(),
            wt: to_u8(planes.index_axis(Axis(0), 2))?,
            tc: to_u8(planes.index_axis(Axis(0), 3))?,
        })
    }
}

impl ModalityStyle {
    /// Renders a content field in this modality.
    pub fn apply(&self, content: &ContentField, wt_contrast: f32, tc_contrast: f32) -> Array2<f32> {
        let (h, w) = content.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let head = content.head[[i, j]];
            let tumor = wt_contrast * f32::from(content.wt[[i, j]]) + tc_contrast * f32::from(content.tc[[i, j]]);
            let v = self.bias + self.gain * content.tissue[[i, j]].powf(self.gamma) + self.tumor_sign * tumor;
            (-1.0 + head * v).clamp(-1.0, 1.0)
        })
    }

    /// Inverts [`apply`](Self::apply) for the tissue map, given the
    /// anatomy's head and tumor regions. Pixels outside the head return 0.
    pub fn recover_tissue(&self, image: &Array2<f32>, content: &ContentField, wt_contrast: f32, tc_contrast: f32) -> Array2<f32> {
        Array2::from_shape_fn(image.dim(), |(i, j)| {
            if content.head[[i, j]] == 0.0 {
                return 0.0;
            }
            let tumor = wt_contrast * f32::from(content.wt[[i, j]]) + tc_contrast * f32::from(content.tc[[i, j]]);
            let t = (image[[i, j]] + 1.0 - self.bias - self.tumor_sign * tumor) / self.gain;
            t.max(0.0).powf(1.0 / self.gamma)
        })
    }
}

/// Analytic ground truth for a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOracle {
    pub styles: Vec<ModalityStyle>,
    pub wt_contrast: f32,
    pub tc_contrast: f32,
    pub content: BTreeMap<String, ContentField>,
}

impl SynthOracle {
    /// The image subject `subject` would have in `modality`.
    pub fn ground_truth(&self, subject: &str, modality: usize) -> Result<Array2<f32>> {
        let style = self
            .styles
            .get(modality)
            .ok_or_else(|| Error::InvalidArgument(format!("no style for modality {modality}")))?;
        let content = self
            .content
            .get(subject)
            .ok_or_else(|| Error::subject(subject, "no ground-truth content"))?;
        Ok(style.apply(content, self.wt_contrast, self.tc_contrast))
    }
}

struct Ellipse {
    cy: f32,
    cx: f32,
    ay: f32,
    ax: f32,
    angle: f32,
}

impl Ellipse {
    /// Squared normalized radius of pixel (i, j); `<= 1` is inside.
    fn radius2(&self, i: usize, j: usize) -> f32 {
        let (dy, dx) = (i as f32 - self.cy, j as f32 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.ax).powi(2) + (v / self.ay).powi(2)
    }
}

fn generate_content(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<ContentField> {
    let (h, w) = (spec.height, spec.width);
    let (hf, wf) = (h as f32, w as f32);
    let g = &spec.geometry;

    let head = Ellipse {
        cy: (hf - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * hf / 64.0,
        cx: (wf - 1.0) / 2.0 + rng.random_range(-1.0..=1.0) * wf / 64.0,
        ay: rng.random_range(g.head_axis_min..=g.head_axis_max) * hf / 2.0,
        ax: rng.random_range(g.head_axis_min..=g.head_axis_max) * wf / 2.0 * 0.9,
        angle: 0.0,
    };
    let head_mask = Array2::from_shape_fn((h, w), |(i, j)| if head.radius2(i, j) <= 1.0 { 1.0f32 } else { 0.0 });

    // Smooth tissue: a few plane waves plus two blobs.
    let mut waves = Vec::new();
    for _ in 0..3 {
        let amp = rng.random_range(0.04f32..0.08);
        let wavelength = rng.random_range(0.3f32..0.8) * wf;
        let theta = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..2.0 * PI);
        waves.push((amp, 2.0 * PI / wavelength, theta, phase));
    }
    let mut blobs = Vec::new();
    for _ in 0..2 {
        let amp = rng.random_range(-0.15f32..0.15);
        let sigma = rng.random_range(0.08f32..0.15) * wf;
        let r = rng.random_range(0.0f32..0.6);
        let t = rng.random_range(0.0..2.0 * PI);
        blobs.push((amp, sigma, head.cy + r * head.ay * t.sin(), head.cx + r * head.ax * t.cos()));
    }
    let tissue = Array2::from_shape_fn((h, w), |(i, j)| {
        if head_mask[[i, j]] == 0.0 {
            return 0.0;
        }
        let (y, x) = (i as f32, j as f32);
        let mut v = 0.5;
        for &(amp, k, theta, phase) in &waves {
            v += amp * (k * (x * theta.cos() + y * theta.sin()) + phase).sin();
        }
        for &(amp, sigma, by, bx) in &blobs {
            v += amp * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
        v.clamp(TISSUE_MIN, TISSUE_MAX)
    });

    for _ in 0..MAX_GEOMETRY_ATTEMPTS {
        let r = rng.random_range(0.0f32..0.5);
        let t = rng.random_range(0.0..2.0 * PI);
        let wt = Ellipse {
            cy: head.cy + r * head.ay * t.sin(),
            cx: head.cx + r * head.ax * t.cos(),
            ay: rng.random_range(g.wt_axis_min..=g.wt_axis_max) * hf,
            ax: rng.random_range(g.wt_axis_min..=g.wt_axis_max) * wf,
            angle: rng.random_range(0.0..PI),
        };
        let ratio = rng.random_range(g.core_ratio_min..=g.core_ratio_max);
        let tc = Ellipse { ay: wt.ay * ratio, ax: wt.ax * ratio, ..wt };
        let wt_mask = Array2::from_shape_fn((h, w), |(i, j)| u8::from(wt.radius2(i, j) <= 1.0));
        let tc_mask = Array2::from_shape_fn((h, w), |(i, j)| u8::from(tc.radius2(i, j) <= 1.0));
        // Reject tumors leaving the (shrunken) head or too small to see.
        let inside = wt_mask
            .indexed_iter()
            .all(|((i, j), &v)| v == 0 || head.radius2(i, j) <= 0.81);
        let core_pixels = tc_mask.iter().filter(|&&v| v == 1).count();
        if inside && core_pixels >= 4 {
            return Ok(ContentField { head: head_mask, tissue, wt: wt_mask, tc: tc_mask });
        }
    }
    Err(Error::InvalidArgument("could not place a tumor inside the head; check geometry".into()))
}

/// Generates a full synthetic dataset, split per `spec`.
pub fn synth_generate(spec: &SynthSpec) -> Result<SemiPairedDataset> {
    spec.validate()?;
    let m = spec.n_modalities();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut content = BTreeMap::new();
    let mut samples = BTreeMap::new();
    let mut records = Vec::with_capacity(spec.n_subjects);
    let width = spec.n_subjects.saturating_sub(1).to_string().len().max(3);
    for s in 0..spec.n_subjects {
        let id = format!("subj{s:0width$}");
        let field = generate_content(spec, &mut rng)?;
        let mask = field.mask();
        for (mi, style) in spec.styles.iter().enumerate() {
            let sample = Sample {
                subject_id: id.clone(),
                modality: ModalityId::new(mi, spec.modality_names[mi].clone()),
                image: style.apply(&field, spec.wt_contrast, spec.tc_contrast),
                mask: Some(mask.clone()),
            };
            samples.insert((id.clone(), mi), sample);
        }
        records.push(SubjectRecord {
            subject_id: id.clone(),
            available_modalities: (0..m).collect::<BTreeSet<_>>(),
            paired: false,
            split: Split::Train,
        });
        content.insert(id, field);
    }
    let planned = plan_splits(&records, spec.split_counts(), m, spec.seed)?;
    let kept: BTreeSet<&str> = planned.iter().map(|r| r.subject_id.as_str()).collect();
    content.retain(|k, _| kept.contains(k.as_str()));

    let mut ds = SemiPairedDataset {
        records: Vec::new(),
        samples,
        height: spec.height,
        width: spec.width,
        modality_names: spec.modality_names.clone(),
        region_names: super::DEFAULT_REGIONS.iter().map(|s| s.to_string()).collect(),
        oracle: Some(SynthOracle {
            styles: spec.styles.clone(),
            wt_contrast: spec.wt_contrast,
            tc_contrast: spec.tc_contrast,
            content,
        }),
        config_hash: config_hash(spec),
    };
    ds.restrict_to(planned)?;
    Ok(ds)
}
