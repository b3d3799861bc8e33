use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{Sample, SemiPairedDataset, Split};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::trainer::{image_tensor, tensor_to_images, tensor_to_maps};

pub const DEFAULT_INTERP_DIM: usize = 3;
pub const DEFAULT_INTERP_LO: f64 = -0.7;
pub const DEFAULT_INTERP_HI: f64 = 0.2;
pub const DEFAULT_INTERP_STEPS: usize = 10;

/// Evenly spaced values from `lo` to `hi` inclusive; a single step yields `lo`.
pub fn interpolation_values(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if !(lo < hi) || steps == 0 {
        return Err(Error::InvalidArgument(format!("need lo < hi and steps > 0, got [{lo}, {hi}] x {steps}")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

#[derive(Clone, Debug)]
pub struct Interpolation {
    pub values: Vec<f64>,
    pub style: Vec<f32>,
    pub images: Vec<Array2<f32>>,
    /// Segmentation decoded alongside every interpolated image.
    pub segmentations: Vec<Array3<f32>>,
}

/// Sweeps entry `dim` of the image's style code over `values`, keeping content
/// and all other entries fixed.
pub fn interpolate_style(model: &Model, sample: &Sample, dim: usize, values: &[f64]) -> Result<Interpolation> {
    let n_s = model.config().n_s;
    if dim >= n_s {
        return Err(Error::InvalidArgument(format!("style dimension {dim} out of range for n_s={n_s}")));
    }
    let x = image_tensor(&[&sample.image], model.dtype(), model.device())?;
    let m = [sample.modality.index];
    let style: Vec<f32> = model.encode_style(&x, &m)?.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let content = model.encode_content(&x, &m)?;
    let mut images = Vec::with_capacity(values.len());
    let mut segmentations = Vec::with_capacity(values.len());
    for &v in values {
        let mut s = style.clone();
        s[dim] = v as f32;
        let st = Tensor::from_vec(s, (1, n_s), model.device())?.to_dtype(model.dtype())?;
        images.extend(tensor_to_images(&model.decode_translation(&content, &st)?)?);
        segmentations.extend(tensor_to_maps(&model.decode_segmentation(&content)?)?);
    }
    Ok(Interpolation {
        values: values.to_vec(),
        style,
        images,
        segmentations,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub n_codes: usize,
}

/// Extrema and mean over every entry of every encoded style code.
pub fn style_statistics(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<StyleStats> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("style statistics need at least one sample".into()));
    }
    let mut all = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let x = image_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        let m: Vec<usize> = chunk.iter().map(|s| s.modality.index).collect();
        let s: Vec<f64> = model.encode_style(&x, &m)?.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
        all.extend(s);
    }
    Ok(StyleStats {
        max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        min: all.iter().copied().fold(f64::INFINITY, f64::min),
        mean: all.iter().sum::<f64>() / all.len() as f64,
        n_codes: samples.len(),
    })
}

/// Mean bottleneck L1 between two modalities of one subject versus between
/// different subjects in different modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentProbe {
    pub paired_l1: f64,
    pub random_l1: f64,
    pub ratio: f64,
    pub n_couples: usize,
}

/// Uses the analytic oracle to render every modality of the split's subjects.
pub fn content_distance_probe(model: &Model, ds: &SemiPairedDataset, split: Split, seed: u64) -> Result<ContentProbe> {
    let oracle = ds
        .oracle
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("content probe needs the synthetic oracle".into()))?;
    let subjects: Vec<&str> = ds.records_in(split).map(|r| r.subject_id.as_str()).collect();
    let m = ds.n_modalities();
    if subjects.len() < 2 || m < 2 {
        return Err(Error::InvalidArgument("content probe needs two subjects and two modalities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bottleneck = |subject: &str, modality: usize| -> Result<Tensor> {
        let img = oracle.ground_truth(subject, modality)?;
        let x = image_tensor(&[&img], model.dtype(), model.device())?;
        Ok(model.encode_content(&x, &[modality])?.bottleneck().clone())
    };
    let l1 = |a: &Tensor, b: &Tensor| -> Result<f64> {
        Ok((a - b)?.abs()?.mean_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    };
    let (mut paired, mut random) = (0.0, 0.0);
    for (i, s) in subjects.iter().enumerate() {
        let picks = rand::seq::index::sample(&mut rng, m, 2);
        let (a, b) = (picks.index(0), picks.index(1));
        paired += l1(&bottleneck(s, a)?, &bottleneck(s, b)?)?;

        let j = (i + rng.random_range(1..subjects.len())) % subjects.len();
        let b2 = (a + rng.random_range(1..m)) % m;
        random += l1(&bottleneck(s, a)?, &bottleneck(subjects[j], b2)?)?;
    }
    let n = subjects.len() as f64;
    Ok(ContentProbe {
        paired_l1: paired / n,
        random_l1: random / n,
        ratio: paired / random,
        n_couples: subjects.len(),
    })
}

/// Writes a grayscale grid, `rows[i][j]` at row `i`, column `j`; `[-1, 1]` maps to `[0, 255]`.
pub fn write_png_grid(path: &Path, rows: &[Vec<Array2<f32>>]) -> Result<()> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::InvalidArgument("empty image grid".into()))?;
    let (h, w) = first.dim();
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols || r.iter().any(|i| i.dim() != (h, w))) {
        return Err(Error::Shape("grid rows must have equal length and equal image sizes".into()));
    }
    let mut img = image::GrayImage::new((cols * w) as u32, (rows.len() * h) as u32);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, tile) in row.iter().enumerate() {
            for ((y, x), v) in tile.indexed_iter() {
                let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
                img.put_pixel((ci * w + x) as u32, (ri * h + y) as u32, image::Luma([g]));
            }
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
