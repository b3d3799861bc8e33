//! Segmentation and translation metrics, report tables, and
//! disentanglement probes.

mod metrics;
mod probes;

use std::fmt::Write as _;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

pub use metrics::{binarize, dice_score, ssim, SSIM_K1, SSIM_K2, SSIM_RANGE, SSIM_SIGMA, SSIM_WINDOW, THRESHOLD};
pub use probes::{
    content_distance_probe, interpolate_style, interpolation_values, style_statistics, write_png_grid, ContentProbe,
    Interpolation, StyleStats, DEFAULT_INTERP_DIM, DEFAULT_INTERP_HI, DEFAULT_INTERP_LO, DEFAULT_INTERP_STEPS,
};

use crate::datamodel::{Sample, SemiPairedDataset, Split};
use crate::error::{Error, Result};

/// Produces per-region probability maps `R x H x W` for each sample.
pub trait Segmenter {
    fn segment(&self, samples: &[&Sample]) -> Result<Vec<Array3<f32>>>;
}

/// Translates each source image into the paired target modality.
pub trait Translator {
    fn translate(&self, sources: &[&Sample], targets: &[usize]) -> Result<Vec<Array2<f32>>>;
}

/// Dice per region and modality; `aver` is the mean over modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub regions: Vec<String>,
    pub modalities: Vec<String>,
    /// `dice[r][m]`, `None` when the split has no sample of modality `m`.
    pub dice: Vec<Vec<Option<f64>>>,
    pub aver: Vec<f64>,
    pub n_samples: usize,
}

impl SegReport {
    /// Mean of the per-region averages.
    pub fn overall(&self) -> f64 {
        self.aver.iter().sum::<f64>() / self.aver.len() as f64
    }

    pub fn region_aver(&self, name: &str) -> Option<f64> {
        self.regions.iter().position(|r| r == name).map(|i| self.aver[i])
    }

    pub fn table(&self) -> String {
        let mut header = vec!["Region".to_string()];
        header.extend(self.modalities.iter().cloned());
        header.push("Aver".into());
        let rows: Vec<Vec<String>> = self
            .regions
            .iter()
            .zip(self.dice.iter().zip(&self.aver))
            .map(|(r, (cells, aver))| {
                let mut row = vec![r.clone()];
                row.extend(cells.iter().map(|c| c.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))));
                row.push(format!("{:.2}", 100.0 * aver));
                row
            })
            .collect();
        render_table(&header, &rows)
    }
}

/// Mean SSIM per target modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransReport {
    pub modalities: Vec<String>,
    pub ssim: Vec<Option<f64>>,
    pub average: f64,
    pub n_pairs: usize,
}

impl TransReport {
    pub fn table(&self) -> String {
        let mut header = vec!["Metric".to_string()];
        header.extend(self.modalities.iter().cloned());
        header.push("Aver".into());
        let mut row = vec!["SSIM".to_string()];
        row.extend(self.ssim.iter().map(|c| c.map_or("-".into(), |v| format!("{v:.4}"))));
        row.push(format!("{:.4}", self.average));
        render_table(&header, &[row])
    }
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{cell:<w$}");
            } else {
                let _ = write!(s, "  {cell:>w$}");
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Per-modality Dice averaged over the subjects of `split`.
pub fn evaluate_segmentation(seg: &dyn Segmenter, ds: &SemiPairedDataset, split: Split) -> Result<SegReport> {
    let samples = ds.samples_in(split);
    if samples.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} has no samples")));
    }
    let preds = seg.segment(&samples)?;
    let (r, m) = (ds.n_regions(), ds.n_modalities());
    let mut scores = vec![vec![Vec::new(); m]; r];
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::subject(&s.subject_id, "evaluation sample has no mask"))?;
        if p.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs mask {:?}", p.dim(), gt.dim())));
        }
        for region in 0..r {
            let pred = binarize(p.index_axis(Axis(0), region));
            scores[region][s.modality.index].push(dice_score(pred.view(), gt.index_axis(Axis(0), region))?);
        }
    }
    let dice: Vec<Vec<Option<f64>>> = scores.iter().map(|row| row.iter().map(|v| mean(v)).collect()).collect();
    let aver = dice
        .iter()
        .map(|row| mean(&row.iter().flatten().copied().collect::<Vec<_>>()).unwrap_or(0.0))
        .collect();
    Ok(SegReport {
        regions: ds.region_names.clone(),
        modalities: ds.modality_names.clone(),
        dice,
        aver,
        n_samples: samples.len(),
    })
}

/// SSIM between every available translation `a -> b` (b ≠ a) of the split's
/// samples and the analytic target, grouped by target modality.
pub fn evaluate_translation(tr: &dyn Translator, ds: &SemiPairedDataset, split: Split) -> Result<TransReport> {
    let oracle = ds
        .oracle
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("translation evaluation needs ground-truth targets".into()))?;
    let m = ds.n_modalities();
    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for s in ds.samples_in(split) {
        for t in (0..m).filter(|&t| t != s.modality.index) {
            sources.push(s);
            targets.push(t);
        }
    }
    if sources.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split:?} has nothing to translate")));
    }
    let outputs = tr.translate(&sources, &targets)?;
    let mut per = vec![Vec::new(); m];
    for ((s, &t), out) in sources.iter().zip(&targets).zip(&outputs) {
        let truth = oracle.ground_truth(&s.subject_id, t)?;
        per[t].push(ssim(out.view(), truth.view())?);
    }
    let ssim: Vec<Option<f64>> = per.iter().map(|v| mean(v)).collect();
    let present: Vec<f64> = ssim.iter().flatten().copied().collect();
    Ok(TransReport {
        modalities: ds.modality_names.clone(),
        average: mean(&present).unwrap_or(0.0),
        ssim,
        n_pairs: sources.len(),
    })
}

/// `mean ± std` over per-seed values (population std).
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let m = mean(values)?;
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Some((m, var.sqrt()))
}
