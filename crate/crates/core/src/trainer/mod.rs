//! The two-step curriculum: intra-modality updates on augmented views, then
//! paired and unpaired inter-modality updates.

mod batches;
mod config;
mod steps;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use batches::{
    image_tensor, mask_tensor, shuffled_batches, training_samples, unpaired_epoch, view_pairs, CoupleBatch, PairedCouple,
    PairedStream, UnpairedCouple, ViewBatch,
};
pub use config::{CurriculumPhase, Step, TrainConfig};
pub use steps::{evaluate_round, inter_inputs, intra_inputs, segmentation_only_inputs, Optimizers, RoundInputs};

use crate::augment::AugmentConfig;
use crate::datamodel::{Sample, SemiPairedDataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_segmentation, Segmenter, Translator};
use crate::hash::config_hash;
use crate::losses::LossReport;
use crate::nn::{Checkpoint, Model, NetConfig};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    /// Iteration within the epoch, from 1; the paired and unpaired rounds of
    /// one Step 2 iteration share it.
    pub step: usize,
    pub phase: CurriculumPhase,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub rounds: usize,
    pub mean_l_g: f64,
    pub val_dice: Option<f64>,
    pub seconds: f64,
}

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub train: TrainConfig,
    pub net: NetConfig,
    pub height: usize,
    pub width: usize,
    pub modality_names: Vec<String>,
    pub region_names: Vec<String>,
    /// Mean training style code per modality, the default translation reference.
    pub reference_styles: Vec<Vec<f32>>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub meta: ModelMeta,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    best_parameters: Option<Vec<(String, Tensor)>>,
}

impl TrainOutcome {
    /// Switches the model to the parameters of the best validation epoch
    /// (a no-op when no validation ran) and refreshes the reference styles.
    pub fn use_best(&mut self, ds: &SemiPairedDataset) -> Result<()> {
        if let Some(p) = self.best_parameters.take() {
            self.model.load_parameters(&p)?;
            self.meta.reference_styles = reference_styles(&self.model, ds, self.meta.train.batch_size)?;
        }
        Ok(())
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const EPOCH_FILE: &str = "epochs.jsonl";
pub const BEST_FILE: &str = "best.bin";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_ep{epoch}.bin")
}

const DATA_STREAM: u64 = 1;
const PAIRED_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn build_model(meta: &ModelMeta, seed: u64) -> Result<Model> {
    Model::new(meta.net.clone(), meta.height, meta.width, seed, DType::F32, &Device::Cpu)
}

/// Splits an `N x 1 x H x W` tensor into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        return Err(Error::Shape(format!("expected one channel, got {c}")));
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(v.chunks(h * w).take(n).map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("sized chunk")).collect())
}

/// Splits an `N x R x H x W` tensor into per-sample maps.
pub fn tensor_to_maps(t: &Tensor) -> Result<Vec<Array3<f32>>> {
    let (n, r, h, w) = t.dims4()?;
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(v.chunks(r * h * w).take(n).map(|c| Array3::from_shape_vec((r, h, w), c.to_vec()).expect("sized chunk")).collect())
}

/// Single-image segmentation path, processed in chunks of `batch_size`.
pub fn predict(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<Vec<Array3<f32>>> {
    let m = model.config().n_modalities;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let labels: Vec<usize> = chunk.iter().map(|s| s.modality.index).collect();
        if let Some(bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::InvalidArgument(format!("unknown modality index {bad}")));
        }
        let x = image_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        out.extend(tensor_to_maps(&model.generator_forward_single(&x, &labels)?)?);
    }
    Ok(out)
}

/// A model viewed as a segmenter and a translator.
pub struct Predictor<'a> {
    pub model: &'a Model,
    pub reference_styles: &'a [Vec<f32>],
    pub batch_size: usize,
}

impl Segmenter for Predictor<'_> {
    fn segment(&self, samples: &[&Sample]) -> Result<Vec<Array3<f32>>> {
        predict(self.model, samples, self.batch_size)
    }
}

impl Translator for Predictor<'_> {
    /// Decodes each source's content with the reference style of its target.
    fn translate(&self, sources: &[&Sample], targets: &[usize]) -> Result<Vec<Array2<f32>>> {
        if sources.len() != targets.len() {
            return Err(Error::Shape("one target per source is required".into()));
        }
        let n_s = self.model.config().n_s;
        let mut out = Vec::with_capacity(sources.len());
        for (chunk, tchunk) in sources.chunks(self.batch_size.max(1)).zip(targets.chunks(self.batch_size.max(1))) {
            let labels: Vec<usize> = chunk.iter().map(|s| s.modality.index).collect();
            let mut styles = Vec::with_capacity(chunk.len() * n_s);
            for &t in tchunk {
                let s = self
                    .reference_styles
                    .get(t)
                    .ok_or_else(|| Error::InvalidArgument(format!("no reference style for modality {t}")))?;
                styles.extend_from_slice(s);
            }
            let x = image_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), self.model.dtype(), self.model.device())?;
            let content = self.model.encode_content(&x, &labels)?;
            let st = Tensor::from_vec(styles, (chunk.len(), n_s), self.model.device())?.to_dtype(self.model.dtype())?;
            out.extend(tensor_to_images(&self.model.decode_translation(&content, &st)?)?);
        }
        Ok(out)
    }
}

/// Mean style code per modality over the training samples; zeros for
/// modalities without training samples.
pub fn reference_styles(model: &Model, ds: &SemiPairedDataset, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    let n_s = model.config().n_s;
    let mut sums = vec![vec![0f64; n_s]; ds.n_modalities()];
    let mut counts = vec![0usize; ds.n_modalities()];
    let samples = training_samples(ds);
    for chunk in samples.chunks(batch_size.max(1)) {
        let labels: Vec<usize> = chunk.iter().map(|s| s.modality.index).collect();
        let x = image_tensor(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>(), model.dtype(), model.device())?;
        let st: Vec<Vec<f32>> = model.encode_style(&x, &labels)?.to_dtype(DType::F32)?.to_vec2()?;
        for (row, &m) in st.iter().zip(&labels) {
            counts[m] += 1;
            for (acc, v) in sums[m].iter_mut().zip(row) {
                *acc += *v as f64;
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| if c == 0 { 0.0 } else { (v / c as f64) as f32 }).collect())
        .collect())
}

pub fn save_checkpoint(model: &Model, meta: &ModelMeta, epoch: usize, dataset_hash: &str, path: &Path) -> Result<()> {
    let json = serde_json::to_string(meta)?;
    Checkpoint::from_model(model, epoch as u64, &config_hash(&meta.train), &json, dataset_hash)?.save(path)
}

/// Rebuilds the model stored at `path`.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ModelMeta, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let meta: ModelMeta = serde_json::from_str(&ck.config_json)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable metadata: {e}", path.display())))?;
    let found = config_hash(&meta.train);
    if found != ck.config_hash {
        return Err(Error::HashMismatch {
            expected: ck.config_hash.clone(),
            found,
        });
    }
    let model = build_model(&meta, meta.train.seed)?;
    ck.restore(&model)?;
    Ok((model, meta, ck))
}

/// Output locations; `None` keeps everything in memory.
pub struct TrainOutput<'a> {
    pub dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

impl TrainOutput<'_> {
    pub fn none() -> Self {
        Self { dir: None, on_epoch: None }
    }
}

struct Logger {
    file: Option<BufWriter<File>>,
    path: PathBuf,
}

impl Logger {
    fn new(dir: Option<&Path>, name: &str) -> Result<Self> {
        let path = dir.map(|d| d.join(name)).unwrap_or_default();
        let file = match dir {
            Some(_) => Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?)),
            None => None,
        };
        Ok(Self { file, path })
    }

    fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(f) = &mut self.file {
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

/// Runs every epoch of the curriculum.
pub fn train(ds: &SemiPairedDataset, cfg: &TrainConfig, mut out: TrainOutput<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let samples = training_samples(ds);
    if samples.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training samples".into()));
    }
    for s in &samples {
        batches::require_mask(s)?;
    }
    if let Some(dir) = out.dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut meta = ModelMeta {
        train: cfg.clone(),
        net: cfg.net_config(ds.n_modalities(), ds.n_regions()),
        height: ds.height,
        width: ds.width,
        modality_names: ds.modality_names.clone(),
        region_names: ds.region_names.clone(),
        reference_styles: Vec::new(),
    };
    let model = build_model(&meta, cfg.seed)?;
    let weights = cfg.weights();
    let aug = AugmentConfig::for_size(ds.height, ds.width);
    let mut opts = Optimizers::new(&model, cfg)?;
    let mut data_rng = stream(cfg.seed, DATA_STREAM);
    let mut paired = PairedStream::new(ds, stream(cfg.seed, PAIRED_STREAM))?;
    let (dtype, device) = (model.dtype(), model.device().clone());

    let mut log_file = Logger::new(out.dir, LOG_FILE)?;
    let mut epoch_file = Logger::new(out.dir, EPOCH_FILE)?;
    let mut log = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    let mut best_parameters = None;
    let total = cfg.total_epochs();

    for epoch in 1..=total {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch)?;
        opts.set_learning_rate(lr);
        let step = cfg.phase_for(epoch)?;
        let mut records: Vec<LogRecord> = Vec::new();
        let push = |records: &mut Vec<LogRecord>, step_idx: usize, phase: CurriculumPhase, report: LossReport| -> Result<()> {
            if let Some(term) = report.non_finite() {
                return Err(Error::NonFinite { term, epoch, step: step_idx });
            }
            records.push(LogRecord {
                epoch,
                step: step_idx,
                phase,
                lr,
                report,
            });
            Ok(())
        };

        if !cfg.disentangle {
            for (i, batch) in shuffled_batches(&samples, cfg.batch_size, &mut data_rng).into_iter().enumerate() {
                let x = image_tensor(&batch.iter().map(|s| &s.image).collect::<Vec<_>>(), dtype, &device)?;
                let labels: Vec<usize> = batch.iter().map(|s| s.modality.index).collect();
                let masks = batch.iter().map(|s| batches::require_mask(s)).collect::<Result<Vec<_>>>()?;
                let masks = mask_tensor(&masks, dtype, &device)?;
                let terms = segmentation_only_inputs(&model, &x, &labels, &masks)?;
                let report = opts.segmentation_round(terms, &weights)?;
                push(&mut records, i + 1, CurriculumPhase::SegmentationOnly, report)?;
            }
        } else {
            if cfg.end_to_end || step == Step::One {
                for (i, batch) in shuffled_batches(&samples, cfg.batch_size, &mut data_rng).into_iter().enumerate() {
                    let pairs = view_pairs(&batch, &aug, &mut data_rng)?;
                    let inputs = intra_inputs(&model, &ViewBatch::build(&pairs, dtype, &device)?)?;
                    let report = opts.adversarial_round(&model, &inputs, &weights)?;
                    push(&mut records, i + 1, CurriculumPhase::Step1StyleConsistent, report)?;
                }
            }
            if cfg.end_to_end || step == Step::Two {
                for (i, couples) in unpaired_epoch(&samples, cfg.batch_size, &mut data_rng)?.into_iter().enumerate() {
                    if let Some(pb) = paired.next_batch(cfg.batch_size) {
                        let inputs = inter_inputs(&model, &CoupleBatch::from_paired(&pb, dtype, &device)?, true, &weights)?;
                        let report = opts.adversarial_round(&model, &inputs, &weights)?;
                        push(&mut records, i + 1, CurriculumPhase::Step2PairedInter, report)?;
                    }
                    let inputs = inter_inputs(&model, &CoupleBatch::from_unpaired(&couples, dtype, &device)?, false, &weights)?;
                    let report = opts.adversarial_round(&model, &inputs, &weights)?;
                    push(&mut records, i + 1, CurriculumPhase::Step2UnpairedInter, report)?;
                }
            }
        }

        for r in &records {
            log_file.write(r)?;
        }
        log_file.flush()?;

        let mut val_dice = None;
        if step == Step::Two && ds.records_in(Split::Val).next().is_some() {
            let predictor = Predictor {
                model: &model,
                reference_styles: &[],
                batch_size: cfg.batch_size,
            };
            let d = evaluate_segmentation(&predictor, ds, Split::Val)?.overall();
            val_dice = Some(d);
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((epoch, d));
                best_parameters = Some(model.snapshot()?);
                if let Some(dir) = out.dir {
                    meta.reference_styles = reference_styles(&model, ds, cfg.batch_size)?;
                    save_checkpoint(&model, &meta, epoch, &ds.config_hash, &dir.join(BEST_FILE))?;
                }
            }
        }
        if let Some(dir) = out.dir {
            let periodic = cfg.checkpoint_interval > 0 && epoch % cfg.checkpoint_interval == 0;
            if periodic || epoch == total {
                meta.reference_styles = reference_styles(&model, ds, cfg.batch_size)?;
                save_checkpoint(&model, &meta, epoch, &ds.config_hash, &dir.join(checkpoint_name(epoch)))?;
            }
            if best.is_none() && epoch == total {
                save_checkpoint(&model, &meta, epoch, &ds.config_hash, &dir.join(BEST_FILE))?;
            }
        }

        let summary = EpochSummary {
            epoch,
            lr,
            rounds: records.len(),
            mean_l_g: records.iter().map(|r| r.report.l_g).sum::<f64>() / records.len().max(1) as f64,
            val_dice,
            seconds: started.elapsed().as_secs_f64(),
        };
        epoch_file.write(&summary)?;
        epoch_file.flush()?;
        if let Some(cb) = out.on_epoch.as_mut() {
            cb(&summary);
        }
        epochs.push(summary);
        log.extend(records);
    }

    meta.reference_styles = reference_styles(&model, ds, cfg.batch_size)?;
    Ok(TrainOutcome {
        model,
        meta,
        log,
        epochs,
        best_epoch: best.map_or(total, |b| b.0),
        best_val_dice: best.map(|b| b.1),
        best_parameters,
    })
}
