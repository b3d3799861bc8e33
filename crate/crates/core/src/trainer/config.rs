use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nn::NetConfig;

/// Training configuration; serialized as flat JSON whose keys are the field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub lr_flat_epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda_rec: f64,
    pub lambda_seg: f64,
    pub lambda_sty: f64,
    pub lambda_con: f64,
    pub lambda_tran: f64,
    pub lambda_style_l2: f64,
    pub n_s: usize,
    pub seed: u64,
    /// Write `ckpt_ep{N}.bin` every this many epochs; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub base_width: usize,
    pub content_levels: usize,
    pub disc_downsamples: usize,
    pub style_hidden: usize,
    pub use_content_consistency: bool,
    pub use_translation_loss: bool,
    /// Run the intra- and inter-modality updates in every epoch.
    pub end_to_end: bool,
    /// When false only the content encoder and segmentation decoder are trained.
    pub disentangle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let net = NetConfig::default();
        Self {
            epochs_step1: 20,
            epochs_step2: 30,
            batch_size: 8,
            lr_init: 1e-4,
            lr_final: 1e-6,
            lr_flat_epochs: 40,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            lambda_rec: w.lambda_rec,
            lambda_seg: w.lambda_seg,
            lambda_sty: w.lambda_sty,
            lambda_con: w.lambda_con,
            lambda_tran: w.lambda_tran,
            lambda_style_l2: w.lambda_style_l2,
            n_s: net.n_s,
            seed: 0,
            checkpoint_interval: 10,
            base_width: net.base_width,
            content_levels: net.content_levels,
            disc_downsamples: net.disc_downsamples,
            style_hidden: net.style_hidden,
            use_content_consistency: true,
            use_translation_loss: true,
            end_to_end: false,
            disentangle: true,
        }
    }
}

/// Which update stream a log line belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumPhase {
    Step1StyleConsistent,
    Step2PairedInter,
    Step2UnpairedInter,
    SegmentationOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    One,
    Two,
}

impl TrainConfig {
    pub fn total_epochs(&self) -> usize {
        self.epochs_step1 + self.epochs_step2
    }

    /// Weights with ablated terms zeroed.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_seg: self.lambda_seg,
            lambda_sty: self.lambda_sty,
            lambda_con: if self.use_content_consistency { self.lambda_con } else { 0.0 },
            lambda_tran: if self.use_translation_loss { self.lambda_tran } else { 0.0 },
            lambda_style_l2: self.lambda_style_l2,
        }
    }

    pub fn net_config(&self, n_modalities: usize, n_regions: usize) -> NetConfig {
        NetConfig {
            n_modalities,
            n_regions,
            n_s: self.n_s,
            base_width: self.base_width,
            content_levels: self.content_levels,
            disc_downsamples: self.disc_downsamples,
            style_hidden: self.style_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.total_epochs() == 0 {
            return fail("at least one epoch is required".into());
        }
        if self.lr_flat_epochs > self.total_epochs() {
            return fail(format!(
                "lr_flat_epochs {} exceeds total epochs {}",
                self.lr_flat_epochs,
                self.total_epochs()
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        for (name, v) in [("lr_init", self.lr_init), ("lr_final", self.lr_final)] {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        self.weights().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn check_epoch(&self, epoch: usize) -> Result<()> {
        if epoch == 0 || epoch > self.total_epochs() {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 1..={}",
                self.total_epochs()
            )));
        }
        Ok(())
    }

    pub fn phase_for(&self, epoch: usize) -> Result<Step> {
        self.check_epoch(epoch)?;
        Ok(if epoch <= self.epochs_step1 { Step::One } else { Step::Two })
    }

    /// Constant for the first `lr_flat_epochs`, then linear down to `lr_final`
    /// at the last epoch.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.check_epoch(epoch)?;
        let total = self.total_epochs();
        if epoch <= self.lr_flat_epochs || total == self.lr_flat_epochs {
            return Ok(self.lr_init);
        }
        let t = (epoch - self.lr_flat_epochs) as f64 / (total - self.lr_flat_epochs) as f64;
        Ok(self.lr_init * (1.0 - t) + self.lr_final * t)
    }
}
