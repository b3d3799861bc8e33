//! One discriminator-then-generator update round per batch.

use std::collections::BTreeMap;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use super::batches::{CoupleBatch, ViewBatch};
use super::config::TrainConfig;
use crate::error::Result;
use crate::losses::{
    adversarial_generator_loss, adversarial_loss, cls_loss_fake, cls_loss_real, compose_l_d_tensor, compose_l_g_tensor,
    content_consistency_loss, reconstruction_loss, scalar, segmentation_loss, style_consistency_loss, style_l2_regularizer,
    supervised_translation_loss, LossReport, LossWeights, Pattern, Term,
};
use crate::nn::Model;

/// What the discriminator sees in one round, plus the generator-only terms.
pub struct RoundInputs {
    pub pattern: Pattern,
    pub real: Tensor,
    pub real_labels: Vec<usize>,
    pub fake1: Tensor,
    pub fake1_labels: Vec<usize>,
    pub fake2: Tensor,
    pub fake2_labels: Vec<usize>,
    pub generator_terms: BTreeMap<Term, Tensor>,
}

fn swap_halves(t: &Tensor, b: usize) -> Result<Tensor> {
    Ok(Tensor::cat(&[&t.narrow(0, b, b)?, &t.narrow(0, 0, b)?], 0)?)
}

/// Style-consistent views of single images: both views are reconstructed and
/// segmented, and their style codes are pulled together.
pub fn intra_inputs(model: &Model, batch: &ViewBatch) -> Result<RoundInputs> {
    let b = batch.len();
    let x = Tensor::cat(&[&batch.view1, &batch.view2], 0)?;
    let labels: Vec<usize> = batch.modality.iter().chain(&batch.modality).copied().collect();
    let styles = model.encode_style(&x, &labels)?;
    let content = model.encode_content(&x, &labels)?;
    let recon = model.decode_translation(&content, &styles)?;
    let seg = model.decode_segmentation(&content)?;
    let masks = Tensor::cat(&[&batch.mask1, &batch.mask2], 0)?;

    let mut g = BTreeMap::new();
    g.insert(Term::Rec, reconstruction_loss(&recon, &x)?);
    g.insert(Term::Seg, segmentation_loss(&seg, &masks)?);
    g.insert(Term::Sty, style_consistency_loss(&styles.narrow(0, 0, b)?, &styles.narrow(0, b, b)?)?);
    g.insert(Term::StyleL2, style_l2_regularizer(&styles)?);
    Ok(RoundInputs {
        pattern: Pattern::Intra,
        real: batch.original.clone(),
        real_labels: batch.modality.clone(),
        fake1: recon.narrow(0, 0, b)?,
        fake1_labels: batch.modality.clone(),
        fake2: recon.narrow(0, b, b)?,
        fake2_labels: batch.modality.clone(),
        generator_terms: g,
    })
}

/// Couples `(x_a, x_b)`; both directions are processed as one batch of size
/// `2B` so every term is the average of its a-side and b-side values.
pub fn inter_inputs(model: &Model, batch: &CoupleBatch, paired: bool, weights: &LossWeights) -> Result<RoundInputs> {
    let b = batch.len();
    let x = Tensor::cat(&[&batch.xa, &batch.xb], 0)?;
    let labels: Vec<usize> = batch.ma.iter().chain(&batch.mb).copied().collect();
    let swapped_labels: Vec<usize> = batch.mb.iter().chain(&batch.ma).copied().collect();
    let styles = model.encode_style(&x, &labels)?;
    let content = model.encode_content(&x, &labels)?;
    let recon = model.decode_translation(&content, &styles)?;
    let trans = model.decode_translation(&content, &swap_halves(&styles, b)?)?;
    let seg = model.decode_segmentation(&content)?;
    let masks = Tensor::cat(&[&batch.mask_a, &batch.mask_b], 0)?;

    let mut g = BTreeMap::new();
    g.insert(Term::Rec, reconstruction_loss(&recon, &x)?);
    g.insert(Term::Seg, segmentation_loss(&seg, &masks)?);
    g.insert(Term::StyleL2, style_l2_regularizer(&styles)?);
    if paired && weights.lambda_con > 0.0 {
        g.insert(Term::Con, content_consistency_loss(&content.narrow(0, b)?, &content.narrow(b, b)?)?);
    }
    if paired && weights.lambda_tran > 0.0 {
        g.insert(Term::Tran, supervised_translation_loss(&trans, &swap_halves(&x, b)?)?);
    }
    Ok(RoundInputs {
        pattern: if paired { Pattern::PairedInter } else { Pattern::UnpairedInter },
        real: x,
        real_labels: labels.clone(),
        fake1: recon,
        fake1_labels: labels,
        fake2: trans,
        fake2_labels: swapped_labels,
        generator_terms: g,
    })
}

/// Content encoder and segmentation decoder only.
pub fn segmentation_only_inputs(model: &Model, x: &Tensor, labels: &[usize], masks: &Tensor) -> Result<BTreeMap<Term, Tensor>> {
    let seg = model.generator_forward_single(x, labels)?;
    Ok(BTreeMap::from([(Term::Seg, segmentation_loss(&seg, masks)?)]))
}

fn d_terms(model: &Model, r: &RoundInputs, detach: bool) -> Result<BTreeMap<Term, Tensor>> {
    let prep = |t: &Tensor| if detach { t.detach() } else { t.clone() };
    let real = model.discriminate(&r.real)?;
    let f1 = model.discriminate(&prep(&r.fake1))?;
    let f2 = model.discriminate(&prep(&r.fake2))?;
    Ok(BTreeMap::from([
        (Term::Adv, adversarial_loss(&real.src, &f1.src, &f2.src)?),
        (Term::ClsReal, cls_loss_real(&real.cls, &r.real_labels)?),
    ]))
}

fn g_adversarial_terms(model: &Model, r: &RoundInputs) -> Result<BTreeMap<Term, Tensor>> {
    let f1 = model.discriminate(&r.fake1)?;
    let f2 = model.discriminate(&r.fake2)?;
    Ok(BTreeMap::from([
        (Term::AdvG, adversarial_generator_loss(&f1.src, &f2.src)?),
        (Term::ClsFake, cls_loss_fake(&f1.cls, &r.fake1_labels, &f2.cls, &r.fake2_labels)?),
    ]))
}

fn values(terms: &BTreeMap<Term, Tensor>) -> Result<BTreeMap<Term, f64>> {
    terms.iter().map(|(t, v)| Ok((*t, scalar(v)?))).collect()
}

/// All terms of a round at the current parameters, without updating anything.
pub fn evaluate_round(model: &Model, r: &RoundInputs, weights: &LossWeights) -> Result<(LossReport, Tensor)> {
    let mut terms = d_terms(model, r, true)?;
    let mut g = r.generator_terms.clone();
    g.extend(g_adversarial_terms(model, r)?);
    let l_g = compose_l_g_tensor(r.pattern, weights, &g)?;
    terms.extend(g);
    Ok((LossReport::new(r.pattern, weights, values(&terms)?)?, l_g))
}

/// Separate Adam states for the generator and the discriminator.
pub struct Optimizers {
    pub generator: AdamW,
    pub discriminator: AdamW,
}

impl Optimizers {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Result<Self> {
        let params = ParamsAdamW {
            lr: cfg.lr_init,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let g_vars = if cfg.disentangle {
            model.generator_vars()
        } else {
            model.segmentation_path_vars()
        };
        Ok(Self {
            generator: AdamW::new(g_vars, params.clone())?,
            discriminator: AdamW::new(model.discriminator_vars(), params)?,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.generator.set_learning_rate(lr);
        self.discriminator.set_learning_rate(lr);
    }

    /// D step on detached fakes, then G step against the updated D.
    pub fn adversarial_round(&mut self, model: &Model, r: &RoundInputs, weights: &LossWeights) -> Result<LossReport> {
        let d = d_terms(model, r, true)?;
        let l_d = compose_l_d_tensor(&d)?;
        self.discriminator.step(&l_d.backward()?)?;

        let mut g = r.generator_terms.clone();
        g.extend(g_adversarial_terms(model, r)?);
        let l_g = compose_l_g_tensor(r.pattern, weights, &g)?;
        self.generator.step(&l_g.backward()?)?;

        let mut terms = values(&d)?;
        terms.extend(values(&g)?);
        LossReport::new(r.pattern, weights, terms)
    }

    pub fn segmentation_round(&mut self, terms: BTreeMap<Term, Tensor>, weights: &LossWeights) -> Result<LossReport> {
        let l_g = compose_l_g_tensor(Pattern::SegmentationOnly, weights, &terms)?;
        self.generator.step(&l_g.backward()?)?;
        LossReport::new(Pattern::SegmentationOnly, weights, values(&terms)?)
    }
}
