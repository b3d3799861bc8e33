//! Loss terms and their weighted compositions.
//!
//! Every expectation is an arithmetic mean over batch, patch and pixel
//! dimensions. Functions return 0-dimensional tensors so they can be
//! differentiated; probabilities are clamped to `[PROB_CLAMP, 1]` before logs.

use std::collections::BTreeMap;
use std::fmt;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ContentCode;

pub const PROB_CLAMP: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-7;

/// Relative weights of the generator terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_seg: f64,
    pub lambda_sty: f64,
    pub lambda_con: f64,
    pub lambda_tran: f64,
    pub lambda_style_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 50.0,
            lambda_seg: 100.0,
            lambda_sty: 10.0,
            lambda_con: 10.0,
            lambda_tran: 100.0,
            lambda_style_l2: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_rec", self.lambda_rec),
            ("lambda_seg", self.lambda_seg),
            ("lambda_sty", self.lambda_sty),
            ("lambda_con", self.lambda_con),
            ("lambda_tran", self.lambda_tran),
            ("lambda_style_l2", self.lambda_style_l2),
        ];
        for (name, w) in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Named loss terms as they appear in logs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    /// Adversarial objective value (maximized by D).
    Adv,
    /// Non-saturating surrogate minimized by G.
    AdvG,
    ClsReal,
    ClsFake,
    Rec,
    Seg,
    Sty,
    Con,
    Tran,
    StyleL2,
}

impl Term {
    pub const ALL: [Term; 10] = [
        Term::Adv,
        Term::AdvG,
        Term::ClsReal,
        Term::ClsFake,
        Term::Rec,
        Term::Seg,
        Term::Sty,
        Term::Con,
        Term::Tran,
        Term::StyleL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Adv => "adv",
            Term::AdvG => "adv_g",
            Term::ClsReal => "cls_real",
            Term::ClsFake => "cls_fake",
            Term::Rec => "rec",
            Term::Seg => "seg",
            Term::Sty => "sty",
            Term::Con => "con",
            Term::Tran => "tran",
            Term::StyleL2 => "style_l2",
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which generator objective an update optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Augmented views of one image.
    Intra,
    /// Two modalities of the same subject.
    PairedInter,
    /// Different subjects and different modalities.
    UnpairedInter,
    /// Content encoder and segmentation decoder alone, no disentanglement.
    SegmentationOnly,
}

/// Coefficients of `L_D`; D minimizes `-adv + cls_real`.
pub fn l_d_coefficients() -> Vec<(Term, f64)> {
    vec![(Term::Adv, -1.0), (Term::ClsReal, 1.0)]
}

/// Coefficients of the generator objective for `pattern`.
pub fn l_g_coefficients(pattern: Pattern, w: &LossWeights) -> Vec<(Term, f64)> {
    let mut c = match pattern {
        Pattern::SegmentationOnly => return vec![(Term::Seg, w.lambda_seg)],
        _ => vec![
            (Term::AdvG, 1.0),
            (Term::ClsFake, 1.0),
            (Term::Rec, w.lambda_rec),
            (Term::Seg, w.lambda_seg),
            (Term::StyleL2, w.lambda_style_l2),
        ],
    };
    match pattern {
        Pattern::Intra => c.push((Term::Sty, w.lambda_sty)),
        Pattern::PairedInter => {
            c.push((Term::Con, w.lambda_con));
            c.push((Term::Tran, w.lambda_tran));
        }
        _ => {}
    }
    c
}

/// Terms with a nonzero coefficient must be present; terms outside the
/// pattern (other than the reported-only `adv`) must not be.
fn check_terms<T>(coeffs: &[(Term, f64)], terms: &BTreeMap<Term, T>, what: &str) -> Result<()> {
    for (term, c) in coeffs {
        if *c != 0.0 && !terms.contains_key(term) {
            return Err(Error::InvalidArgument(format!("{what}: missing required term `{term}`")));
        }
    }
    for term in terms.keys() {
        if *term != Term::Adv && !coeffs.iter().any(|(t, _)| t == term) {
            return Err(Error::InvalidArgument(format!("{what}: term `{term}` does not belong here")));
        }
    }
    Ok(())
}

fn compose_values(coeffs: &[(Term, f64)], terms: &BTreeMap<Term, f64>, what: &str) -> Result<f64> {
    check_terms(coeffs, terms, what)?;
    Ok(coeffs
        .iter()
        .filter_map(|(t, c)| terms.get(t).map(|v| c * v))
        .sum())
}

fn compose_tensors(coeffs: &[(Term, f64)], terms: &BTreeMap<Term, Tensor>, what: &str) -> Result<Tensor> {
    check_terms(coeffs, terms, what)?;
    let mut total: Option<Tensor> = None;
    for (t, c) in coeffs {
        if let Some(v) = terms.get(t) {
            let scaled = v.affine(*c, 0.0)?;
            total = Some(match total {
                Some(acc) => (acc + scaled)?,
                None => scaled,
            });
        }
    }
    total.ok_or_else(|| Error::InvalidArgument(format!("{what}: no terms")))
}

/// `L_D` from reported term values.
pub fn compose_l_d(terms: &BTreeMap<Term, f64>) -> Result<f64> {
    compose_values(&l_d_coefficients(), &only(terms, &[Term::Adv, Term::ClsReal]), "L_D")
}

/// Generator objective from reported term values.
pub fn compose_l_g(pattern: Pattern, weights: &LossWeights, terms: &BTreeMap<Term, f64>) -> Result<f64> {
    compose_values(&l_g_coefficients(pattern, weights), terms, "L_G")
}

pub fn compose_l_d_tensor(terms: &BTreeMap<Term, Tensor>) -> Result<Tensor> {
    compose_tensors(&l_d_coefficients(), terms, "L_D")
}

pub fn compose_l_g_tensor(pattern: Pattern, weights: &LossWeights, terms: &BTreeMap<Term, Tensor>) -> Result<Tensor> {
    compose_tensors(&l_g_coefficients(pattern, weights), terms, "L_G")
}

fn only(terms: &BTreeMap<Term, f64>, keep: &[Term]) -> BTreeMap<Term, f64> {
    terms.iter().filter(|(t, _)| keep.contains(t)).map(|(t, v)| (*t, *v)).collect()
}

/// Every term of one D/G update round plus both composites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub pattern: Pattern,
    pub terms: BTreeMap<Term, f64>,
    pub l_d: f64,
    pub l_g: f64,
}

impl LossReport {
    /// Builds a report whose composites are recomputed from `terms`.
    pub fn new(pattern: Pattern, weights: &LossWeights, terms: BTreeMap<Term, f64>) -> Result<Self> {
        let l_d = if pattern == Pattern::SegmentationOnly {
            0.0
        } else {
            compose_l_d(&terms)?
        };
        let generator_terms: BTreeMap<Term, f64> = terms
            .iter()
            .filter(|(t, _)| **t != Term::ClsReal)
            .map(|(t, v)| (*t, *v))
            .collect();
        let l_g = compose_l_g(pattern, weights, &generator_terms)?;
        Ok(Self { pattern, terms, l_d, l_g })
    }

    pub fn get(&self, term: Term) -> Option<f64> {
        self.terms.get(&term).copied()
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<String> {
        self.terms
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(t, _)| t.name().to_string())
            .or_else(|| (!self.l_d.is_finite()).then(|| "l_d".to_string()))
            .or_else(|| (!self.l_g.is_finite()).then(|| "l_g".to_string()))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_probabilities(p: &Tensor, what: &str) -> Result<()> {
    let values: Vec<f64> = p.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("{what}: value {v} is not a probability")));
    }
    Ok(())
}

fn log_clamped(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(PROB_CLAMP)?.log()?)
}

fn mean(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_all()?.mean(0)?)
}

/// `E[log D(real)] + ½E[log(1-D(fake1))] + ½E[log(1-D(fake2))]`.
pub fn adversarial_loss(d_real: &Tensor, d_fake1: &Tensor, d_fake2: &Tensor) -> Result<Tensor> {
    for (p, what) in [(d_real, "D(real)"), (d_fake1, "D(fake)"), (d_fake2, "D(fake)")] {
        check_probabilities(p, what)?;
    }
    let real = mean(&log_clamped(d_real)?)?;
    let f1 = mean(&log_clamped(&d_fake1.affine(-1.0, 1.0)?)?)?;
    let f2 = mean(&log_clamped(&d_fake2.affine(-1.0, 1.0)?)?)?;
    Ok((real + ((f1 + f2)? * 0.5)?)?)
}

/// Non-saturating generator surrogate `½E[-log D(fake1)] + ½E[-log D(fake2)]`.
pub fn adversarial_generator_loss(d_fake1: &Tensor, d_fake2: &Tensor) -> Result<Tensor> {
    check_probabilities(d_fake1, "D(fake)")?;
    check_probabilities(d_fake2, "D(fake)")?;
    let f1 = mean(&log_clamped(d_fake1)?)?;
    let f2 = mean(&log_clamped(d_fake2)?)?;
    Ok(((f1 + f2)? * -0.5)?)
}

/// `E[-log D_cls(m | x)]` over a batch of `N x M` distributions.
pub fn cls_loss_real(d_cls: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, m) = d_cls.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(Error::Shape(format!("{n} class rows but {} labels", labels.len())));
    }
    check_probabilities(d_cls, "D_cls")?;
    let mut onehot = vec![0f64; n * m];
    for (i, &l) in labels.iter().enumerate() {
        if l >= m {
            return Err(Error::InvalidArgument(format!("label {l} out of range for M={m}")));
        }
        onehot[i * m + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, m), d_cls.device())?.to_dtype(d_cls.dtype())?;
    let picked = (d_cls * onehot)?.sum(1)?;
    Ok(log_clamped(&picked)?.mean(0)?.neg()?)
}

/// `½E[-log D_cls(m_1|fake1)] + ½E[-log D_cls(m_2|fake2)]`.
pub fn cls_loss_fake(d_cls1: &Tensor, m1: &[usize], d_cls2: &Tensor, m2: &[usize]) -> Result<Tensor> {
    Ok(((cls_loss_real(d_cls1, m1)? + cls_loss_real(d_cls2, m2)?)? * 0.5)?)
}

fn l1(a: &Tensor, b: &Tensor, what: &str) -> Result<Tensor> {
    same_shape(a, b, what)?;
    mean(&(a - b)?.abs()?)
}

pub fn reconstruction_loss(x_recon: &Tensor, x: &Tensor) -> Result<Tensor> {
    l1(x_recon, x, "reconstruction")
}

pub fn supervised_translation_loss(x_ab: &Tensor, x_b: &Tensor) -> Result<Tensor> {
    l1(x_ab, x_b, "translation")
}

pub fn style_consistency_loss(s1: &Tensor, s2: &Tensor) -> Result<Tensor> {
    l1(s1, s2, "style consistency")
}

/// L1 distance between the bottleneck maps.
pub fn content_consistency_loss(c_a: &ContentCode, c_b: &ContentCode) -> Result<Tensor> {
    if c_a.levels.len() != c_b.levels.len() {
        return Err(Error::Shape("content pyramids differ in depth".into()));
    }
    l1(c_a.bottleneck(), c_b.bottleneck(), "content consistency")
}

pub fn style_l2_regularizer(styles: &Tensor) -> Result<Tensor> {
    if styles.elem_count() == 0 {
        return Err(Error::Shape("no style entries".into()));
    }
    mean(&styles.sqr()?)
}

/// `-(2 sum l p) / (sum(l^2 + p^2) + eps)` over all elements.
pub fn dice_loss(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    same_shape(pred, label, "dice")?;
    grouped_dice(&pred.flatten_all()?.unsqueeze(0)?, &label.flatten_all()?.unsqueeze(0)?)
}

/// Mean of `dice_loss` over every (sample, region) map of `N x R x H x W` inputs.
pub fn segmentation_loss(pred: &Tensor, label: &Tensor) -> Result<Tensor> {
    same_shape(pred, label, "segmentation")?;
    let (n, r, h, w) = pred.dims4()?;
    grouped_dice(&pred.reshape((n * r, h * w))?, &label.reshape((n * r, h * w))?)
}

fn grouped_dice(p: &Tensor, l: &Tensor) -> Result<Tensor> {
    let num = (p * l)?.sum(1)?.affine(2.0, 0.0)?;
    let den = (p.sqr()?.sum(1)? + l.sqr()?.sum(1)?)?.affine(1.0, DICE_EPS)?;
    Ok((num / den)?.mean(0)?.neg()?)
}
