//! Deterministic batch streams for the three update patterns.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_view_pair, AugmentConfig, ViewPair};
use crate::datamodel::{Sample, SemiPairedDataset, Split};
use crate::error::{Error, Result};

/// Stacks `H x W` images into an `N x 1 x H x W` tensor.
pub fn image_tensor(images: &[&Array2<f32>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| i.dim()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            return Err(Error::Shape("images in a batch differ in size".into()));
        }
        data.extend(img.iter().copied());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?.to_dtype(dtype)?)
}

/// Stacks `R x H x W` masks into an `N x R x H x W` tensor of zeros and ones.
pub fn mask_tensor(masks: &[&Array3<u8>], dtype: DType, device: &Device) -> Result<Tensor> {
    let (r, h, w) = masks.first().map(|m| m.dim()).ok_or_else(|| Error::Shape("empty batch".into()))?;
    let mut data = Vec::with_capacity(masks.len() * r * h * w);
    for m in masks {
        if m.dim() != (r, h, w) {
            return Err(Error::Shape("masks in a batch differ in size".into()));
        }
        data.extend(m.iter().map(|&v| v as f32));
    }
    Ok(Tensor::from_vec(data, (masks.len(), r, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn require_mask(s: &Sample) -> Result<&Array3<u8>> {
    s.mask
        .as_ref()
        .ok_or_else(|| Error::subject(&s.subject_id, format!("training sample of modality {} has no mask", s.modality.name)))
}

/// Two samples of one subject in different modalities.
#[derive(Clone, Debug)]
pub struct PairedCouple<'a> {
    pub a: &'a Sample,
    pub b: &'a Sample,
}

/// Two samples of different subjects and different modalities.
#[derive(Clone, Debug)]
pub struct UnpairedCouple<'a> {
    pub a: &'a Sample,
    pub b: &'a Sample,
}

/// Batches of `(x_a, x_b)` couples as stacked tensors.
pub struct CoupleBatch {
    pub xa: Tensor,
    pub xb: Tensor,
    pub ma: Vec<usize>,
    pub mb: Vec<usize>,
    pub mask_a: Tensor,
    pub mask_b: Tensor,
}

impl CoupleBatch {
    fn build(pairs: &[(&Sample, &Sample)], dtype: DType, device: &Device) -> Result<Self> {
        let a: Vec<&Sample> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<&Sample> = pairs.iter().map(|p| p.1).collect();
        let imgs = |v: &[&Sample]| image_tensor(&v.iter().map(|s| &s.image).collect::<Vec<_>>(), dtype, device);
        let masks = |v: &[&Sample]| -> Result<Tensor> {
            let m = v.iter().map(|s| require_mask(s)).collect::<Result<Vec<_>>>()?;
            mask_tensor(&m, dtype, device)
        };
        Ok(Self {
            xa: imgs(&a)?,
            xb: imgs(&b)?,
            ma: a.iter().map(|s| s.modality.index).collect(),
            mb: b.iter().map(|s| s.modality.index).collect(),
            mask_a: masks(&a)?,
            mask_b: masks(&b)?,
        })
    }

    pub fn from_paired(couples: &[PairedCouple<'_>], dtype: DType, device: &Device) -> Result<Self> {
        for c in couples {
            if c.a.subject_id != c.b.subject_id {
                return Err(Error::subject(
                    &c.a.subject_id,
                    format!("paired couple mixes subjects `{}` and `{}`", c.a.subject_id, c.b.subject_id),
                ));
            }
            if c.a.modality.index == c.b.modality.index {
                return Err(Error::subject(&c.a.subject_id, "paired couple repeats one modality"));
            }
        }
        Self::build(&couples.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>(), dtype, device)
    }

    pub fn from_unpaired(couples: &[UnpairedCouple<'_>], dtype: DType, device: &Device) -> Result<Self> {
        Self::build(&couples.iter().map(|c| (c.a, c.b)).collect::<Vec<_>>(), dtype, device)
    }

    pub fn len(&self) -> usize {
        self.ma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ma.is_empty()
    }
}

/// Stacked view pairs for the intra-modality pattern.
pub struct ViewBatch {
    pub original: Tensor,
    pub view1: Tensor,
    pub view2: Tensor,
    pub modality: Vec<usize>,
    pub mask1: Tensor,
    pub mask2: Tensor,
}

impl ViewBatch {
    pub fn build(pairs: &[ViewPair], dtype: DType, device: &Device) -> Result<Self> {
        let imgs = |f: &dyn Fn(&ViewPair) -> &Array2<f32>| image_tensor(&pairs.iter().map(f).collect::<Vec<_>>(), dtype, device);
        let masks = |f: &dyn Fn(&ViewPair) -> &Sample| -> Result<Tensor> {
            let m = pairs.iter().map(|p| require_mask(f(p))).collect::<Result<Vec<_>>>()?;
            mask_tensor(&m, dtype, device)
        };
        Ok(Self {
            original: imgs(&|p| &p.original)?,
            view1: imgs(&|p| &p.view1.image)?,
            view2: imgs(&|p| &p.view2.image)?,
            modality: pairs.iter().map(|p| p.modality.index).collect(),
            mask1: masks(&|p| &p.view1)?,
            mask2: masks(&|p| &p.view2)?,
        })
    }

    pub fn len(&self) -> usize {
        self.modality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.is_empty()
    }
}

/// Every training sample, in record order.
pub fn training_samples(ds: &SemiPairedDataset) -> Vec<&Sample> {
    ds.samples_in(Split::Train)
}

/// Shuffled training samples, chunked into batches.
pub fn shuffled_batches<'a, R: Rng + ?Sized>(samples: &[&'a Sample], batch_size: usize, rng: &mut R) -> Vec<Vec<&'a Sample>> {
    let mut order: Vec<&Sample> = samples.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

pub fn view_pairs<R: Rng + ?Sized>(batch: &[&Sample], aug: &AugmentConfig, rng: &mut R) -> Result<Vec<ViewPair>> {
    batch.iter().map(|s| make_view_pair(s, aug, rng)).collect()
}

/// One epoch of unpaired couples: every training sample serves once as `x_a`,
/// partnered with a random sample of another subject and another modality.
pub fn unpaired_epoch<'a, R: Rng + ?Sized>(
    samples: &[&'a Sample],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<UnpairedCouple<'a>>>> {
    let mut order: Vec<&Sample> = samples.to_vec();
    order.shuffle(rng);
    let mut couples = Vec::with_capacity(order.len());
    for a in &order {
        let candidates: Vec<&Sample> = samples
            .iter()
            .copied()
            .filter(|b| b.subject_id != a.subject_id && b.modality.index != a.modality.index)
            .collect();
        let b = candidates
            .get(rng.random_range(0..candidates.len().max(1)))
            .copied()
            .ok_or_else(|| Error::subject(&a.subject_id, "no cross-subject, cross-modality partner exists"))?;
        couples.push(UnpairedCouple { a, b });
    }
    Ok(couples.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Endless stream of paired couples that reshuffles the paired subjects
/// every time it runs out, drawing a fresh ordered modality pair per visit.
pub struct PairedStream<'a> {
    subjects: Vec<Vec<&'a Sample>>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> PairedStream<'a> {
    pub fn new(ds: &'a SemiPairedDataset, rng: ChaCha8Rng) -> Result<Self> {
        let mut subjects = Vec::new();
        for r in ds.records_in(Split::Train).filter(|r| r.paired) {
            let samples: Vec<&Sample> = r
                .available_modalities
                .iter()
                .map(|&m| {
                    ds.sample(&r.subject_id, m)
                        .ok_or_else(|| Error::subject(&r.subject_id, format!("missing modality {m}")))
                })
                .collect::<Result<_>>()?;
            if samples.len() >= 2 {
                subjects.push(samples);
            }
        }
        Ok(Self {
            order: (0..subjects.len()).collect(),
            pos: subjects.len(),
            subjects,
            rng,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn next_couple(&mut self) -> PairedCouple<'a> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let subject = &self.subjects[self.order[self.pos]];
        self.pos += 1;
        let picks = rand::seq::index::sample(&mut self.rng, subject.len(), 2);
        PairedCouple {
            a: subject[picks.index(0)],
            b: subject[picks.index(1)],
        }
    }

    /// `None` when there are no paired subjects.
    pub fn next_batch(&mut self, batch_size: usize) -> Option<Vec<PairedCouple<'a>>> {
        if self.is_empty() {
            return None;
        }
        Some((0..batch_size).map(|_| self.next_couple()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{synth_generate, SynthSpec};
    use rand::SeedableRng;

    fn dataset(paired: usize) -> SemiPairedDataset {
        synth_generate(&SynthSpec {
            n_subjects: 16,
            n_train: 10,
            n_val: 3,
            n_test: 3,
            n_paired: paired,
            height: 16,
            width: 16,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn unpaired_couples_cross_subject_and_modality() {
        let ds = dataset(3);
        let samples = training_samples(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = unpaired_epoch(&samples, 4, &mut rng).unwrap();
        assert_eq!(batches.len(), samples.len().div_ceil(4));
        let mut seen_a = 0;
        for c in batches.iter().flatten() {
            assert_ne!(c.a.subject_id, c.b.subject_id);
            assert_ne!(c.a.modality.index, c.b.modality.index);
            seen_a += 1;
        }
        assert_eq!(seen_a, samples.len());
    }

    #[test]
    fn paired_stream_cycles_deterministically() {
        let ds = dataset(3);
        let run = || {
            let mut s = PairedStream::new(&ds, ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(s.n_subjects(), 3);
            (0..5)
                .flat_map(|_| s.next_batch(2).unwrap())
                .map(|c| (c.a.subject_id.clone(), c.a.modality.index, c.b.modality.index))
                .collect::<Vec<_>>()
        };
        let first = run();
        assert_eq!(first, run());
        assert_eq!(first.len(), 10);
        for (_, a, b) in &first {
            assert_ne!(a, b);
        }
        // every paired subject visited once per cycle of three draws
        let mut cycle: Vec<_> = first[..3].iter().map(|c| c.0.clone()).collect();
        cycle.sort();
        cycle.dedup();
        assert_eq!(cycle.len(), 3);
    }

    #[test]
    fn empty_paired_stream() {
        let ds = dataset(0);
        let mut s = PairedStream::new(&ds, ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(s.next_batch(4).is_none());
    }

    #[test]
    fn paired_batch_rejects_mixed_subjects() {
        let ds = dataset(2);
        let samples = training_samples(&ds);
        let a = samples[0];
        let b = samples
            .iter()
            .find(|s| s.subject_id != a.subject_id && s.modality.index != a.modality.index)
            .unwrap();
        let err = CoupleBatch::from_paired(&[PairedCouple { a, b }], DType::F32, &Device::Cpu);
        assert!(matches!(err, Err(Error::Subject { .. })));
    }

    #[test]
    fn tensors_have_expected_layout() {
        let ds = dataset(2);
        let samples = training_samples(&ds);
        let t = image_tensor(&[&samples[0].image, &samples[1].image], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 1, 16, 16]);
        let v: Vec<f32> = t.get(1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, samples[1].image.iter().copied().collect::<Vec<_>>());
        let m = mask_tensor(&[samples[0].mask.as_ref().unwrap()], DType::F32, &Device::Cpu).unwrap();
        assert_eq!(m.dims(), &[1, 2, 16, 16]);
    }
}
