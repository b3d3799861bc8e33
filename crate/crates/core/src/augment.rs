//! Geometric augmentations that keep an image's style intact, and the
//! two-view pairs consumed by the intra-modality training step.

use ndarray::{Array2, Array3, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ModalityId, Sample};
use crate::error::{Error, Result};

/// Value written where a transform pulls pixels from outside the frame.
pub const FILL_VALUE: f32 = -1.0;
pub const MAX_SHIFT: i32 = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Hflip,
    Vflip,
    Rotate,
    Zoom,
    Elastic,
    Shift,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 6] = [
        AugmentKind::Hflip,
        AugmentKind::Vflip,
        AugmentKind::Rotate,
        AugmentKind::Zoom,
        AugmentKind::Elastic,
        AugmentKind::Shift,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentOp {
    Hflip,
    Vflip,
    Rotate { angle_deg: f32 },
    Zoom { ratio: f32 },
    Elastic { alpha: f32, sigma: f32, seed: u64 },
    Shift { dx: i32, dy: i32 },
}

impl AugmentOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentOp::Hflip => AugmentKind::Hflip,
            AugmentOp::Vflip => AugmentKind::Vflip,
            AugmentOp::Rotate { .. } => AugmentKind::Rotate,
            AugmentOp::Zoom { .. } => AugmentKind::Zoom,
            AugmentOp::Elastic { .. } => AugmentKind::Elastic,
            AugmentOp::Shift { .. } => AugmentKind::Shift,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            AugmentOp::Rotate { angle_deg } if !(0.0..360.0).contains(&angle_deg) => {
                bad(format!("rotation angle {angle_deg} outside [0, 360)"))
            }
            AugmentOp::Zoom { ratio } if !(0.8..=1.2).contains(&ratio) => bad(format!("zoom ratio {ratio} outside [0.8, 1.2]")),
            AugmentOp::Shift { dx, dy } if dx.abs() > MAX_SHIFT || dy.abs() > MAX_SHIFT => {
                bad(format!("shift ({dx}, {dy}) exceeds {MAX_SHIFT} px"))
            }
            AugmentOp::Elastic { alpha, sigma, .. } if !(alpha.is_finite() && alpha >= 0.0 && sigma.is_finite() && sigma > 0.0) => {
                bad(format!("elastic needs alpha >= 0 and sigma > 0, got ({alpha}, {sigma})"))
            }
            _ => Ok(()),
        }
    }
}

/// Sampling ranges. Shift and elastic parameters are stated for 128x128
/// images and scaled linearly by [`AugmentConfig::for_size`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_shift_px: i32,
    pub zoom_min: f32,
    pub zoom_max: f32,
    pub elastic_alpha: f32,
    pub elastic_sigma: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift_px: 20,
            zoom_min: 0.8,
            zoom_max: 1.2,
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
        }
    }
}

impl AugmentConfig {
    pub fn for_size(height: usize, width: usize) -> Self {
        let scale = height.min(width) as f32 / 128.0;
        let base = Self::default();
        Self {
            max_shift_px: ((base.max_shift_px as f32 * scale).round() as i32).clamp(0, MAX_SHIFT),
            elastic_alpha: base.elastic_alpha * scale,
            elastic_sigma: (base.elastic_sigma * scale).max(0.5),
            ..base
        }
    }

    pub fn sample_op<R: Rng + ?Sized>(&self, kind: AugmentKind, rng: &mut R) -> AugmentOp {
        match kind {
            AugmentKind::Hflip => AugmentOp::Hflip,
            AugmentKind::Vflip => AugmentOp::Vflip,
            AugmentKind::Rotate => AugmentOp::Rotate {
                angle_deg: rng.random_range(0.0..360.0),
            },
            AugmentKind::Zoom => AugmentOp::Zoom {
                ratio: rng.random_range(self.zoom_min..=self.zoom_max),
            },
            AugmentKind::Elastic => AugmentOp::Elastic {
                alpha: self.elastic_alpha,
                sigma: self.elastic_sigma,
                seed: rng.random(),
            },
            AugmentKind::Shift => AugmentOp::Shift {
                dx: rng.random_range(-self.max_shift_px..=self.max_shift_px),
                dy: rng.random_range(-self.max_shift_px..=self.max_shift_px),
            },
        }
    }
}

/// Source coordinates `(y, x)` for every output pixel.
fn source_grid(op: &AugmentOp, h: usize, w: usize) -> Array2<(f32, f32)> {
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    match *op {
        AugmentOp::Hflip => Array2::from_shape_fn((h, w), |(i, j)| (i as f32, (w - 1 - j) as f32)),
        AugmentOp::Vflip => Array2::from_shape_fn((h, w), |(i, j)| ((h - 1 - i) as f32, j as f32)),
        AugmentOp::Shift { dx, dy } => Array2::from_shape_fn((h, w), |(i, j)| (i as f32 - dy as f32, j as f32 - dx as f32)),
        AugmentOp::Rotate { angle_deg } => {
            let (s, c) = angle_deg.to_radians().sin_cos();
            Array2::from_shape_fn((h, w), |(i, j)| {
                let (dy, dx) = (i as f32 - cy, j as f32 - cx);
                // inverse rotation
                (cy + (-s * dx + c * dy), cx + (c * dx + s * dy))
            })
        }
        AugmentOp::Zoom { ratio } => {
            Array2::from_shape_fn((h, w), |(i, j)| (cy + (i as f32 - cy) / ratio, cx + (j as f32 - cx) / ratio))
        }
        AugmentOp::Elastic { alpha, sigma, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut field = || {
                let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..=1.0));
                gaussian_smooth(&raw, sigma).mapv(|v| v * alpha)
            };
            let fx = field();
            let fy = field();
            Array2::from_shape_fn((h, w), |(i, j)| (i as f32 + fy[[i, j]], j as f32 + fx[[i, j]]))
        }
    }
}

fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = idx.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Separable Gaussian blur with mirrored borders, truncated at 4 sigma.
pub fn gaussian_smooth(input: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|k| (-(k * k) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = input.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            tmp[[i, j]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * input[[i, reflect(j as isize + k as isize - radius, w)]])
                .sum();
        }
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            out[[i, j]] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[[reflect(i as isize + k as isize - radius, h), j]])
                .sum();
        }
    }
    out
}

fn bilinear(image: &Array2<f32>, y: f32, x: f32) -> f32 {
    let (h, w) = image.dim();
    let eps = 1e-4;
    if !(y >= -eps && x >= -eps && y <= h as f32 - 1.0 + eps && x <= w as f32 - 1.0 + eps) {
        return FILL_VALUE;
    }
    let y = y.clamp(0.0, h as f32 - 1.0);
    let x = x.clamp(0.0, w as f32 - 1.0);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let top = image[[y0, x0]] * (1.0 - fx) + image[[y0, x1]] * fx;
    let bottom = image[[y1, x0]] * (1.0 - fx) + image[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn nearest(plane: ndarray::ArrayView2<u8>, y: f32, x: f32) -> u8 {
    let (h, w) = plane.dim();
    let (yi, xi) = (y.round(), x.round());
    if yi < 0.0 || xi < 0.0 || yi > (h - 1) as f32 || xi > (w - 1) as f32 {
        return 0;
    }
    u8::from(plane[[yi as usize, xi as usize]] > 0)
}

/// Applies one geometric op to an image and, with identical geometry, its mask.
pub fn apply(op: &AugmentOp, image: &Array2<f32>, mask: Option<&Array3<u8>>) -> Result<(Array2<f32>, Option<Array3<u8>>)> {
    op.validate()?;
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    if image.iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("image values must lie in [-1, 1]".into()));
    }
    if let Some(m) = mask {
        if (m.dim().1, m.dim().2) != (h, w) {
            return Err(Error::Shape(format!("mask {:?} vs image {:?}", m.dim(), (h, w))));
        }
    }
    let grid = source_grid(op, h, w);
    let out = grid.mapv(|(y, x)| bilinear(image, y, x).clamp(-1.0, 1.0));
    let out_mask = mask.map(|m| {
        let mut res = Array3::zeros(m.dim());
        for (r, plane) in m.axis_iter(Axis(0)).enumerate() {
            let mut target = res.index_axis_mut(Axis(0), r);
            for ((i, j), &(y, x)) in grid.indexed_iter() {
                target[[i, j]] = nearest(plane, y, x);
            }
        }
        res
    });
    Ok((out, out_mask))
}

/// Two style-consistent views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: Sample,
    pub view2: Sample,
    pub ops1: AugmentOp,
    pub ops2: AugmentOp,
    pub source_subject: String,
    pub modality: ModalityId,
    /// The untransformed image both views derive from.
    pub original: ndarray::Array2<f32>,
}

/// Draws two distinct op kinds uniformly and applies one to each view.
pub fn make_view_pair<R: Rng + ?Sized>(sample: &Sample, config: &AugmentConfig, rng: &mut R) -> Result<ViewPair> {
    let mask = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::subject(&sample.subject_id, "view pairs need a segmentation mask"))?;
    let picks = sample_indices(rng, AugmentKind::ALL.len(), 2);
    let ops1 = config.sample_op(AugmentKind::ALL[picks.index(0)], rng);
    let ops2 = config.sample_op(AugmentKind::ALL[picks.index(1)], rng);
    let view = |op: &AugmentOp| -> Result<Sample> {
        let (image, mask) = apply(op, &sample.image, Some(mask))?;
        Ok(Sample {
            subject_id: sample.subject_id.clone(),
            modality: sample.modality.clone(),
            image,
            mask,
        })
    };
    Ok(ViewPair {
        view1: view(&ops1)?,
        view2: view(&ops2)?,
        ops1,
        ops2,
        source_subject: sample.subject_id.clone(),
        modality: sample.modality.clone(),
        original: sample.image.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(i, j)| -1.0 + 2.0 * ((i * w + j) as f32) / ((h * w - 1) as f32))
    }

    fn disk(n: usize, r: f32) -> (Array2<f32>, Array3<u8>) {
        let c = (n as f32 - 1.0) / 2.0;
        let m = Array2::from_shape_fn((n, n), |(i, j)| u8::from(((i as f32 - c).powi(2) + (j as f32 - c - 4.0).powi(2)).sqrt() <= r));
        (m.mapv(|v| if v == 1 { 1.0 } else { -1.0 }), m.insert_axis(Axis(0)))
    }

    fn masked_sample() -> Sample {
        let (img, mask) = disk(32, 8.0);
        Sample {
            subject_id: "s".into(),
            modality: ModalityId::new(1, "T1"),
            image: img,
            mask: Some(mask),
        }
    }

    #[test]
    fn hflip_is_involution() {
        let img = ramp(7, 9);
        let (once, _) = apply(&AugmentOp::Hflip, &img, None).unwrap();
        assert_ne!(once, img);
        let (twice, _) = apply(&AugmentOp::Hflip, &once, None).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn zero_rotation_is_identity() {
        let img = ramp(16, 16);
        let (out, _) = apply(&AugmentOp::Rotate { angle_deg: 0.0 }, &img, None).unwrap();
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn shift_round_trip_restores_interior() {
        let img = ramp(16, 16);
        let (a, _) = apply(&AugmentOp::Shift { dx: 5, dy: 0 }, &img, None).unwrap();
        let (b, _) = apply(&AugmentOp::Shift { dx: -5, dy: 0 }, &a, None).unwrap();
        // Brute force: the pixels that never left the frame are columns 0..=10.
        for i in 0..16 {
            for j in 0..16 {
                let survived = j + 5 <= 15;
                if survived {
                    assert_eq!(b[[i, j]], img[[i, j]], "pixel ({i},{j})");
                } else {
                    assert_eq!(b[[i, j]], FILL_VALUE);
                }
            }
        }
    }

    #[test]
    fn out_of_range_parameters_fail() {
        let img = ramp(8, 8);
        for op in [
            AugmentOp::Rotate { angle_deg: 360.0 },
            AugmentOp::Rotate { angle_deg: -1.0 },
            AugmentOp::Zoom { ratio: 1.3 },
            AugmentOp::Shift { dx: 21, dy: 0 },
            AugmentOp::Elastic { alpha: 3.0, sigma: 0.0, seed: 1 },
        ] {
            assert!(apply(&op, &img, None).is_err(), "{op:?}");
        }
        let mut hot = img.clone();
        hot[[0, 0]] = 1.5;
        assert!(apply(&AugmentOp::Hflip, &hot, None).is_err());
    }

    fn iou(a: &Array2<u8>, b: ndarray::ArrayView2<u8>) -> f64 {
        let inter = a.iter().zip(b.iter()).filter(|(&x, &y)| x == 1 && y == 1).count() as f64;
        let union = a.iter().zip(b.iter()).filter(|(&x, &y)| x == 1 || y == 1).count() as f64;
        inter / union
    }

    #[test]
    fn masks_follow_image_geometry() {
        let (img, mask) = disk(64, 14.0);
        let ops = [
            (AugmentOp::Hflip, true),
            (AugmentOp::Vflip, true),
            (AugmentOp::Shift { dx: -7, dy: 12 }, true),
            (AugmentOp::Rotate { angle_deg: 37.0 }, false),
            (AugmentOp::Zoom { ratio: 0.85 }, false),
            (AugmentOp::Zoom { ratio: 1.17 }, false),
            (AugmentOp::Elastic { alpha: 34.0, sigma: 4.0, seed: 3 }, false),
        ];
        for (op, exact) in ops {
            let (out, out_mask) = apply(&op, &img, Some(&mask)).unwrap();
            let thresholded = out.mapv(|v| u8::from(v > 0.0));
            let m = out_mask.unwrap();
            let plane = m.index_axis(Axis(0), 0);
            if exact {
                assert_eq!(thresholded.view(), plane, "{op:?}");
            } else {
                assert!(iou(&thresholded, plane) >= 0.95, "{op:?}: {}", iou(&thresholded, plane));
            }
        }
    }

    #[test]
    fn elastic_is_reproducible() {
        let img = ramp(32, 32);
        let op = AugmentOp::Elastic { alpha: 17.0, sigma: 2.0, seed: 99 };
        assert_eq!(apply(&op, &img, None).unwrap(), apply(&op, &img, None).unwrap());
        let other = AugmentOp::Elastic { alpha: 17.0, sigma: 2.0, seed: 100 };
        assert_ne!(apply(&op, &img, None).unwrap().0, apply(&other, &img, None).unwrap().0);
    }

    #[test]
    fn view_pairs_are_reproducible_and_intra_modality() {
        let s = masked_sample();
        let cfg = AugmentConfig::for_size(32, 32);
        let a = make_view_pair(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_view_pair(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.view1.modality, a.view2.modality);
        assert_eq!(a.modality, s.modality);
        assert_ne!(a.ops1.kind(), a.ops2.kind());
        assert!(a.view1.mask.is_some() && a.view2.mask.is_some());
    }

    #[test]
    fn view_pair_needs_mask() {
        let mut s = masked_sample();
        s.mask = None;
        assert!(make_view_pair(&s, &AugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn op_kinds_are_uniform() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut first = [0usize; 6];
        let mut any = [0usize; 6];
        for _ in 0..draws {
            let picks = sample_indices(&mut rng, 6, 2);
            let k1 = cfg.sample_op(AugmentKind::ALL[picks.index(0)], &mut rng).kind();
            let k2 = cfg.sample_op(AugmentKind::ALL[picks.index(1)], &mut rng).kind();
            assert_ne!(k1, k2);
            first[AugmentKind::ALL.iter().position(|&k| k == k1).unwrap()] += 1;
            for k in [k1, k2] {
                any[AugmentKind::ALL.iter().position(|&x| x == k).unwrap()] += 1;
            }
        }
        for c in first {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() <= 0.02, "{first:?}");
        }
        for c in any {
            assert!((c as f64 / (2 * draws) as f64 - 1.0 / 6.0).abs() <= 0.02, "{any:?}");
        }
    }

    #[test]
    fn op_json_round_trip() {
        let op = AugmentOp::Elastic { alpha: 17.0, sigma: 2.0, seed: 5 };
        let text = serde_json::to_string(&op).unwrap();
        assert!(text.contains("\"kind\":\"elastic\""));
        assert_eq!(serde_json::from_str::<AugmentOp>(&text).unwrap(), op);
    }

    proptest! {
        #[test]
        fn outputs_stay_in_range(angle in 0.0f32..359.9, ratio in 0.8f32..1.2, dx in -20i32..=20, dy in -20i32..=20, seed in any::<u64>()) {
            let img = ramp(24, 20);
            for op in [
                AugmentOp::Rotate { angle_deg: angle },
                AugmentOp::Zoom { ratio },
                AugmentOp::Shift { dx, dy },
                AugmentOp::Elastic { alpha: 10.0, sigma: 2.0, seed },
            ] {
                let (out, _) = apply(&op, &img, None).unwrap();
                prop_assert_eq!(out.dim(), img.dim());
                prop_assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }
}
