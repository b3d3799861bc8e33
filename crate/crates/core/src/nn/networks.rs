use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::layers::{adain, instance_norm, leaky_relu, sigmoid, softmax_last, upsample2, Conv2d, Linear, ParamStore};
use crate::error::{Error, Result};

pub const STYLE_ENCODER: &str = "style_enc.";
pub const CONTENT_ENCODER: &str = "content_enc.";
pub const TRANSLATION_DECODER: &str = "trans_dec.";
pub const SEGMENTATION_DECODER: &str = "seg_dec.";
pub const DISCRIMINATOR: &str = "disc.";

/// Architecture hyperparameters shared by all five networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_modalities: usize,
    pub n_regions: usize,
    pub n_s: usize,
    pub base_width: usize,
    pub content_levels: usize,
    pub disc_downsamples: usize,
    pub style_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_modalities: 4,
            n_regions: 2,
            n_s: 8,
            base_width: 32,
            content_levels: 4,
            disc_downsamples: 4,
            style_hidden: 128,
        }
    }
}

impl NetConfig {
    /// Channel count at content level `k` (1-based).
    pub fn level_channels(&self, k: usize) -> usize {
        self.base_width << (k - 1)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.n_modalities == 0 || self.n_regions == 0 || self.n_s == 0 || self.base_width == 0 {
            return Err(Error::InvalidArgument(format!("degenerate network config {self:?}")));
        }
        if self.content_levels == 0 || self.disc_downsamples == 0 || self.content_levels > 8 || self.disc_downsamples > 8 {
            return Err(Error::InvalidArgument("content_levels and disc_downsamples must be in 1..=8".into()));
        }
        let factor = 1usize << self.content_levels.max(self.disc_downsamples);
        if height == 0 || width == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::Shape(format!("{height}x{width} is not divisible by {factor}")));
        }
        Ok(())
    }
}

/// Multi-scale content features, finest first; the last level is the bottleneck.
#[derive(Clone, Debug)]
pub struct ContentCode {
    pub levels: Vec<Tensor>,
}

impl ContentCode {
    pub fn bottleneck(&self) -> &Tensor {
        self.levels.last().expect("at least one level")
    }

    pub fn detach(&self) -> ContentCode {
        ContentCode {
            levels: self.levels.iter().map(Tensor::detach).collect(),
        }
    }

    /// Selects samples `start..start+len` of every level.
    pub fn narrow(&self, start: usize, len: usize) -> Result<ContentCode> {
        Ok(ContentCode {
            levels: self.levels.iter().map(|l| l.narrow(0, start, len)).collect::<candle_core::Result<_>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutputs {
    pub recon_a: Tensor,
    pub recon_b: Tensor,
    pub trans_ab: Tensor,
    pub trans_ba: Tensor,
    pub seg_a: Tensor,
    pub seg_b: Tensor,
}

#[derive(Clone, Debug)]
pub struct DiscriminatorOutputs {
    /// `N x 1 x H/2^P x W/2^P` real/fake probabilities.
    pub src: Tensor,
    /// `N x M` modality distribution.
    pub cls: Tensor,
}

struct StyleEncoder {
    convs: Vec<Conv2d>,
    head: Linear,
}

impl StyleEncoder {
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 1 + cfg.n_modalities;
        for k in 1..=cfg.content_levels {
            let c_out = cfg.level_channels(k);
            convs.push(store.conv(&format!("{STYLE_ENCODER}conv{k}"), c_in, c_out, 3, 2)?);
            c_in = c_out;
        }
        let head = store.linear(&format!("{STYLE_ENCODER}head"), c_in, cfg.n_s)?;
        Ok(Self { convs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        let pooled = h.mean(3)?.mean(2)?;
        self.head.forward(&pooled)
    }
}

struct ContentEncoder {
    down: Vec<Conv2d>,
    refine: Vec<Conv2d>,
}

impl ContentEncoder {
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Result<Self> {
        let (mut down, mut refine) = (Vec::new(), Vec::new());
        let mut c_in = 1 + cfg.n_modalities;
        for k in 1..=cfg.content_levels {
            let c = cfg.level_channels(k);
            down.push(store.conv(&format!("{CONTENT_ENCODER}down{k}"), c_in, c, 3, 2)?);
            refine.push(store.conv(&format!("{CONTENT_ENCODER}refine{k}"), c, c, 3, 1)?);
            c_in = c;
        }
        Ok(Self { down, refine })
    }

    fn forward(&self, x: &Tensor) -> Result<ContentCode> {
        let mut levels = Vec::with_capacity(self.down.len());
        let mut h = x.clone();
        for (down, refine) in self.down.iter().zip(&self.refine) {
            h = leaky_relu(&instance_norm(&down.forward(&h)?)?)?;
            h = leaky_relu(&instance_norm(&refine.forward(&h)?)?)?;
            levels.push(h.clone());
        }
        Ok(ContentCode { levels })
    }
}

/// Decodes the bottleneck alone, with every normalization layer modulated
/// by the style code: residual blocks at the bottleneck, then two convs
/// after each upsampling.
struct TranslationDecoder {
    mlp_hidden: Linear,
    mlp_out: Linear,
    res: Vec<[Conv2d; 2]>,
    up: Vec<[Conv2d; 2]>,
    out: Conv2d,
}

const TRANSLATION_RES_BLOCKS: usize = 2;

/// Consumes scale/shift pairs from the style parameters in layer order.
struct Modulation<'a> {
    params: &'a Tensor,
    offset: usize,
}

impl Modulation<'_> {
    fn apply(&mut self, conv: &Conv2d, h: &Tensor) -> Result<Tensor> {
        let h = conv.forward(h)?;
        let c = conv.out_channels();
        let scale = self.params.narrow(1, self.offset, c)?;
        let shift = self.params.narrow(1, self.offset + c, c)?;
        self.offset += 2 * c;
        adain(&h, &scale, &shift)
    }
}

impl TranslationDecoder {
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Result<Self> {
        let k = cfg.content_levels;
        let cb = cfg.level_channels(k);
        let mut res = Vec::new();
        for r in 1..=TRANSLATION_RES_BLOCKS {
            res.push([
                store.conv(&format!("{TRANSLATION_DECODER}res{r}a"), cb, cb, 3, 1)?,
                store.conv(&format!("{TRANSLATION_DECODER}res{r}b"), cb, cb, 3, 1)?,
            ]);
        }
        let mut up = Vec::new();
        for (i, level) in (1..=k).rev().enumerate() {
            let c_in = cfg.level_channels(level);
            let c_out = cfg.level_channels(level.saturating_sub(1).max(1));
            up.push([
                store.conv(&format!("{TRANSLATION_DECODER}up{}a", i + 1), c_in, c_out, 3, 1)?,
                store.conv(&format!("{TRANSLATION_DECODER}up{}b", i + 1), c_out, c_out, 3, 1)?,
            ]);
        }
        let n_affine: usize = res.iter().chain(&up).flatten().map(|c| 2 * c.out_channels()).sum();
        let mlp_hidden = store.linear(&format!("{TRANSLATION_DECODER}mlp1"), cfg.n_s, cfg.style_hidden)?;
        let mlp_out = store.linear(&format!("{TRANSLATION_DECODER}mlp2"), cfg.style_hidden, n_affine)?;
        let out = store.conv(&format!("{TRANSLATION_DECODER}out"), cfg.level_channels(1), 1, 3, 1)?;
        Ok(Self { mlp_hidden, mlp_out, res, up, out })
    }

    fn forward(&self, bottleneck: &Tensor, style: &Tensor) -> Result<Tensor> {
        let params = self.mlp_out.forward(&self.mlp_hidden.forward(style)?.relu()?)?;
        let mut m = Modulation { params: &params, offset: 0 };
        let mut h = bottleneck.clone();
        for [a, b] in &self.res {
            let r = m.apply(a, &h)?.relu()?;
            h = (h + m.apply(b, &r)?)?;
        }
        for [a, b] in &self.up {
            h = upsample2(&h)?;
            h = m.apply(a, &h)?.relu()?;
            h = m.apply(b, &h)?.relu()?;
        }
        Ok(self.out.forward(&h)?.tanh()?)
    }
}

/// U-Net style decoder over the whole content pyramid.
struct SegmentationDecoder {
    merge: Vec<Conv2d>,
    full: Conv2d,
    out: Conv2d,
}

impl SegmentationDecoder {
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Result<Self> {
        let k = cfg.content_levels;
        let mut merge = Vec::new();
        for level in (1..k).rev() {
            let c_in = cfg.level_channels(level + 1) + cfg.level_channels(level);
            merge.push(store.conv(&format!("{SEGMENTATION_DECODER}merge{level}"), c_in, cfg.level_channels(level), 3, 1)?);
        }
        let full = store.conv(&format!("{SEGMENTATION_DECODER}full"), cfg.level_channels(1), cfg.base_width, 3, 1)?;
        let out = store.conv(&format!("{SEGMENTATION_DECODER}out"), cfg.base_width, cfg.n_regions, 1, 1)?;
        Ok(Self { merge, full, out })
    }

    fn forward(&self, content: &ContentCode) -> Result<Tensor> {
        let n = content.levels.len();
        let mut h = content.levels[n - 1].clone();
        for (i, conv) in self.merge.iter().enumerate() {
            let skip = &content.levels[n - 2 - i];
            h = Tensor::cat(&[&upsample2(&h)?, skip], 1)?;
            h = leaky_relu(&instance_norm(&conv.forward(&h)?)?)?;
        }
        h = leaky_relu(&self.full.forward(&upsample2(&h)?)?)?;
        sigmoid(&self.out.forward(&h)?)
    }
}

struct Discriminator {
    trunk: Vec<Conv2d>,
    src: Conv2d,
    cls: Linear,
}

impl Discriminator {
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut c_in = 1;
        for k in 1..=cfg.disc_downsamples {
            let c = cfg.level_channels(k);
            trunk.push(store.conv(&format!("{DISCRIMINATOR}conv{k}"), c_in, c, 3, 2)?);
            c_in = c;
        }
        let src = store.conv(&format!("{DISCRIMINATOR}src"), c_in, 1, 3, 1)?;
        let cls = store.linear(&format!("{DISCRIMINATOR}cls"), c_in, cfg.n_modalities)?;
        Ok(Self { trunk, src, cls })
    }

    fn forward(&self, x: &Tensor) -> Result<DiscriminatorOutputs> {
        let mut h = x.clone();
        for conv in &self.trunk {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        let src = sigmoid(&self.src.forward(&h)?)?;
        let cls = softmax_last(&self.cls.forward(&h.mean(3)?.mean(2)?)?)?;
        Ok(DiscriminatorOutputs { src, cls })
    }
}

/// The generator's four shared networks plus the discriminator, each with
/// exactly one parameter set.
pub struct Model {
    config: NetConfig,
    height: usize,
    width: usize,
    store: ParamStore,
    style_enc: StyleEncoder,
    content_enc: ContentEncoder,
    trans_dec: TranslationDecoder,
    seg_dec: SegmentationDecoder,
    disc: Discriminator,
}

impl Model {
    pub fn new(config: NetConfig, height: usize, width: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate(height, width)?;
        let mut store = ParamStore::new(seed, dtype, device);
        let style_enc = StyleEncoder::new(&mut store, &config)?;
        let content_enc = ContentEncoder::new(&mut store, &config)?;
        let trans_dec = TranslationDecoder::new(&mut store, &config)?;
        let seg_dec = SegmentationDecoder::new(&mut store, &config)?;
        let disc = Discriminator::new(&mut store, &config)?;
        Ok(Self {
            config,
            height,
            width,
            store,
            style_enc,
            content_enc,
            trans_dec,
            seg_dec,
            disc,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn parameters(&self) -> &[(String, Var)] {
        self.store.entries()
    }

    pub fn generator_vars(&self) -> Vec<Var> {
        self.store
            .vars_with_prefix(&[STYLE_ENCODER, CONTENT_ENCODER, TRANSLATION_DECODER, SEGMENTATION_DECODER])
    }

    pub fn segmentation_path_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix(&[CONTENT_ENCODER, SEGMENTATION_DECODER])
    }

    pub fn discriminator_vars(&self) -> Vec<Var> {
        self.store.vars_with_prefix(&[DISCRIMINATOR])
    }

    /// Overwrites every parameter with the given values, by name.
    pub fn load_parameters(&self, values: &[(String, Tensor)]) -> Result<()> {
        if values.len() != self.store.entries().len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.store.entries().len(),
                values.len()
            )));
        }
        for (name, var) in self.store.entries() {
            let (_, t) = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?} vs {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype())?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.store
            .entries()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    fn check_images(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if c != 1 || (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "expected N x 1 x {} x {} images, got {:?}",
                self.height,
                self.width,
                x.dims()
            )));
        }
        Ok(n)
    }

    /// One-hot label planes `N x M x H x W`.
    pub fn label_planes(&self, modalities: &[usize]) -> Result<Tensor> {
        let m = self.config.n_modalities;
        let mut onehot = vec![0f32; modalities.len() * m];
        for (i, &mi) in modalities.iter().enumerate() {
            if mi >= m {
                return Err(Error::InvalidArgument(format!("modality index {mi} out of range for M={m}")));
            }
            onehot[i * m + mi] = 1.0;
        }
        let t = Tensor::from_vec(onehot, (modalities.len(), m, 1, 1), self.device())?.to_dtype(self.dtype())?;
        Ok(t.broadcast_as((modalities.len(), m, self.height, self.width))?.contiguous()?)
    }

    /// Depth-wise concatenation of images and their expanded labels.
    pub fn labelled_input(&self, x: &Tensor, modalities: &[usize]) -> Result<Tensor> {
        let n = self.check_images(x)?;
        if n != modalities.len() {
            return Err(Error::Shape(format!("{n} images but {} labels", modalities.len())));
        }
        Ok(Tensor::cat(&[x, &self.label_planes(modalities)?], 1)?)
    }

    pub fn encode_style(&self, x: &Tensor, modalities: &[usize]) -> Result<Tensor> {
        self.style_enc.forward(&self.labelled_input(x, modalities)?)
    }

    pub fn encode_content(&self, x: &Tensor, modalities: &[usize]) -> Result<ContentCode> {
        self.content_enc.forward(&self.labelled_input(x, modalities)?)
    }

    pub fn decode_translation(&self, content: &ContentCode, style: &Tensor) -> Result<Tensor> {
        let (n, s) = style.dims2()?;
        if s != self.config.n_s || content.levels.len() != self.config.content_levels || content.bottleneck().dim(0)? != n {
            return Err(Error::Shape(format!("style {:?} incompatible with content", style.dims())));
        }
        self.trans_dec.forward(content.bottleneck(), style)
    }

    pub fn decode_segmentation(&self, content: &ContentCode) -> Result<Tensor> {
        if content.levels.len() != self.config.content_levels {
            return Err(Error::Shape(format!("expected {} content levels", self.config.content_levels)));
        }
        self.seg_dec.forward(content)
    }

    /// `G((x_a, m_a), (x_b, m_b))`: reconstructions, cross translations and
    /// segmentations of both inputs.
    pub fn generator_forward_pair(&self, xa: &Tensor, ma: &[usize], xb: &Tensor, mb: &[usize]) -> Result<GeneratorOutputs> {
        if xa.dims() != xb.dims() {
            return Err(Error::Shape(format!("pair inputs differ: {:?} vs {:?}", xa.dims(), xb.dims())));
        }
        let sa = self.encode_style(xa, ma)?;
        let sb = self.encode_style(xb, mb)?;
        let ca = self.encode_content(xa, ma)?;
        let cb = self.encode_content(xb, mb)?;
        Ok(GeneratorOutputs {
            recon_a: self.decode_translation(&ca, &sa)?,
            recon_b: self.decode_translation(&cb, &sb)?,
            trans_ab: self.decode_translation(&ca, &sb)?,
            trans_ba: self.decode_translation(&cb, &sa)?,
            seg_a: self.decode_segmentation(&ca)?,
            seg_b: self.decode_segmentation(&cb)?,
        })
    }

    /// Test-time path: segmentation from a single labelled image.
    pub fn generator_forward_single(&self, x: &Tensor, m: &[usize]) -> Result<Tensor> {
        self.decode_segmentation(&self.encode_content(x, m)?)
    }

    pub fn discriminate(&self, x: &Tensor) -> Result<DiscriminatorOutputs> {
        self.check_images(x)?;
        self.disc.forward(x)
    }
}
