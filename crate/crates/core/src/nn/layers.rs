use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Named parameters in creation order, initialized from a seeded stream.
pub struct ParamStore {
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            entries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        self.register(name, Tensor::zeros(shape, self.dtype, &self.device)?)
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        self.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Result<Conv2d> {
        let fan_in = (c_in * kernel * kernel) as f64;
        Ok(Conv2d {
            weight: self.normal(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt())?,
            bias: self.zeros(&format!("{name}.bias"), &[c_out])?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.normal(&format!("{name}.weight"), &[d_out, d_in], (1.0 / d_in as f64).sqrt())?,
            bias: self.zeros(&format!("{name}.bias"), &[d_out])?,
        })
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.entries
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * 0.2)?)?)
}

/// Logistic function through `tanh`, whose derivative stays finite when
/// the argument saturates.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Per-sample, per-channel normalization over the spatial dimensions.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(3)?.mean_keepdim(2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

/// Instance normalization followed by a per-sample affine modulation;
/// `scale` and `shift` are `N x C`.
pub fn adain(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c) = scale.dims2()?;
    let scale = (scale.reshape((n, c, 1, 1))? + 1.0)?;
    let shift = shift.reshape((n, c, 1, 1))?;
    Ok(instance_norm(x)?.broadcast_mul(&scale)?.broadcast_add(&shift)?)
}

pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    Ok(x.upsample_nearest2d(h * 2, w * 2)?)
}
