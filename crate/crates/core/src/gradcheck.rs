//! Central finite-difference gradient checking for scalar tensor functions.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Relative error `|g_a - g_n| / max(|g_a|, |g_n|)` (Euclidean norms) between the
/// autograd gradient of `f` at `x0` and its central-difference estimate with step `h`.
///
/// `f` must map a float64 tensor to a scalar.
pub fn relative_error<F>(f: F, x0: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if x0.dtype() != DType::F64 {
        return Err(Error::InvalidArgument("gradient checks run in float64".into()));
    }
    let var = Var::from_tensor(x0)?;
    let y = f(var.as_tensor())?;
    let grads = y.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; x0.elem_count()],
    };

    let base: Vec<f64> = x0.flatten_all()?.to_vec1()?;
    let mut numeric = Vec::with_capacity(base.len());
    let eval = |values: &[f64]| -> Result<f64> {
        let t = Tensor::from_slice(values, x0.dims(), x0.device())?;
        Ok(f(&t)?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    };
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = eval(&probe)?;
        probe[i] = base[i] - h;
        let down = eval(&probe)?;
        probe[i] = base[i];
        numeric.push((up - down) / (2.0 * h));
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok(norm(&diff) / scale)
}
