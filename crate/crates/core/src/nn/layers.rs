//! Forward and backward kernels for the layer set used by the encoder and
//! heads. Every backward is the exact derivative of its forward.

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{PimError, Result};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn conv_out_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    if len < kernel || stride == 0 {
        None
    } else {
        Some((len - kernel) / stride + 1)
    }
}

fn conv_dims(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    x.expect_ndim(3, "conv1d input")?;
    w.expect_ndim(3, "conv1d weight")?;
    let (batch, in_ch, len) = (x.dim(0), x.dim(1), x.dim(2));
    let (out_ch, w_in, k) = (w.dim(0), w.dim(1), w.dim(2));
    if w_in != in_ch {
        return Err(PimError::ShapeMismatch(format!(
            "conv1d weight expects {w_in} input channels, got {in_ch}"
        )));
    }
    let out_len = conv_out_len(len, k, stride).ok_or_else(|| {
        PimError::ShapeMismatch(format!("conv1d input length {len} shorter than kernel {k}"))
    })?;
    Ok((batch, in_ch, len, out_ch, k, out_len))
}

/// Valid 1-D cross-correlation: `y[b,o,t] = bias[o] + sum_{i,k} w[o,i,k] x[b,i,t*s+k]`.
pub fn conv1d_forward(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (batch, in_ch, len, out_ch, k, out_len) = conv_dims(x, w, stride)?;
    bias.expect_shape(&[out_ch])?;
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let mut y = vec![0.0; batch * out_ch * out_len];
    for b in 0..batch {
        for o in 0..out_ch {
            let out = &mut y[(b * out_ch + o) * out_len..][..out_len];
            out.fill(bd[o]);
            for i in 0..in_ch {
                let xrow = &xd[(b * in_ch + i) * len..][..len];
                let wrow = &wd[(o * in_ch + i) * k..][..k];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if stride == 1 {
                        for (acc, &xv) in out.iter_mut().zip(&xrow[kk..kk + out_len]) {
                            *acc += wv * xv;
                        }
                    } else {
                        for (t, acc) in out.iter_mut().enumerate() {
                            *acc += wv * xrow[t * stride + kk];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, out_ch, out_len], y)
}

#[derive(Debug, Clone)]
pub struct Conv1dGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn conv1d_backward(x: &Tensor, w: &Tensor, stride: usize, dy: &Tensor) -> Result<Conv1dGrads> {
    let (batch, in_ch, len, out_ch, k, out_len) = conv_dims(x, w, stride)?;
    dy.expect_shape(&[batch, out_ch, out_len])?;
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wd.len()];
    let mut db = vec![0.0; out_ch];
    for b in 0..batch {
        for o in 0..out_ch {
            let g = &gd[(b * out_ch + o) * out_len..][..out_len];
            db[o] += g.iter().sum::<f64>();
            for i in 0..in_ch {
                let xrow = &xd[(b * in_ch + i) * len..][..len];
                let dxrow = &mut dx[(b * in_ch + i) * len..][..len];
                let base = (o * in_ch + i) * k;
                for kk in 0..k {
                    let wv = wd[base + kk];
                    if stride == 1 {
                        let xs = &xrow[kk..kk + out_len];
                        dw[base + kk] += g.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        for (d, &gv) in dxrow[kk..kk + out_len].iter_mut().zip(g) {
                            *d += wv * gv;
                        }
                    } else {
                        let mut acc = 0.0;
                        for (t, &gv) in g.iter().enumerate() {
                            acc += gv * xrow[t * stride + kk];
                            dxrow[t * stride + kk] += wv * gv;
                        }
                        dw[base + kk] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv1dGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new(vec![out_ch], db)?,
    })
}

fn dense_dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
    x.expect_ndim(2, "dense input")?;
    w.expect_ndim(2, "dense weight")?;
    let (batch, fan_in) = (x.dim(0), x.dim(1));
    if w.dim(1) != fan_in {
        return Err(PimError::ShapeMismatch(format!(
            "dense weight expects {} inputs, got {fan_in}",
            w.dim(1)
        )));
    }
    Ok((batch, fan_in, w.dim(0)))
}

/// `y = x W^T + b` with `W: [out, in]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (batch, fan_in, out) = dense_dims(x, w)?;
    bias.expect_shape(&[out])?;
    let mut y = Vec::with_capacity(batch * out);
    for xr in x.data().chunks_exact(fan_in.max(1)).take(batch) {
        for (o, wr) in w.data().chunks_exact(fan_in.max(1)).take(out).enumerate() {
            y.push(bias.data()[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    Tensor::new(vec![batch, out], y)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<DenseGrads> {
    let (batch, fan_in, out) = dense_dims(x, w)?;
    dy.expect_shape(&[batch, out])?;
    let mut dx = vec![0.0; batch * fan_in];
    let mut dw = vec![0.0; out * fan_in];
    let mut db = vec![0.0; out];
    for b in 0..batch {
        let xr = &x.data()[b * fan_in..][..fan_in];
        let dxr = &mut dx[b * fan_in..][..fan_in];
        for o in 0..out {
            let g = dy.data()[b * out + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &w.data()[o * fan_in..][..fan_in];
            let dwr = &mut dw[o * fan_in..][..fan_in];
            for j in 0..fan_in {
                dwr[j] += g * xr[j];
                dxr[j] += g * wr[j];
            }
        }
    }
    Ok(DenseGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        dw: Tensor::new(w.shape().to_vec(), dw)?,
        db: Tensor::new(vec![out], db)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward *input*.
pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.expect_shape(x.shape())?;
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Gradient through sigmoid given the forward *output*.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.expect_shape(y.shape())?;
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&s, &g)| g * s * (1.0 - s))
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for row in x.rows() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Gradient through softmax given the forward *output*.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    dy.expect_shape(y.shape())?;
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.rows().zip(dy.rows()) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(s, g)| s * (g - dot)));
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Normalized activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row of `x: [batch, features]`, then scales and shifts.
pub fn layer_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    x.expect_ndim(2, "layer norm input")?;
    let f = x.dim(1);
    gamma.expect_shape(&[f])?;
    beta.expect_shape(&[f])?;
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.dim(0));
    for row in x.rows() {
        let mean = row.iter().sum::<f64>() / f as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for (j, v) in row.iter().enumerate() {
            let h = (v - mean) * inv;
            xhat.push(h);
            y.push(h * gamma.data()[j] + beta.data()[j]);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        LayerNormCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    dy.expect_shape(cache.xhat.shape())?;
    let f = cache.xhat.dim(1);
    let mut dx = Vec::with_capacity(dy.len());
    let mut dgamma = vec![0.0; f];
    let mut dbeta = vec![0.0; f];
    for ((hr, gr), &inv) in cache.xhat.rows().zip(dy.rows()).zip(&cache.inv_std) {
        let mut sum_g = 0.0;
        let mut sum_gh = 0.0;
        for j in 0..f {
            let gh = gr[j] * gamma.data()[j];
            sum_g += gh;
            sum_gh += gh * hr[j];
            dgamma[j] += gr[j] * hr[j];
            dbeta[j] += gr[j];
        }
        let n = f as f64;
        for j in 0..f {
            let gh = gr[j] * gamma.data()[j];
            dx.push(inv * (gh - sum_g / n - hr[j] * sum_gh / n));
        }
    }
    Ok((
        Tensor::new(cache.xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![f], dgamma)?,
        Tensor::new(vec![f], dbeta)?,
    ))
}

/// Inverted dropout. In eval mode (or with `rate == 0`) this is the identity
/// and no mask is returned.
pub fn dropout_forward<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> (Tensor, Option<Tensor>) {
    if !train || rate <= 0.0 {
        return (x.clone(), None);
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        })
        .collect();
    let mask = Tensor::new(x.shape().to_vec(), mask).expect("same shape");
    (x.mul(&mask).expect("same shape"), Some(mask))
}

pub fn dropout_backward(mask: Option<&Tensor>, dy: &Tensor) -> Result<Tensor> {
    match mask {
        Some(m) => dy.mul(m),
        None => Ok(dy.clone()),
    }
}

/// Max over the time axis of `[batch, channels, len]`; ties go to the lowest
/// index. Returns the pooled values and the flat argmax positions.
pub fn global_max_pool_1d(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    x.expect_ndim(3, "global max pool input")?;
    let len = x.dim(2);
    if len == 0 {
        return Err(PimError::ShapeMismatch("max pool over empty axis".into()));
    }
    let mut out = Vec::with_capacity(x.dim(0) * x.dim(1));
    let mut idx = Vec::with_capacity(out.capacity());
    for (r, row) in x.rows().enumerate() {
        let mut best = 0;
        for (t, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = t;
            }
        }
        out.push(row[best]);
        idx.push(r * len + best);
    }
    Ok((Tensor::new(vec![x.dim(0), x.dim(1)], out)?, idx))
}

pub fn global_max_pool_1d_backward(
    argmax: &[usize],
    input_shape: &[usize],
    dy: &Tensor,
) -> Result<Tensor> {
    if input_shape.len() != 3 {
        return Err(PimError::ShapeMismatch("max pool input must be 3-D".into()));
    }
    dy.expect_shape(&input_shape[..2])?;
    let mut dx = Tensor::zeros(input_shape);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i] += g;
    }
    Ok(dx)
}
