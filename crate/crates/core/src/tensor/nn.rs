//! Layers assembled from graph primitives.

use super::params::{BoundParams, ParamStore};
use super::{Real, Rng, Tensor, Var};
use crate::error::{Error, Result};

/// Patch-extraction geometry for an NHWC convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::Dimension(format!(
                "convolution input must be [B, H, W, C], got {shape:?}"
            )));
        }
        let (batch, height, width, channels) = (shape[0], shape[1], shape[2], shape[3]);
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::Dimension(format!(
                "kernel {kernel} stride {stride} pad {pad} does not fit {shape:?}"
            )));
        }
        Ok(Conv2dGeometry {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn cols(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    /// Source offset of kernel tap `(ky, kx)` for output `(oy, ox)`, if inside.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        if iy >= self.height || ix >= self.width {
            return None;
        }
        Some(((b * self.height + iy) * self.width + ix) * self.channels)
    }

    pub fn im2col<T: Real>(&self, input: &[T]) -> Vec<T> {
        let c = self.channels;
        let cols = self.cols();
        let mut out = vec![T::zero(); self.rows() * cols];
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * cols;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            if let Some(src) = self.source(b, oy, ox, ky, kx) {
                                let dst = row + (ky * self.kernel + kx) * c;
                                out[dst..dst + c].copy_from_slice(&input[src..src + c]);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn col2im_accumulate<T: Real>(&self, cols_grad: &[T], input_grad: &mut [T]) {
        let c = self.channels;
        let cols = self.cols();
        for b in 0..self.batch {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let row = ((b * self.out_h + oy) * self.out_w + ox) * cols;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            if let Some(dst) = self.source(b, oy, ox, ky, kx) {
                                let src = row + (ky * self.kernel + kx) * c;
                                for (g, &v) in input_grad[dst..dst + c]
                                    .iter_mut()
                                    .zip(&cols_grad[src..src + c])
                                {
                                    *g += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Uniform in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform<T: Real>(
    rng: &mut Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(shape, -limit, limit)
}

/// `x · w (+ b)` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<'g, T: Real>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Option<Var<'g, T>>,
) -> Result<Var<'g, T>> {
    let y = x.matmul(weight)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// NHWC convolution with weight `[k·k·C_in, C_out]` in `(ky, kx, c)` order.
pub fn conv2d<'g, T: Real>(
    x: Var<'g, T>,
    weight: Var<'g, T>,
    bias: Var<'g, T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Var<'g, T>> {
    let geom = Conv2dGeometry::new(&x.shape(), kernel, stride, pad)?;
    let w_shape = weight.shape();
    if w_shape.len() != 2 || w_shape[0] != geom.cols() {
        return Err(Error::Dimension(format!(
            "conv weight {w_shape:?} does not match {} patch values",
            geom.cols()
        )));
    }
    let cols = x.im2col(kernel, stride, pad)?;
    let y = cols.matmul(weight)?.add(bias)?;
    y.reshape(&[geom.batch, geom.out_h, geom.out_w, w_shape[1]])
}

/// Layer normalization over the last axis.
pub fn layer_norm<'g, T: Real>(
    x: Var<'g, T>,
    gain: Var<'g, T>,
    bias: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    if eps <= 0.0 {
        return Err(Error::Config(format!(
            "layer norm eps must be > 0, got {eps}"
        )));
    }
    x.layer_norm_op(gain, bias, eps)
}

/// Dense multi-head attention without masking.
///
/// Projections map queries, keys and values into a shared model width split
/// evenly across heads; per-head scores are scaled by `1/√(model/heads)`.
/// Returns the output and the per-head attention matrices `[Nq, Nk]`.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    wq: Var<'g, T>,
    wk: Var<'g, T>,
    wv: Var<'g, T>,
    wo: Var<'g, T>,
    heads: usize,
) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
    let model = wq.shape()[1];
    if heads == 0 || model % heads != 0 {
        return Err(Error::Config(format!(
            "model width {model} is not divisible into {heads} heads"
        )));
    }
    if wk.shape()[1] != model || wv.shape()[1] != model || wo.shape()[0] != model {
        return Err(Error::Config(format!(
            "projection widths disagree: q {:?} k {:?} v {:?} o {:?}",
            wq.shape(),
            wk.shape(),
            wv.shape(),
            wo.shape()
        )));
    }
    if k.shape()[0] != v.shape()[0] {
        return Err(Error::Config(format!(
            "{} keys but {} values",
            k.shape()[0],
            v.shape()[0]
        )));
    }
    let head_dim = model / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let qp = q.matmul(wq)?;
    let kp = k.matmul(wk)?;
    let vp = v.matmul(wv)?;
    let mut outputs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                qp.narrow(1, h * head_dim, head_dim)?,
                kp.narrow(1, h * head_dim, head_dim)?,
                vp.narrow(1, h * head_dim, head_dim)?,
            )
        };
        let scores = qh.matmul(kh.transpose()?)?.scale(scale);
        let attn = scores.softmax(1)?;
        outputs.push(attn.matmul(vh)?);
        weights.push(attn);
    }
    let joined = if heads == 1 {
        outputs[0]
    } else {
        Var::concat(&outputs, 1)?
    };
    Ok((joined.matmul(wo)?, weights))
}

/// Parameterized attention block stored under `prefix.{wq,wk,wv,wo}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub query_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub model_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        prefix: impl Into<String>,
        query_dim: usize,
        key_dim: usize,
        value_dim: usize,
        model_dim: usize,
        out_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model width {model_dim} is not divisible into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            prefix: prefix.into(),
            query_dim,
            key_dim,
            value_dim,
            model_dim,
            out_dim,
            heads,
        })
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Rng) {
        let mut rng = rng.split(&self.prefix);
        let m = self.model_dim;
        for (leaf, fan_in, fan_out) in [
            ("wq", self.query_dim, m),
            ("wk", self.key_dim, m),
            ("wv", self.value_dim, m),
            ("wo", m, self.out_dim),
        ] {
            let w = glorot_uniform(&mut rng, &[fan_in, fan_out], fan_in, fan_out);
            store.insert(self.name(leaf), w);
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        params: &BoundParams<'g, T>,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(params, q, k, v)?.0)
    }

    pub fn forward_with_weights<'g, T: Real>(
        &self,
        params: &BoundParams<'g, T>,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        for (what, var, dim) in [
            ("query", q, self.query_dim),
            ("key", k, self.key_dim),
            ("value", v, self.value_dim),
        ] {
            let s = var.shape();
            if s.len() != 2 || s[1] != dim {
                return Err(Error::Config(format!(
                    "{}: {what} tokens {s:?}, expected width {dim}",
                    self.prefix
                )));
            }
        }
        multi_head_attention(
            q,
            k,
            v,
            params.get(&self.name("wq"))?,
            params.get(&self.name("wk"))?,
            params.get(&self.name("wv"))?,
            params.get(&self.name("wo"))?,
            self.heads,
        )
    }
}
