//! Multi-head scaled dot-product attention with additive masks.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::rng::DetRng;

/// Additive attention mask: 0 where attending is allowed, −∞ elsewhere.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl AttentionMask {
    pub fn from_allowed(rows: usize, cols: usize, allowed: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let values: Vec<f32> = (0..rows * cols)
            .map(|i| if allowed(i / cols, i % cols) { 0.0 } else { f32::NEG_INFINITY })
            .collect();
        Self::from_values(rows, cols, values)
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid("mask values do not match its shape"));
        }
        for r in 0..rows {
            if values[r * cols..(r + 1) * cols].iter().all(|v| *v == f32::NEG_INFINITY) {
                return Err(Error::invalid(format!(
                    "attention mask row {r} masks every key; softmax undefined"
                )));
            }
        }
        Ok(Self { rows, cols, values })
    }

    /// Each query attends only to the key at its own frame.
    pub fn diagonal(len: usize) -> Result<Self> {
        Self::from_allowed(len, len, |i, j| i == j)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::from_allowed(rows, cols, |_, _| true)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_diagonal(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| {
                (0..self.cols).all(|j| (self.values[i * self.cols + j] == 0.0) == (i == j))
            })
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.rows, self.cols), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, t, w) = x.dims3()?;
    Ok(x.reshape((b, t, heads, w / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, t, d) = x.dims4()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, t, h * d))?)
}

/// `softmax(Q Kᵀ / √d + M) V` on already-projected (B, T, W) inputs, split
/// into `heads` heads of width d = W / heads.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: Option<&AttentionMask>,
    heads: usize,
) -> Result<Tensor> {
    let (b, tq, w) = q.dims3()?;
    let (bk, tk, wk) = k.dims3()?;
    if v.dims3()? != (bk, tk, wk) || bk != b || wk != w {
        return Err(Error::invalid(format!(
            "attention shape mismatch: q {:?}, k {:?}, v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if heads == 0 || w % heads != 0 {
        return Err(Error::invalid(format!("width {w} not divisible by {heads} heads")));
    }
    let d = w / heads;
    let (qh, kh, vh) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut logits = (qh.matmul(&kh.t()?)? / (d as f64).sqrt())?;
    if let Some(m) = mask {
        if m.shape() != (tq, tk) {
            return Err(Error::invalid(format!(
                "mask shape {:?} does not match attention {tq}×{tk}",
                m.shape()
            )));
        }
        logits = logits.broadcast_add(&m.to_tensor(q.dtype())?)?;
    }
    let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
    merge_heads(&weights.matmul(&vh)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, rng: &mut DetRng, name: &str, width: usize, kv_width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!("width {width} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), width, width)?,
            k: Linear::new(ps, rng, &format!("{name}.k"), kv_width, width)?,
            v: Linear::new(ps, rng, &format!("{name}.v"), kv_width, width)?,
            o: Linear::new(ps, rng, &format!("{name}.o"), width, width)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor, kv: &Tensor, mask: Option<&AttentionMask>) -> Result<Tensor> {
        let out = attention(
            &self.q.forward(x)?,
            &self.k.forward(kv)?,
            &self.v.forward(kv)?,
            mask,
            self.heads,
        )?;
        self.o.forward(&out)
    }
}
