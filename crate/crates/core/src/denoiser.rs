//! The ε-prediction network: per block FiLM(timestep) → self-attention →
//! diagonal-masked content cross-attention → AdaIN(style) → feed-forward.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMask, MultiHeadAttention};
use crate::diffusion::{NoisePredictor, ScheduleSpec};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal, Activation, Checkpoint, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::rng::{normal_vec, rng_from, seed_from_str};

pub const DENOISER_KIND: &str = "denoiser";
const INSTANCE_NORM_EPS: f64 = 1e-5;

/// What the network output stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Predicts the injected noise ε.
    Epsilon,
    /// Regresses Z_0 directly (deterministic baseline).
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Expression channels D.
    pub channels: usize,
    /// Content feature width F_a.
    pub content_dim: usize,
    /// Style / template width F_s.
    pub style_dim: usize,
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
    pub seed: u64,
    pub parameterization: Parameterization,
    /// Schedule the network is trained for.
    #[serde(default)]
    pub schedule: ScheduleSpec,
}

impl DenoiserConfig {
    pub fn new(channels: usize, content_dim: usize, style_dim: usize) -> Self {
        Self {
            channels,
            content_dim,
            style_dim,
            blocks: 4,
            width: 128,
            heads: 4,
            ffn: 256,
            seed: 0,
            parameterization: Parameterization::Epsilon,
            schedule: ScheduleSpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.content_dim,
            self.style_dim,
            self.blocks,
            self.width,
            self.heads,
            self.ffn,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("denoiser sizes must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

/// Content A (B, T, F_a), style z_s (B, F_s) and identity template (B, F_s).
#[derive(Debug, Clone)]
pub struct DenoiserConditioning {
    pub content: Tensor,
    pub style: Tensor,
    pub template: Tensor,
}

impl DenoiserConditioning {
    pub fn new(content: Tensor, style: Tensor, template: Tensor) -> Result<Self> {
        let c = Self { content, style, template };
        c.batch_and_length()?;
        Ok(c)
    }

    /// One clip: content T×F_a, style and template vectors.
    pub fn single(content: &Array2<f32>, style: &[f32], template: &[f32], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let c = Tensor::from_slice(
            content.as_standard_layout().as_slice().unwrap(),
            (1, content.nrows(), content.ncols()),
            &dev,
        )?;
        Self::new(
            c.to_dtype(dtype)?,
            Tensor::from_slice(style, (1, style.len()), &dev)?.to_dtype(dtype)?,
            Tensor::from_slice(template, (1, template.len()), &dev)?.to_dtype(dtype)?,
        )
    }

    pub fn cat(parts: &[DenoiserConditioning]) -> Result<Self> {
        let pick = |f: fn(&DenoiserConditioning) -> &Tensor| -> Result<Tensor> {
            Ok(Tensor::cat(&parts.iter().map(f).collect::<Vec<_>>(), 0)?)
        };
        Self::new(pick(|c| &c.content)?, pick(|c| &c.style)?, pick(|c| &c.template)?)
    }

    pub fn batch_and_length(&self) -> Result<(usize, usize)> {
        let (b, t, _) = self.content.dims3()?;
        let (bs, _) = self.style.dims2()?;
        let (bt, _) = self.template.dims2()?;
        if bs != b || bt != b {
            return Err(Error::invalid("conditioning batch sizes disagree"));
        }
        if t == 0 {
            return Err(Error::invalid("empty content track"));
        }
        Ok((b, t))
    }
}

/// Linear-interpolation resampling of a feature track to `len` frames.
pub fn resample_linear(track: &Array2<f32>, len: usize) -> Result<Array2<f32>> {
    let n = track.nrows();
    if n == 0 || len == 0 {
        return Err(Error::invalid("cannot resample an empty track"));
    }
    if n == len {
        return Ok(track.clone());
    }
    let mut out = Array2::zeros((len, track.ncols()));
    for i in 0..len {
        let x = if len == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (len - 1) as f64 };
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let w = (x - lo as f64) as f32;
        for c in 0..track.ncols() {
            out[[i, c]] = track[[lo, c]] * (1.0 - w) + track[[hi, c]] * w;
        }
    }
    Ok(out)
}

/// Deterministic unit-norm identity vector for a subject id.
pub fn template_vector(subject_id: &str, dim: usize) -> Vec<f32> {
    let mut rng = rng_from(seed_from_str(subject_id));
    let v = normal_vec(&mut rng, dim, 1.0);
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x as f64 / n) as f32).collect()
}

/// Timestep FiLM: γ = 1 + g(n), δ = d(n) from a zero-initialised output layer.
#[derive(Debug, Clone)]
pub struct Film {
    net: Mlp,
    width: usize,
}

impl Film {
    fn new(ps: &mut ParamStore, rng: &mut crate::rng::DetRng, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ps, rng, name, &[width, width, 2 * width], Activation::Silu, true)?,
            width,
        })
    }

    /// (γ, δ), each (B, 1, W), from a (B, W) timestep embedding.
    pub fn params(&self, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(temb)?.unsqueeze(1)?;
        let gamma = (out.narrow(D::Minus1, 0, self.width)? + 1.0)?;
        let delta = out.narrow(D::Minus1, self.width, self.width)?;
        Ok((gamma, delta))
    }

    pub fn modulate(&self, h: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (g, d) = self.params(temb)?;
        Ok(h.broadcast_mul(&g)?.broadcast_add(&d)?)
    }
}

/// Per-channel normalisation over the frame axis of (B, T, W).
pub fn instance_norm(h: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = h.mean_keepdim(1)?;
    let centered = h.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Style AdaIN: γ_s ⊙ IN(h) + δ_s with (γ_s, δ_s) from a 3-layer network on z_s.
#[derive(Debug, Clone)]
pub struct AdaIn {
    net: Mlp,
    width: usize,
}

impl AdaIn {
    fn new(ps: &mut ParamStore, rng: &mut crate::rng::DetRng, name: &str, style_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            net: Mlp::new(ps, rng, name, &[style_dim, width, width, 2 * width], Activation::Silu, true)?,
            width,
        })
    }

    /// (γ_s, δ_s), each (B, 1, W).
    pub fn params(&self, style: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = self.net.forward(style)?.unsqueeze(1)?;
        let gamma = (out.narrow(D::Minus1, 0, self.width)? + 1.0)?;
        let delta = out.narrow(D::Minus1, self.width, self.width)?;
        Ok((gamma, delta))
    }

    pub fn apply(&self, h: &Tensor, style: &Tensor) -> Result<Tensor> {
        let (g, d) = self.params(style)?;
        Ok(instance_norm(h, INSTANCE_NORM_EPS)?.broadcast_mul(&g)?.broadcast_add(&d)?)
    }
}

/// Diagonal-masked attention of motion queries over content keys/values.
pub fn content_attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask, heads: usize) -> Result<Tensor> {
    crate::attention::attention(q, k, v, Some(mask), heads)
}

#[derive(Debug, Clone)]
struct Block {
    film: Film,
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    adain: AdaIn,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

/// Switches used by probes; everything on in normal operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub self_attention: bool,
    pub adain: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            self_attention: true,
            adain: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    params: ParamStore,
    input: Linear,
    template_proj: Linear,
    null_content: Tensor,
    null_style: Tensor,
    blocks: Vec<Block>,
    out_norm: LayerNorm,
    output: Linear,
    ablation: Ablation,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: DenoiserConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype);
        let mut rng = rng_from(config.seed);
        let r = &mut rng;
        let w = config.width;
        let input = Linear::new(&mut ps, r, "input", config.channels, w)?;
        let template_proj = Linear::new(&mut ps, r, "template", config.style_dim, w)?;
        let null_content = ps.param("null.content", &[config.content_dim], Init::Normal(0.1), r)?;
        let null_style = ps.param("null.style", &[config.style_dim], Init::Normal(0.1), r)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = |s: &str| format!("block{i}.{s}");
                Ok(Block {
                    film: Film::new(&mut ps, r, &n("film"), w)?,
                    norm_self: LayerNorm::new(&mut ps, r, &n("norm_self"), w)?,
                    self_attn: MultiHeadAttention::new(&mut ps, r, &n("self_attn"), w, w, config.heads)?,
                    norm_cross: LayerNorm::new(&mut ps, r, &n("norm_cross"), w)?,
                    cross_attn: MultiHeadAttention::new(&mut ps, r, &n("cross_attn"), w, config.content_dim, config.heads)?,
                    adain: AdaIn::new(&mut ps, r, &n("adain"), config.style_dim, w)?,
                    norm_ffn: LayerNorm::new(&mut ps, r, &n("norm_ffn"), w)?,
                    ffn: Mlp::new(&mut ps, r, &n("ffn"), &[w, config.ffn, w], Activation::Gelu, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_norm = LayerNorm::new(&mut ps, r, "out_norm", w)?;
        let output = Linear::new(&mut ps, r, "output", w, config.channels)?;
        Ok(Self {
            config,
            params: ps,
            input,
            template_proj,
            null_content,
            null_style,
            blocks,
            out_norm,
            output,
            ablation: Ablation::default(),
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.params.fingerprint("")
    }

    fn timestep_embedding(&self, t: &[usize]) -> Result<Tensor> {
        let pos: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        sinusoidal(&pos, self.config.width, self.params.dtype())
    }

    /// Row-wise selection between real and null conditioning.
    fn masked_conditioning(&self, cond: &DenoiserConditioning, keep: &[bool]) -> Result<(Tensor, Tensor)> {
        let (b, t) = cond.batch_and_length()?;
        if keep.len() != b {
            return Err(Error::invalid("one keep flag per batch row required"));
        }
        let dt = self.params.dtype();
        let content = cond.content.to_dtype(dt)?;
        let style = cond.style.to_dtype(dt)?;
        if keep.iter().all(|k| *k) {
            return Ok((content, style));
        }
        let m: Vec<f32> = keep.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect();
        let m = Tensor::from_vec(m, (b, 1), &Device::Cpu)?.to_dtype(dt)?;
        let inv = (1.0 - &m)?;
        let null_c = self
            .null_content
            .reshape((1, 1, self.config.content_dim))?
            .broadcast_as((b, t, self.config.content_dim))?;
        let m3 = m.unsqueeze(2)?;
        let inv3 = inv.unsqueeze(2)?;
        let content = (content.broadcast_mul(&m3)? + null_c.broadcast_mul(&inv3)?)?;
        let style = (style.broadcast_mul(&m)? + self.null_style.unsqueeze(0)?.broadcast_mul(&inv)?)?;
        Ok((content, style))
    }

    /// ε̂ (or Ẑ_0 for the direct parameterisation) for a (B, T, D) batch.
    pub fn forward(&self, zt: &Tensor, t: &[usize], cond: &DenoiserConditioning, keep: &[bool]) -> Result<Tensor> {
        let (b, tl, d) = zt.dims3()?;
        if d != self.config.channels {
            return Err(Error::invalid(format!("expected {} channels, got {d}", self.config.channels)));
        }
        let (cb, ct) = cond.batch_and_length()?;
        if cb != b || ct != tl {
            return Err(Error::invalid(format!(
                "content track {cb}×{ct} does not match motion batch {b}×{tl}"
            )));
        }
        if t.len() != b {
            return Err(Error::invalid("one timestep per batch row required"));
        }
        let dt = self.params.dtype();
        let (content, style) = self.masked_conditioning(cond, keep)?;
        let template = cond.template.to_dtype(dt)?;
        let temb = self.timestep_embedding(t)?;
        let positions: Vec<f64> = (0..tl).map(|i| i as f64).collect();
        let pe = sinusoidal(&positions, self.config.width, dt)?;
        let mask = AttentionMask::diagonal(tl)?;

        let mut h = self
            .input
            .forward(&zt.to_dtype(dt)?)?
            .broadcast_add(&pe)?
            .broadcast_add(&self.template_proj.forward(&template)?.unsqueeze(1)?)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.film.modulate(&h, &temb)?;
            if self.ablation.self_attention {
                let n = blk.norm_self.forward(&h)?;
                h = (&h + blk.self_attn.forward(&n, &n, None)?)?;
            }
            let n = blk.norm_cross.forward(&h)?;
            h = (&h + blk.cross_attn.forward(&n, &content, Some(&mask))?)?;
            if self.ablation.adain {
                h = (&h + blk.adain.apply(&h, &style)?)?;
            } else {
                // per-frame only: the style shift without frame statistics
                let (_, delta) = blk.adain.params(&style)?;
                h = h.broadcast_add(&delta)?;
            }
            h = (&h + blk.ffn.forward(&blk.norm_ffn.forward(&h)?)?)?;
            let probe = h.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !probe.is_finite() {
                return Err(Error::NonFinite(format!("activations in block {i}")));
            }
        }
        self.output.forward(&self.out_norm.forward(&h)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path, DENOISER_KIND, &serde_json::to_value(&self.config)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.expect_kind(DENOISER_KIND)?;
        let model = Self::new(ckpt.meta_as()?)?;
        model.params.load_from(&ckpt)?;
        Ok(model)
    }
}

impl NoisePredictor for Denoiser {
    fn channels(&self) -> usize {
        self.config.channels
    }

    fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn predict(&self, zt: &Tensor, t: &[usize], cond: &DenoiserConditioning, keep: &[bool]) -> Result<Tensor> {
        self.forward(zt, t, cond, keep)
    }
}
