//! Noise schedule, forward corruption, ancestral reverse steps and
//! classifier-free guidance.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConditioning;
use crate::error::{Error, Result};
use crate::nn::tensor_to_f32;
use crate::rng::{normal_vec, DetRng};

pub const DEFAULT_STEPS: usize = 400;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Per-step β with derived α and cumulative ᾱ. Steps are 1-based; index
/// `t−1` of each array belongs to step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(n: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if n == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// Serializable description of a linear schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default schedule")
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior standard deviation σ_t; zero at t = 1.
    pub fn sigma_at(&self, t: usize) -> f64 {
        let v = self.beta_at(t) * (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t));
        v.max(0.0).sqrt()
    }

    /// Coefficients (c_z, c_eps) of the posterior mean c_z·Z_t − c_eps·ε̂.
    fn mean_coeffs(&self, t: usize) -> (f64, f64) {
        let c_z = 1.0 / self.alpha_at(t).sqrt();
        (c_z, c_z * self.beta_at(t) / (1.0 - self.alpha_bar_at(t)).sqrt())
    }

    /// x̂0 = (Z_t − √(1−ᾱ_t) ε̂) / √ᾱ_t.
    pub fn predict_x0_coeffs(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar_at(t);
        (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// Guidance weight s.
    pub weight: f64,
    pub drop_probability: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            weight: 2.0,
            drop_probability: 0.1,
        }
    }
}

impl GuidanceConfig {
    pub fn new(weight: f64, drop_probability: f64) -> Result<Self> {
        let g = Self { weight, drop_probability };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0 && self.weight.is_finite()) {
            return Err(Error::invalid(format!("guidance weight must be finite and >= 0, got {}", self.weight)));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::invalid(format!(
                "drop probability must lie in [0, 1], got {}",
                self.drop_probability
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Array2<f32>, b: &Array2<f32>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!("{what}: shape {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Z_t = √ᾱ_t Z_0 + √(1−ᾱ_t) ε.
pub fn forward_diffuse(z0: &Array2<f32>, t: usize, eps: &Array2<f32>, sched: &NoiseSchedule) -> Result<Array2<f32>> {
    same_shape(z0, eps, "forward_diffuse")?;
    if t > sched.steps() {
        return Err(Error::invalid(format!("timestep {t} outside [0, {}]", sched.steps())));
    }
    let ab = sched.alpha_bar_at(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(z0)
        .and(eps)
        .map_collect(|z, e| (a * *z as f64 + b * *e as f64) as f32))
}

/// Batched tensor form; `t[i]` is the step of batch row `i` of a (B, T, D) tensor.
pub fn forward_diffuse_tensor(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::invalid("forward_diffuse: shape mismatch"));
    }
    let (a, b) = per_row(t, z0, sched, |ab| (ab.sqrt(), (1.0 - ab).sqrt()))?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// x̂0 reconstructed from ε̂ for a batch with per-row steps.
pub fn predict_x0_tensor(zt: &Tensor, t: &[usize], eps_hat: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let (a, b) = per_row(t, zt, sched, |ab| (1.0 / ab.sqrt(), (1.0 - ab).sqrt() / ab.sqrt()))?;
    Ok((zt.broadcast_mul(&a)? - eps_hat.broadcast_mul(&b)?)?)
}

fn per_row(
    t: &[usize],
    like: &Tensor,
    sched: &NoiseSchedule,
    f: impl Fn(f64) -> (f64, f64),
) -> Result<(Tensor, Tensor)> {
    let b = like.dim(0)?;
    if t.len() != b {
        return Err(Error::invalid("one timestep per batch row required"));
    }
    let mut ca = Vec::with_capacity(b);
    let mut cb = Vec::with_capacity(b);
    for &ti in t {
        sched.check(ti)?;
        let (x, y) = f(sched.alpha_bar_at(ti));
        ca.push(x);
        cb.push(y);
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat_n(1, like.rank() - 1));
    let mk = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape.as_slice(), like.device())?.to_dtype(like.dtype())?)
    };
    Ok((mk(ca)?, mk(cb)?))
}

/// One ancestral step Z_t → Z_{t−1}.
pub fn reverse_step(
    zt: &Array2<f32>,
    t: usize,
    eps_hat: &Array2<f32>,
    sched: &NoiseSchedule,
    rng: &mut DetRng,
) -> Result<Array2<f32>> {
    same_shape(zt, eps_hat, "reverse_step")?;
    sched.check(t)?;
    let (cz, ce) = sched.mean_coeffs(t);
    let sigma = sched.sigma_at(t);
    let mut out = ndarray::Zip::from(zt)
        .and(eps_hat)
        .map_collect(|z, e| (cz * *z as f64 - ce * *e as f64) as f32);
    if t > 1 {
        let noise = normal_vec(rng, out.len(), 1.0);
        for (o, n) in out.iter_mut().zip(noise) {
            *o = (*o as f64 + sigma * n as f64) as f32;
        }
    }
    Ok(out)
}

fn reverse_step_tensor(zt: &Tensor, t: usize, eps_hat: &Tensor, sched: &NoiseSchedule, rng: &mut DetRng) -> Result<Tensor> {
    let (cz, ce) = sched.mean_coeffs(t);
    let mean = ((zt * cz)? - (eps_hat * ce)?)?;
    if t == 1 {
        return Ok(mean);
    }
    let noise = Tensor::from_vec(normal_vec(rng, zt.elem_count(), 1.0), zt.dims(), zt.device())?.to_dtype(zt.dtype())?;
    Ok((mean + (noise * sched.sigma_at(t))?)?)
}

/// ε* = s·ε_cond + (1 − s)·ε_uncond.
pub fn cfg_combine(eps_cond: &Array2<f32>, eps_uncond: &Array2<f32>, s: f64) -> Result<Array2<f32>> {
    same_shape(eps_cond, eps_uncond, "cfg_combine")?;
    check_weight(s)?;
    Ok(ndarray::Zip::from(eps_cond)
        .and(eps_uncond)
        .map_collect(|c, u| (s * *c as f64 + (1.0 - s) * *u as f64) as f32))
}

pub fn cfg_combine_tensor(eps_cond: &Tensor, eps_uncond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_cond.dims() != eps_uncond.dims() {
        return Err(Error::invalid("cfg_combine: shape mismatch"));
    }
    check_weight(s)?;
    Ok(((eps_cond * s)? + (eps_uncond * (1.0 - s))?)?)
}

fn check_weight(s: f64) -> Result<()> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("guidance weight must be finite and >= 0, got {s}")));
    }
    Ok(())
}

/// Anything that predicts ε from (Z_t, t, conditioning). `keep[i] == false`
/// replaces content and style of row `i` with the null embeddings.
pub trait NoisePredictor {
    fn channels(&self) -> usize;
    fn dtype(&self) -> DType;
    fn predict(&self, zt: &Tensor, t: &[usize], cond: &DenoiserConditioning, keep: &[bool]) -> Result<Tensor>;
}

/// How the reverse loop queries the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    /// Conditional and null branch every step, combined with the guidance weight.
    Dual,
    /// Conditional branch only (exact when s = 1).
    ConditionalOnly,
}

/// Run N ancestral steps from Z_N ~ N(0, I) for a (B, T, F_a) conditioning batch.
/// Returns the (B, T, D) result.
pub fn sample_loop(
    model: &dyn NoisePredictor,
    cond: &DenoiserConditioning,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut DetRng,
) -> Result<Tensor> {
    sample_loop_with(model, cond, guidance, sched, rng, Branches::Dual)
}

pub fn sample_loop_with(
    model: &dyn NoisePredictor,
    cond: &DenoiserConditioning,
    guidance: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut DetRng,
    branches: Branches,
) -> Result<Tensor> {
    guidance.validate()?;
    let (b, t_len) = cond.batch_and_length()?;
    let d = model.channels();
    let shape = (b, t_len, d);
    let mut z = Tensor::from_vec(normal_vec(rng, b * t_len * d, 1.0), shape, &Device::Cpu)?.to_dtype(model.dtype())?;
    let on = vec![true; b];
    let off = vec![false; b];
    for t in (1..=sched.steps()).rev() {
        let ts = vec![t; b];
        let cond_eps = model.predict(&z, &ts, cond, &on)?;
        let eps = match branches {
            Branches::Dual => {
                let uncond_eps = model.predict(&z, &ts, cond, &off)?;
                cfg_combine_tensor(&cond_eps, &uncond_eps, guidance.weight)?
            }
            Branches::ConditionalOnly => cond_eps,
        };
        // inference only: drop the graph so memory stays flat over the chain
        z = reverse_step_tensor(&z, t, &eps.detach(), sched, rng)?.detach();
        let check = z.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !check.is_finite() {
            return Err(Error::NonFinite(format!("reverse process diverged at step {t}")));
        }
    }
    Ok(z)
}

/// Row `i` of a (B, T, D) tensor as an ndarray.
pub fn batch_row(z: &Tensor, i: usize) -> Result<Array2<f32>> {
    let row = z.get(i)?;
    let (t, d) = row.dims2()?;
    Ok(Array2::from_shape_vec((t, d), tensor_to_f32(&row)?).map_err(|e| Error::invalid(e.to_string()))?)
}
