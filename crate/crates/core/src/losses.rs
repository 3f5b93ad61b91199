//! Training objective: diffusion MSE, lip-sync contrastive loss from a frozen
//! window expert, emotion consistency through the binding space.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binding::{softplus, EncoderBank};
use crate::error::{Error, Result};
use crate::nn::{l2_normalize, scalar, Activation, Adam, Checkpoint, Mlp, ParamStore};
use crate::rng::{child_rng, rng_from};
use crate::seqio::{Corpus, Split};

pub const SYNC_KIND: &str = "sync-expert";
pub const SYNC_WINDOW: usize = 5;
/// Minimum frame offset for a window pair to count as out of sync.
pub const MIN_SHIFT: usize = 5;

/// Mean squared error over all elements.
pub fn diffusion_mse(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::invalid(format!(
            "diffusion_mse: shape {:?} vs {:?}",
            eps_hat.dims(),
            eps.dims()
        )));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diff: f64,
    pub sync: f64,
    pub emo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diff: 1.0,
            sync: 0.01,
            emo: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, w) in [("diff", self.diff), ("sync", self.sync), ("emo", self.emo)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("loss weight {n} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss terms; absent auxiliary terms count as zero.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub diff: Tensor,
    pub sync: Option<Tensor>,
    pub emo: Option<Tensor>,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<Tensor> {
    weights.validate()?;
    let mut total = (&parts.diff * weights.diff)?;
    for (term, w, name) in [(&parts.sync, weights.sync, "sync"), (&parts.emo, weights.emo, "emo")] {
        if let Some(t) = term {
            if !scalar(t)?.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss term")));
            }
            total = (total + (t * w)?)?;
        }
    }
    if !scalar(&parts.diff)?.is_finite() {
        return Err(Error::NonFinite("diffusion loss term".into()));
    }
    Ok(total)
}

/// Mean over rows of `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ_k e^{s_k/τ}))` with cosine
/// similarities between `f_e` (M, E), `positive` (M, E) and `negatives` (M, K, E).
pub fn sync_infonce(f_e: &Tensor, positive: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let (m, k, e) = negatives.dims3()?;
    if k == 0 {
        return Err(Error::invalid("sync loss needs at least one negative"));
    }
    if f_e.dims2()? != (m, e) || positive.dims2()? != (m, e) {
        return Err(Error::invalid("sync loss: embedding shapes disagree"));
    }
    let fe = l2_normalize(f_e)?;
    let pos = (fe.mul(&l2_normalize(positive)?)?.sum(D::Minus1)? / tau)?;
    let neg = (l2_normalize(negatives)?.matmul(&fe.unsqueeze(2)?)?.squeeze(2)? / tau)?;
    let mx = neg.max_keepdim(D::Minus1)?.detach();
    let lse = neg.broadcast_sub(&mx)?.exp()?.sum_keepdim(D::Minus1)?.log()?.broadcast_add(&mx)?.squeeze(1)?;
    Ok(softplus(&(lse - pos)?)?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub tau: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Shifted-window negatives per window in `sync_loss`.
    pub negatives: usize,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            embed_dim: 32,
            hidden: 128,
            tau: 0.07,
            epochs: 30,
            batch: 16,
            lr: 1e-3,
            negatives: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SyncMeta {
    config: SyncConfig,
    lip: Vec<usize>,
    content_dim: usize,
    threshold: f64,
}

/// Pair of 5-frame window encoders: lip-channel windows → f_e, content
/// windows → f_a, both unit norm.
#[derive(Debug, Clone)]
pub struct SyncExpert {
    pub config: SyncConfig,
    /// Expression channel indices read by the expression encoder.
    pub lip: Vec<usize>,
    pub content_dim: usize,
    /// Cosine threshold separating matched from shifted windows.
    pub threshold: f64,
    params: ParamStore,
    expr: Mlp,
    content: Mlp,
}

/// (B, T, C) → (B, T−4, 5C): window w stacks frames w..w+5.
fn windows(x: &Tensor) -> Result<Tensor> {
    let (_, t, _) = x.dims3()?;
    if t < SYNC_WINDOW {
        return Err(Error::invalid(format!("sequence of {t} frames is shorter than a sync window")));
    }
    let n = t - SYNC_WINDOW + 1;
    let parts = (0..SYNC_WINDOW).map(|o| x.narrow(1, o, n)).collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 2)?)
}

impl SyncExpert {
    pub fn new(config: SyncConfig, lip: Vec<usize>, content_dim: usize, dtype: DType) -> Result<Self> {
        if lip.is_empty() || content_dim == 0 || config.embed_dim == 0 || config.hidden == 0 {
            return Err(Error::invalid("sync expert sizes must be positive"));
        }
        let mut ps = ParamStore::new(dtype);
        let mut rng = rng_from(config.seed);
        let (h, e) = (config.hidden, config.embed_dim);
        let expr = Mlp::new(&mut ps, &mut rng, "expr", &[SYNC_WINDOW * lip.len(), h, h, e], Activation::Gelu, false)?;
        let content = Mlp::new(&mut ps, &mut rng, "content", &[SYNC_WINDOW * content_dim, h, h, e], Activation::Gelu, false)?;
        Ok(Self {
            config,
            lip,
            content_dim,
            threshold: 0.5,
            params: ps,
            expr,
            content,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.params.fingerprint("")
    }

    /// Full-channel frames (B, T, D) → (B, T−4, E) unit embeddings f_e.
    pub fn embed_expression(&self, frames: &Tensor) -> Result<Tensor> {
        let idx = Tensor::from_vec(
            self.lip.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            self.lip.len(),
            &Device::Cpu,
        )?;
        let lip = frames.to_dtype(self.params.dtype())?.index_select(&idx, 2)?;
        l2_normalize(&self.expr.forward(&windows(&lip)?)?)
    }

    /// Content (B, T, F_a) → (B, T−4, E) unit embeddings f_a.
    pub fn embed_content(&self, content: &Tensor) -> Result<Tensor> {
        if content.dim(2)? != self.content_dim {
            return Err(Error::invalid("content feature width mismatch"));
        }
        l2_normalize(&self.content.forward(&windows(&content.to_dtype(self.params.dtype())?)?)?)
    }

    /// Window offsets used as negatives in `sync_loss` for `n` windows.
    fn shifts(&self, n: usize) -> Result<Vec<usize>> {
        let k = self.config.negatives;
        if k == 0 {
            return Err(Error::invalid("sync loss needs at least one negative"));
        }
        if n < 2 * MIN_SHIFT + 1 {
            return Err(Error::invalid(format!("{n} windows leave no shift of at least {MIN_SHIFT} frames")));
        }
        let span = n - 2 * MIN_SHIFT;
        Ok((0..k).map(|j| MIN_SHIFT + (j * span) / k.max(1)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = SyncMeta {
            config: self.config.clone(),
            lip: self.lip.clone(),
            content_dim: self.content_dim,
            threshold: self.threshold,
        };
        self.params.save(path, SYNC_KIND, &serde_json::to_value(meta)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.expect_kind(SYNC_KIND)?;
        let meta: SyncMeta = ckpt.meta_as()?;
        let mut e = Self::new(meta.config, meta.lip, meta.content_dim, DType::F32)?;
        e.threshold = meta.threshold;
        e.params.load_from(&ckpt)?;
        Ok(e)
    }
}

/// Sync InfoNCE of generated frames (B, T, D) against their content (B, T, F_a),
/// averaged over every window. Negatives are the clip's own content windows
/// cyclically shifted by at least five frames.
pub fn sync_loss(x0_hat: &Tensor, content: &Tensor, expert: &SyncExpert) -> Result<Tensor> {
    let (b, t, _) = x0_hat.dims3()?;
    if content.dims3()?.0 != b || content.dim(1)? != t {
        return Err(Error::invalid("sync loss: content does not match the generated frames"));
    }
    let fe = expert.embed_expression(x0_hat)?;
    let fa = expert.embed_content(content)?;
    let n = fe.dim(1)?;
    let e = fe.dim(2)?;
    let shifts = expert.shifts(n)?;
    let mut negs = Vec::with_capacity(shifts.len());
    for s in &shifts {
        // windows w + s (mod n)
        let rolled = Tensor::cat(&[&fa.narrow(1, *s, n - s)?, &fa.narrow(1, 0, *s)?], 1)?;
        negs.push(rolled.unsqueeze(2)?);
    }
    let negs = Tensor::cat(&negs, 2)?.reshape((b * n, shifts.len(), e))?;
    sync_infonce(&fe.reshape((b * n, e))?, &fa.reshape((b * n, e))?, &negs, expert.config.tau)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncEval {
    pub matched_mean: f64,
    pub shifted_mean: f64,
    pub accuracy: f64,
    pub threshold: f64,
}

fn clip_tensors(corpus: &Corpus, idx: &[usize], dtype: DType) -> Result<(Tensor, Tensor)> {
    let mut m = Vec::new();
    let mut c = Vec::new();
    for &i in idx {
        let s = &corpus.samples[i];
        m.push(crate::nn::array_to_tensor(&s.motion.frames, dtype)?.unsqueeze(0)?);
        c.push(crate::nn::array_to_tensor(&s.content.features, dtype)?.unsqueeze(0)?);
    }
    Ok((Tensor::cat(&m, 0)?, Tensor::cat(&c, 0)?))
}

/// Cosines of matched windows and of windows shifted by half the clip.
fn matched_and_shifted(expert: &SyncExpert, corpus: &Corpus, split: Split) -> Result<(Vec<f64>, Vec<f64>)> {
    let idx = corpus.split_indices(split);
    if idx.is_empty() {
        return Err(Error::invalid(format!("split {split:?} is empty")));
    }
    let mut matched = Vec::new();
    let mut shifted = Vec::new();
    for chunk in idx.chunks(32) {
        let (m, c) = clip_tensors(corpus, chunk, expert.params.dtype())?;
        let fe = expert.embed_expression(&m)?;
        let fa = expert.embed_content(&c)?;
        let n = fe.dim(1)?;
        let s = n / 2;
        if s < MIN_SHIFT {
            return Err(Error::invalid("clips too short for shifted-window evaluation"));
        }
        let rolled = Tensor::cat(&[&fa.narrow(1, s, n - s)?, &fa.narrow(1, 0, s)?], 1)?;
        matched.extend(crate::nn::tensor_to_f64(&(&fe * &fa)?.sum(D::Minus1)?)?);
        shifted.extend(crate::nn::tensor_to_f64(&(&fe * &rolled)?.sum(D::Minus1)?)?);
    }
    Ok((matched, shifted))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Matched-vs-shifted window classification with the expert's threshold.
pub fn evaluate_sync(expert: &SyncExpert, corpus: &Corpus, split: Split) -> Result<SyncEval> {
    let (m, s) = matched_and_shifted(expert, corpus, split)?;
    let thr = expert.threshold;
    let hits = m.iter().filter(|c| **c > thr).count() + s.iter().filter(|c| **c <= thr).count();
    Ok(SyncEval {
        matched_mean: mean(&m),
        shifted_mean: mean(&s),
        accuracy: hits as f64 / (m.len() + s.len()) as f64,
        threshold: thr,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SyncLog {
    pub epoch_loss: Vec<f64>,
    pub validation: Option<SyncEval>,
}

/// Contrastive training on ground-truth clips: each lip window is pulled to
/// its own content window and pushed from content windows at least five
/// frames away in the same clip and from every window of the other clips.
pub fn train_sync_expert(corpus: &Corpus, cfg: &SyncConfig) -> Result<(SyncExpert, SyncLog)> {
    if !(cfg.tau > 0.0) || cfg.batch < 2 || cfg.epochs == 0 {
        return Err(Error::invalid("sync training needs tau > 0, batch >= 2 and epochs >= 1"));
    }
    let mc = &corpus.manifest;
    let mut expert = SyncExpert::new(cfg.clone(), mc.channel_map.lip.clone(), mc.config.content_dim(), DType::F32)?;
    let train = corpus.split_indices(Split::Train);
    if train.len() < cfg.batch {
        return Err(Error::invalid("not enough training clips for one sync batch"));
    }
    let mut opt = Adam::new(expert.params.all_vars(), cfg.lr)?.with_clip(5.0);
    let mut rng = child_rng(cfg.seed, 300);
    let mut order = train.clone();
    let mut log = SyncLog::default();
    let mut cached_fill: Option<(usize, Tensor, Tensor)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks_exact(cfg.batch) {
            let (m, c) = clip_tensors(corpus, chunk, DType::F32)?;
            let fe = expert.embed_expression(&m)?;
            let fa = expert.embed_content(&c)?;
            let (b, n, e) = fe.dims3()?;
            let rows = b * n;
            if cached_fill.as_ref().map(|(r, _, _)| *r) != Some(rows) {
                let mut fill = vec![0f32; rows * rows];
                let mut pos = vec![0f32; rows * rows];
                for i in 0..rows {
                    for j in 0..rows {
                        let (bi, wi) = (i / n, i % n);
                        let (bj, wj) = (j / n, j % n);
                        if i == j {
                            pos[i * rows + j] = 1.0;
                        }
                        if bi == bj && wi.abs_diff(wj) < MIN_SHIFT {
                            fill[i * rows + j] = -1e30;
                        }
                    }
                }
                cached_fill = Some((
                    rows,
                    Tensor::from_vec(fill, (rows, rows), &Device::Cpu)?,
                    Tensor::from_vec(pos, (rows, rows), &Device::Cpu)?,
                ));
            }
            let (_, fill, pos_mask) = cached_fill.as_ref().unwrap();
            let fe = fe.reshape((rows, e))?;
            let fa = fa.reshape((rows, e))?;
            let logits = (fe.matmul(&fa.t()?)? / cfg.tau)?;
            let pos = (&logits * pos_mask)?.sum(D::Minus1)?;
            let neg = (&logits + fill)?;
            let mx = neg.max_keepdim(D::Minus1)?.detach();
            let lse = neg.broadcast_sub(&mx)?.exp()?.sum_keepdim(D::Minus1)?.log()?.broadcast_add(&mx)?.squeeze(1)?;
            let loss = softplus(&(lse - pos)?)?.mean_all()?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "sync expert loss {v} at epoch {epoch}, previous epochs {:?}",
                    log.epoch_loss
                )));
            }
            opt.backward_step(&loss)?;
            total += v;
            batches += 1;
        }
        log.epoch_loss.push(total / batches.max(1) as f64);
        info!("sync epoch {epoch}: loss {:.4}", log.epoch_loss[epoch]);
    }
    // threshold at the midpoint of matched and shifted means on training clips
    let (m, s) = matched_and_shifted(&expert, corpus, Split::Train)?;
    expert.threshold = 0.5 * (mean(&m) + mean(&s));
    if corpus.split_indices(Split::Val).len() > 0 {
        log.validation = Some(evaluate_sync(&expert, corpus, Split::Val)?);
    }
    Ok((expert, log))
}

/// ‖E_emo(x̂0) − z_e‖² averaged over the batch, with E_emo the bank's motion
/// encoder followed by its adapter.
pub fn emo_loss(x0_hat: &Tensor, target: &Tensor, bank: &EncoderBank) -> Result<Tensor> {
    if !bank.is_trained() {
        return Err(Error::Config("emotion loss needs a trained binding bank".into()));
    }
    let z = bank.embed_motion_tensor(&x0_hat.to_dtype(bank.dtype())?)?;
    let target = target.to_dtype(bank.dtype())?;
    if z.dims() != target.dims() {
        return Err(Error::invalid(format!(
            "emotion target shape {:?} does not match embedding {:?}",
            target.dims(),
            z.dims()
        )));
    }
    Ok((z - target)?.sqr()?.sum(D::Minus1)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binding::{BankConfig, EncoderBank};
    use crate::nn::tensor_to_f64;
    use crate::rng::{normal_vec, DetRng};
    use approx::assert_abs_diff_eq;

    fn rand(rng: &mut DetRng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(rng, n, 1.0).into_iter().map(f64::from).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn s(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn mse_examples_and_oracle() {
        let mut rng = rng_from(1);
        let a = rand(&mut rng, &[3, 7, 5]);
        assert_eq!(scalar(&diffusion_mse(&a, &a).unwrap()).unwrap(), 0.0);
        assert_abs_diff_eq!(scalar(&diffusion_mse(&(&a + 1.0).unwrap(), &a).unwrap()).unwrap(), 1.0, epsilon = 1e-12);
        let b = rand(&mut rng, &[3, 7, 5]);
        let (x, y) = (tensor_to_f64(&a).unwrap(), tensor_to_f64(&b).unwrap());
        let mut acc = 0.0;
        for i in 0..x.len() {
            acc += (x[i] - y[i]) * (x[i] - y[i]);
        }
        assert_abs_diff_eq!(scalar(&diffusion_mse(&a, &b).unwrap()).unwrap(), acc / x.len() as f64, epsilon = 1e-12);
        assert!(diffusion_mse(&a, &rand(&mut rng, &[3, 7, 4])).is_err());
    }

    #[test]
    fn total_loss_examples() {
        let p = |d, y, e| LossParts {
            diff: s(d),
            sync: Some(s(y)),
            emo: Some(s(e)),
        };
        let w = LossWeights::default();
        assert_abs_diff_eq!(scalar(&total_loss(&p(2.0, 10.0, 10.0), &w).unwrap()).unwrap(), 2.2, epsilon = 1e-12);
        let only = LossWeights { diff: 1.0, sync: 0.0, emo: 0.0 };
        assert_eq!(scalar(&total_loss(&p(0.7, 3.0, 4.0), &only).unwrap()).unwrap(), 0.7);
        assert_eq!(scalar(&total_loss(&p(0.0, 0.0, 0.0), &w).unwrap()).unwrap(), 0.0);
        let neg = LossWeights { sync: -0.1, ..w };
        assert!(matches!(total_loss(&p(1.0, 1.0, 1.0), &neg), Err(Error::InvalidArgument(_))));
        assert!(total_loss(&p(1.0, f64::NAN, 1.0), &w).is_err());
    }

    #[test]
    fn sync_infonce_closed_forms() {
        let e = |v: &[f64]| Tensor::from_slice(v, (1, v.len()), &Device::Cpu).unwrap();
        let fe = e(&[1.0, 0.0, 0.0, 0.0]);
        let negs = Tensor::from_slice(
            &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            (1, 3, 4),
            &Device::Cpu,
        )
        .unwrap();
        let l = scalar(&sync_infonce(&fe, &fe, &negs, 1.0).unwrap()).unwrap();
        let e1 = std::f64::consts::E;
        assert_abs_diff_eq!(l, -(e1 / (e1 + 3.0)).ln(), epsilon = 1e-12);

        let same = Tensor::from_slice(&[1.0f64; 12], (1, 3, 4), &Device::Cpu).unwrap();
        let fe = e(&[0.5; 4]);
        let l = scalar(&sync_infonce(&fe, &fe, &same, 0.07).unwrap()).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-10);

        let none = Tensor::zeros((1, 0, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(sync_infonce(&fe, &fe, &none, 1.0), Err(Error::InvalidArgument(_))));
    }

    /// Direct evaluation of the window InfoNCE formula.
    fn sync_oracle(fe: &[f64], pos: &[f64], negs: &[f64], m: usize, k: usize, e: usize, tau: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut total = 0.0;
        for i in 0..m {
            let f = &fe[i * e..(i + 1) * e];
            let sp = (cos(f, &pos[i * e..(i + 1) * e]) / tau).exp();
            let mut den = sp;
            for j in 0..k {
                den += (cos(f, &negs[(i * k + j) * e..(i * k + j + 1) * e]) / tau).exp();
            }
            total += -(sp / den).ln();
        }
        total / m as f64
    }

    #[test]
    fn sync_infonce_matches_oracle_and_gradient() {
        let mut rng = rng_from(2);
        let (m, k, e) = (4, 3, 6);
        let fe = candle_core::Var::from_tensor(&rand(&mut rng, &[m, e])).unwrap();
        let pos = rand(&mut rng, &[m, e]);
        let negs = rand(&mut rng, &[m, k, e]);
        let tau = 0.5;
        let l = sync_infonce(fe.as_tensor(), &pos, &negs, tau).unwrap();
        let oracle = sync_oracle(
            &tensor_to_f64(fe.as_tensor()).unwrap(),
            &tensor_to_f64(&pos).unwrap(),
            &tensor_to_f64(&negs).unwrap(),
            m,
            k,
            e,
            tau,
        );
        assert_abs_diff_eq!(scalar(&l).unwrap(), oracle, epsilon = 1e-10);
        let grads = l.backward().unwrap();
        let g = tensor_to_f64(grads.get(fe.as_tensor()).unwrap()).unwrap();
        let base = tensor_to_f64(fe.as_tensor()).unwrap();
        for idx in [0, 7, 13, 23] {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let t = Tensor::from_vec(v, (m, e), &Device::Cpu).unwrap();
                scalar(&sync_infonce(&t, &pos, &negs, tau).unwrap()).unwrap()
            };
            let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn windows_stack_consecutive_frames() {
        let x = Tensor::arange(0f64, 14.0, &Device::Cpu).unwrap().reshape((1, 7, 2)).unwrap();
        let w = windows(&x).unwrap();
        assert_eq!(w.dims(), &[1, 3, 10]);
        let v = tensor_to_f64(&w).unwrap();
        assert_eq!(&v[10..20], &[2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn sync_loss_gradient_through_frames() {
        let cfg = SyncConfig { hidden: 8, embed_dim: 4, ..Default::default() };
        let expert = SyncExpert::new(cfg, vec![0, 2], 3, DType::F64).unwrap();
        let mut rng = rng_from(3);
        let x = rand(&mut rng, &[2, 16, 4]);
        let c = rand(&mut rng, &[2, 16, 3]);
        let xv = candle_core::Var::from_tensor(&x).unwrap();
        let l = sync_loss(xv.as_tensor(), &c, &expert).unwrap();
        assert!(scalar(&l).unwrap() > 0.0);
        let g = tensor_to_f64(l.backward().unwrap().get(xv.as_tensor()).unwrap()).unwrap();
        let base = tensor_to_f64(&x).unwrap();
        // channel 1 is not a lip channel
        assert_eq!(g[1], 0.0);
        for idx in [0, 10, 66, 100] {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let t = Tensor::from_vec(v, (2, 16, 4), &Device::Cpu).unwrap();
                scalar(&sync_loss(&t, &c, &expert).unwrap()).unwrap()
            };
            let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((num - g[idx]).abs() / num.abs().max(g[idx].abs()).max(1e-8) < 1e-4, "{idx}: {num} vs {}", g[idx]);
        }
        let short = rand(&mut rng, &[2, 12, 4]);
        assert!(sync_loss(&short, &rand(&mut rng, &[2, 12, 3]), &expert).is_err());
    }

    fn trained_bank() -> EncoderBank {
        let mut bank = EncoderBank::with_dtype(BankConfig::new(3, 4, 2, 10, 5), DType::F64).unwrap();
        bank.mark_trained();
        bank
    }

    #[test]
    fn emo_loss_examples_and_oracle() {
        let untrained = EncoderBank::with_dtype(BankConfig::new(3, 4, 2, 10, 5), DType::F64).unwrap();
        let mut rng = rng_from(4);
        let x = rand(&mut rng, &[2, 6, 4]);
        let t = rand(&mut rng, &[2, 64]);
        assert!(matches!(emo_loss(&x, &t, &untrained), Err(Error::Config(_))));

        let bank = trained_bank();
        let z = bank.embed_motion_tensor(&x).unwrap();
        assert_eq!(scalar(&emo_loss(&x, &z, &bank).unwrap()).unwrap(), 0.0);
        let mut shifted = tensor_to_f64(&z).unwrap();
        shifted[3] += 1.0;
        shifted[64 + 10] -= 1.0;
        let shifted = Tensor::from_vec(shifted, (2, 64), &Device::Cpu).unwrap();
        assert_abs_diff_eq!(scalar(&emo_loss(&x, &shifted, &bank).unwrap()).unwrap(), 1.0, epsilon = 1e-12);

        let (zv, tv) = (tensor_to_f64(&z).unwrap(), tensor_to_f64(&t).unwrap());
        let mut acc = 0.0;
        for i in 0..zv.len() {
            acc += (zv[i] - tv[i]).powi(2);
        }
        assert_abs_diff_eq!(scalar(&emo_loss(&x, &t, &bank).unwrap()).unwrap(), acc / 2.0, epsilon = 1e-10);
    }

    #[test]
    fn emo_loss_gradient() {
        let bank = trained_bank();
        let mut rng = rng_from(5);
        let x = rand(&mut rng, &[1, 5, 4]);
        let t = rand(&mut rng, &[1, 64]);
        let xv = candle_core::Var::from_tensor(&x).unwrap();
        let l = emo_loss(xv.as_tensor(), &t, &bank).unwrap();
        let g = tensor_to_f64(l.backward().unwrap().get(xv.as_tensor()).unwrap()).unwrap();
        let base = tensor_to_f64(&x).unwrap();
        let mut checked = 0;
        for idx in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                let tt = Tensor::from_vec(v, (1, 5, 4), &Device::Cpu).unwrap();
                scalar(&emo_loss(&tt, &t, &bank).unwrap()).unwrap()
            };
            let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            if num.abs() < 1e-6 {
                continue; // max-pool kink or inactive frame
            }
            assert!((num - g[idx]).abs() / num.abs().max(g[idx].abs()) < 1e-4, "{idx}");
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
