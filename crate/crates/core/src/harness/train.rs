use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binding::{EncoderBank, Modality, ModalityInput};
use crate::denoiser::{template_vector, Denoiser, DenoiserConditioning, DenoiserConfig, Parameterization};
use crate::diffusion::{forward_diffuse_tensor, predict_x0_tensor, NoiseSchedule, ScheduleSpec};
use crate::error::{Error, Result};
use crate::losses::{diffusion_mse, emo_loss, sync_loss, total_loss, LossParts, LossWeights, SyncExpert};
use crate::nn::{array_to_tensor, scalar, Adam};
use crate::rng::{child_rng, normal_vec};
use crate::seqio::{Corpus, Split};

/// Denoiser sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSize {
    pub blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ModelSize {
    fn default() -> Self {
        Self {
            blocks: 4,
            width: 128,
            heads: 4,
            ffn: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Diffusion steps N.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub drop_probability: f64,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub model: ModelSize,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    /// Cosine decay of the learning rate to zero over all iterations.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 400,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 1e-4,
            drop_probability: 0.1,
            weights: LossWeights::default(),
            epochs: 100,
            batch_size: 16,
            model: ModelSize::default(),
            checkpoint_every: 0,
            grad_clip: 1.0,
            cosine_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("steps, epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::invalid("drop probability must lie in [0, 1]"));
        }
        self.weights.validate()
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_spec().build()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub total: Vec<f64>,
    pub diff: Vec<f64>,
    pub sync: Vec<f64>,
    pub emo: Vec<f64>,
    pub bank_hash: String,
    pub expert_hash: String,
    pub final_hash: String,
}

impl TrainLog {
    /// Mean total loss over the first and last `window` iterations.
    pub fn start_end(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.total.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.total[..w.min(self.total.len())]), mean(&self.total[self.total.len().saturating_sub(w)..]))
    }
}

/// Per-sample conditioning inputs precomputed from the frozen bank.
pub struct ConditioningCache {
    /// `style[m][row]`: embedding of the sample's modality `m` payload.
    pub style: Vec<Vec<Vec<f32>>>,
    pub template: Vec<Vec<f32>>,
    pub indices: Vec<usize>,
}

impl ConditioningCache {
    pub fn build(corpus: &Corpus, bank: &EncoderBank, indices: &[usize]) -> Result<Self> {
        let mut style = Vec::with_capacity(4);
        for m in Modality::ALL {
            let mut rows = Vec::with_capacity(indices.len());
            for chunk in indices.chunks(64) {
                let inputs: Vec<ModalityInput<'_>> = chunk.iter().map(|&i| prompt_input(corpus, m, i)).collect();
                rows.extend(bank.embed_batch(&inputs)?.into_iter().map(|e| e.vector));
            }
            style.push(rows);
        }
        let fs = bank.config.fs;
        let template = indices
            .iter()
            .map(|&i| template_vector(&corpus.manifest.samples[i].subject_id, fs))
            .collect();
        Ok(Self {
            style,
            template,
            indices: indices.to_vec(),
        })
    }
}

/// The payload of modality `m` belonging to corpus sample `i`.
pub fn prompt_input(corpus: &Corpus, m: Modality, i: usize) -> ModalityInput<'_> {
    match m {
        Modality::V => ModalityInput::Motion(&corpus.samples[i].motion.frames),
        Modality::A => ModalityInput::Audio(&corpus.samples[i].audio),
        Modality::T => ModalityInput::Text(&corpus.manifest.samples[i].text),
        Modality::L => ModalityInput::Label(corpus.class_of(i)),
    }
}

fn stack(rows: &[&ndarray::Array2<f32>], dtype: DType) -> Result<Tensor> {
    let ts = rows
        .iter()
        .map(|a| Ok(array_to_tensor(a, dtype)?.unsqueeze(0)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

fn vec_rows(rows: &[&Vec<f32>], dtype: DType) -> Result<Tensor> {
    let dim = rows[0].len();
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn denoiser_config(corpus: &Corpus, bank: &EncoderBank, cfg: &TrainConfig, p: Parameterization) -> DenoiserConfig {
    let mc = &corpus.manifest.config;
    let mut dc = DenoiserConfig::new(mc.channels(), mc.content_dim(), bank.config.fs);
    dc.blocks = cfg.model.blocks;
    dc.width = cfg.model.width;
    dc.heads = cfg.model.heads;
    dc.ffn = cfg.model.ffn;
    dc.seed = cfg.seed;
    dc.parameterization = p;
    dc.schedule = cfg.schedule_spec();
    dc
}

/// Diffusion training. Each iteration draws t uniformly, corrupts the clip,
/// replaces (content, style) by the null embeddings with the drop
/// probability, predicts ε and applies the weighted objective, with the
/// auxiliary losses on x̂0 of the rows that kept their conditioning.
///
/// Random stream per batch: one t per row, then the ε tensor, then one keep
/// draw per row, then one prompt-modality draw per row.
pub fn train_diffusion(
    corpus: &Corpus,
    bank: &EncoderBank,
    expert: &SyncExpert,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(Denoiser, TrainLog)> {
    train_model(corpus, bank, expert, cfg, Parameterization::Epsilon, checkpoint_dir)
}

/// Deterministic regression baseline on the same backbone: the network sees
/// a zero state at t = N and regresses Z_0 directly under the same losses.
pub fn train_deterministic(
    corpus: &Corpus,
    bank: &EncoderBank,
    expert: &SyncExpert,
    cfg: &TrainConfig,
) -> Result<(Denoiser, TrainLog)> {
    train_model(corpus, bank, expert, cfg, Parameterization::Direct, None)
}

fn train_model(
    corpus: &Corpus,
    bank: &EncoderBank,
    expert: &SyncExpert,
    cfg: &TrainConfig,
    param: Parameterization,
    checkpoint_dir: Option<&Path>,
) -> Result<(Denoiser, TrainLog)> {
    cfg.validate()?;
    if !bank.is_trained() {
        return Err(Error::Config("diffusion training needs a trained binding bank".into()));
    }
    let sched = cfg.schedule()?;
    let train = corpus.split_indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("training split is empty"));
    }
    let cache = ConditioningCache::build(corpus, bank, &train)?;
    let model = Denoiser::new(denoiser_config(corpus, bank, cfg, param))?;
    let dt = DType::F32;
    let n = sched.steps();
    let bank_hash = bank.params().fingerprint("")?;
    let expert_hash = expert.fingerprint()?;
    let mut opt = Adam::new(model.params().all_vars(), cfg.lr)?.with_clip(cfg.grad_clip);
    let mut rng = child_rng(cfg.seed, 400);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog {
        bank_hash: bank_hash.clone(),
        expert_hash: expert_hash.clone(),
        ..Default::default()
    };
    let mut iteration = 0usize;
    let total_iterations = cfg.epochs * rows_per_epoch(train.len(), cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(cfg.batch_size) {
            let b = rows.len();
            let ids: Vec<usize> = rows.iter().map(|&r| train[r]).collect();
            let t: Vec<usize> = match param {
                Parameterization::Epsilon => (0..b).map(|_| rng.random_range(1..=n)).collect(),
                Parameterization::Direct => vec![n; b],
            };
            let z0 = stack(&ids.iter().map(|&i| &corpus.samples[i].motion.frames).collect::<Vec<_>>(), dt)?;
            let content = stack(&ids.iter().map(|&i| &corpus.samples[i].content.features).collect::<Vec<_>>(), dt)?;
            let keep: Vec<bool>;
            let style_rows: Vec<&Vec<f32>>;
            let mut eps = None;
            match param {
                Parameterization::Epsilon => {
                    let e = Tensor::from_vec(normal_vec(&mut rng, z0.elem_count(), 1.0), z0.dims(), &Device::Cpu)?;
                    eps = Some(e);
                    keep = (0..b).map(|_| rng.random::<f64>() >= cfg.drop_probability).collect();
                }
                Parameterization::Direct => keep = vec![true; b],
            }
            style_rows = rows.iter().map(|&r| &cache.style[rng.random_range(0..4usize)][r]).collect();
            let target_rows: Vec<&Vec<f32>> = rows.iter().map(|&r| &cache.style[Modality::V.index()][r]).collect();
            let cond = DenoiserConditioning::new(
                content.clone(),
                vec_rows(&style_rows, dt)?,
                vec_rows(&rows.iter().map(|&r| &cache.template[r]).collect::<Vec<_>>(), dt)?,
            )?;

            let (diff, x0_hat) = match param {
                Parameterization::Epsilon => {
                    let eps = eps.as_ref().unwrap();
                    let zt = forward_diffuse_tensor(&z0, &t, eps, &sched)?;
                    let eps_hat = model.forward(&zt, &t, &cond, &keep)?;
                    (diffusion_mse(&eps_hat, eps)?, predict_x0_tensor(&zt, &t, &eps_hat, &sched)?)
                }
                Parameterization::Direct => {
                    let zeros = z0.zeros_like()?;
                    let out = model.forward(&zeros, &t, &cond, &keep)?;
                    (diffusion_mse(&out, &z0)?, out)
                }
            };

            let kept: Vec<u32> = (0..b).filter(|&i| keep[i]).map(|i| i as u32).collect();
            let (mut sync, mut emo) = (None, None);
            if !kept.is_empty() && (cfg.weights.sync > 0.0 || cfg.weights.emo > 0.0) {
                let sel = Tensor::from_vec(kept.clone(), kept.len(), &Device::Cpu)?;
                let x_sel = x0_hat.index_select(&sel, 0)?;
                if cfg.weights.sync > 0.0 {
                    sync = Some(sync_loss(&x_sel, &content.index_select(&sel, 0)?, expert)?);
                }
                if cfg.weights.emo > 0.0 {
                    let target = vec_rows(&kept.iter().map(|&i| target_rows[i as usize]).collect::<Vec<_>>(), dt)?;
                    emo = Some(emo_loss(&x_sel, &target, bank)?);
                }
            }
            let parts = LossParts { diff, sync, emo };
            let loss = match total_loss(&parts, &cfg.weights) {
                Ok(l) => l,
                Err(e) => return Err(snapshot(&model, checkpoint_dir, iteration, e)),
            };
            let v = scalar(&loss)?;
            if !v.is_finite() {
                let e = Error::NonFinite(format!("training loss {v} at iteration {iteration}"));
                return Err(snapshot(&model, checkpoint_dir, iteration, e));
            }
            if cfg.cosine_decay {
                let progress = iteration as f64 / total_iterations as f64;
                opt.set_lr(0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos()));
            }
            opt.backward_step(&loss)?;
            log.total.push(v);
            log.diff.push(scalar(&parts.diff)?);
            log.sync.push(parts.sync.as_ref().map(scalar).transpose()?.unwrap_or(0.0));
            log.emo.push(parts.emo.as_ref().map(scalar).transpose()?.unwrap_or(0.0));
            iteration += 1;
            if let Some(dir) = checkpoint_dir {
                if cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0 {
                    model.save(dir.join(format!("denoiser_{iteration:06}.ckpt")))?;
                }
            }
        }
        if epoch % 10 == 0 || epoch + 1 == cfg.epochs {
            let (_, end) = log.start_end(rows_per_epoch(train.len(), cfg.batch_size));
            info!("{param:?} epoch {epoch}: loss {end:.4}");
        }
    }
    if bank.params().fingerprint("")? != bank_hash || expert.fingerprint()? != expert_hash {
        return Err(Error::Config("frozen bank or sync expert changed during training".into()));
    }
    log.final_hash = model.fingerprint()?;
    Ok((model, log))
}

fn rows_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

fn snapshot(model: &Denoiser, dir: Option<&Path>, iteration: usize, err: Error) -> Error {
    if let Some(d) = dir {
        let p = d.join(format!("denoiser_failed_{iteration:06}.ckpt"));
        if model.save(&p).is_ok() {
            return Error::NonFinite(format!("{err}; snapshot written to {}", p.display()));
        }
    }
    err
}
