use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::bank::{BankConfig, EncoderBank, ModalityInput};
use super::contrastive::{info_nce_loss, ContrastiveBatch};
use super::Modality;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, scalar, tensor_to_f32, Adam};
use crate::rng::child_rng;
use crate::seqio::{Corpus, Split};

const CACHE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BindingTrainConfig {
    pub seed: u64,
    pub fs: usize,
    pub tau: f64,
    /// Classification warm-up epochs per encoder.
    pub warmup_epochs: usize,
    pub warmup_lr: f64,
    pub warmup_batch: usize,
    /// Contrastive alignment epochs over the cached encoder features.
    pub epochs: usize,
    pub lr: f64,
    /// Samples drawn per class for each contrastive batch.
    pub per_class: usize,
}

impl Default for BindingTrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            fs: 64,
            tau: 0.07,
            warmup_epochs: 6,
            warmup_lr: 2e-3,
            warmup_batch: 32,
            epochs: 30,
            lr: 1e-3,
            per_class: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BindingLog {
    /// Final warm-up cross-entropy per modality, in `Modality::ALL` order.
    pub warmup_loss: Vec<f64>,
    /// Mean contrastive loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Mean off-diagonal validation retrieval accuracy per epoch.
    pub epoch_val_accuracy: Vec<f64>,
    pub encoder_hash_before: String,
    pub encoder_hash_after: String,
}

/// Top-1 class retrieval accuracy, `accuracy[query][gallery]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub accuracy: [[f64; 4]; 4],
    pub samples: usize,
}

impl RetrievalTable {
    pub fn get(&self, query: Modality, gallery: Modality) -> f64 {
        self.accuracy[query.index()][gallery.index()]
    }

    pub fn min(&self) -> f64 {
        self.accuracy.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_off_diagonal(&self) -> f64 {
        let mut s = 0.0;
        for q in 0..4 {
            for g in 0..4 {
                if q != g {
                    s += self.accuracy[q][g];
                }
            }
        }
        s / 12.0
    }
}

/// Pooled (pre-adapter) encoder features for a set of corpus samples.
struct FeatureCache {
    pooled: Vec<Tensor>,
    classes: Vec<usize>,
}

impl FeatureCache {
    fn build(bank: &EncoderBank, corpus: &Corpus, indices: &[usize]) -> Result<Self> {
        let mut pooled = Vec::with_capacity(4);
        for m in Modality::ALL {
            let mut parts = Vec::new();
            for chunk in indices.chunks(CACHE_CHUNK) {
                let inputs: Vec<ModalityInput<'_>> = chunk.iter().map(|&i| input_of(corpus, m, i)).collect();
                parts.push(bank.pooled_batch(&inputs)?.detach());
            }
            pooled.push(Tensor::cat(&parts, 0)?);
        }
        Ok(Self {
            pooled,
            classes: indices.iter().map(|&i| corpus.class_of(i)).collect(),
        })
    }

    fn adapted(&self, bank: &EncoderBank) -> Result<Vec<Vec<Vec<f32>>>> {
        Modality::ALL
            .iter()
            .map(|&m| {
                let z = bank.adapt(m, &self.pooled[m.index()])?;
                let flat = tensor_to_f32(&z)?;
                Ok(flat.chunks(bank.config.fs).map(|c| c.to_vec()).collect())
            })
            .collect()
    }
}

fn input_of(corpus: &Corpus, m: Modality, i: usize) -> ModalityInput<'_> {
    match m {
        Modality::V => ModalityInput::Motion(&corpus.samples[i].motion.frames),
        Modality::A => ModalityInput::Audio(&corpus.samples[i].audio),
        Modality::T => ModalityInput::Text(&corpus.manifest.samples[i].text),
        Modality::L => ModalityInput::Label(corpus.class_of(i)),
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn retrieval_from(emb: &[Vec<Vec<f32>>], classes: &[usize]) -> RetrievalTable {
    let n = classes.len();
    let mut accuracy = [[0.0; 4]; 4];
    for q in 0..4 {
        for g in 0..4 {
            let mut hits = 0usize;
            for i in 0..n {
                let mut best = (f64::NEG_INFINITY, usize::MAX);
                for j in 0..n {
                    if q == g && i == j {
                        continue;
                    }
                    let s = dot(&emb[q][i], &emb[g][j]);
                    if s > best.0 {
                        best = (s, j);
                    }
                }
                if best.1 != usize::MAX && classes[best.1] == classes[i] {
                    hits += 1;
                }
            }
            accuracy[q][g] = hits as f64 / n as f64;
        }
    }
    RetrievalTable { accuracy, samples: n }
}

/// Top-1 class retrieval for every (query, gallery) modality pair over one
/// split. On the diagonal the query itself is excluded from the gallery.
pub fn evaluate_retrieval(bank: &EncoderBank, corpus: &Corpus, split: Split) -> Result<RetrievalTable> {
    let idx = corpus.split_indices(split);
    if idx.len() < 2 {
        return Err(Error::invalid(format!("split {split:?} has fewer than two samples")));
    }
    let cache = FeatureCache::build(bank, corpus, &idx)?;
    Ok(retrieval_from(&cache.adapted(bank)?, &cache.classes))
}

/// Mean cross-modal cosine between same-class pairs minus the mean between
/// different-class pairs.
pub fn alignment_gap(bank: &EncoderBank, corpus: &Corpus, split: Split) -> Result<f64> {
    let idx = corpus.split_indices(split);
    if idx.len() < 2 {
        return Err(Error::invalid(format!("split {split:?} has fewer than two samples")));
    }
    let cache = FeatureCache::build(bank, corpus, &idx)?;
    let emb = cache.adapted(bank)?;
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..4 {
        for b in 0..4 {
            if a == b {
                continue;
            }
            for i in 0..idx.len() {
                for j in 0..idx.len() {
                    let s = dot(&emb[a][i], &emb[b][j]);
                    if cache.classes[i] == cache.classes[j] {
                        intra += s;
                        ni += 1;
                    } else {
                        inter += s;
                        ne += 1;
                    }
                }
            }
        }
    }
    Ok(intra / ni.max(1) as f64 - inter / ne.max(1) as f64)
}

fn check_finite(v: f64, what: &str, step: usize, history: &[f64]) -> Result<()> {
    if v.is_finite() {
        return Ok(());
    }
    let tail: Vec<String> = history.iter().rev().take(5).map(|x| format!("{x:.5}")).collect();
    Err(Error::NonFinite(format!(
        "{what} became {v} at step {step}; last losses [{}]",
        tail.join(", ")
    )))
}

fn warm_up(bank: &mut EncoderBank, corpus: &Corpus, train: &[usize], cfg: &BindingTrainConfig) -> Result<Vec<f64>> {
    let mut finals = Vec::new();
    for m in Modality::ALL {
        let mut vars = bank.params().vars_with_prefix(EncoderBank::encoder_prefix(m));
        vars.extend(bank.params().vars_with_prefix(&format!("head.{}", m.name())));
        let mut opt = Adam::new(vars, cfg.warmup_lr)?.with_clip(5.0);
        let mut rng = child_rng(cfg.seed, 100 + m.index() as u64);
        let mut order = train.to_vec();
        let mut history = Vec::new();
        let mut step = 0;
        let mut last = f64::NAN;
        for _ in 0..cfg.warmup_epochs {
            order.shuffle(&mut rng);
            let mut epoch = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.warmup_batch) {
                let inputs: Vec<_> = chunk.iter().map(|&i| input_of(corpus, m, i)).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| corpus.class_of(i)).collect();
                let logits = bank.head(m).forward(&bank.pooled_batch(&inputs)?)?;
                let loss = cross_entropy(&logits, &labels)?;
                let v = scalar(&loss)?;
                check_finite(v, "warm-up loss", step, &history)?;
                history.push(v);
                opt.backward_step(&loss)?;
                epoch += v;
                batches += 1;
                step += 1;
            }
            last = epoch / batches.max(1) as f64;
        }
        info!("warm-up {}: final cross-entropy {last:.4}", m.name());
        finals.push(last);
    }
    Ok(finals)
}

/// Warm up each encoder as a K-way classifier, freeze the encoders, then
/// align the four adapters contrastively on cached encoder features.
pub fn train_binding(corpus: &Corpus, cfg: &BindingTrainConfig) -> Result<(EncoderBank, BindingLog)> {
    if !(cfg.tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if cfg.per_class == 0 || cfg.warmup_batch == 0 {
        return Err(Error::invalid("batch sizes must be positive"));
    }
    let k = corpus.manifest.classes();
    let train = corpus.split_indices(Split::Train);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in &train {
        by_class[corpus.class_of(i)].push(i);
    }
    if k < 2 || by_class.iter().any(|c| c.len() < 2) {
        return Err(Error::invalid("binding needs at least two classes with two training samples each"));
    }
    let mc = &corpus.manifest.config;
    let mut bc = BankConfig::new(k, mc.channels(), mc.content_dim(), corpus.manifest.vocabulary.len(), cfg.seed);
    bc.fs = cfg.fs;
    bc.tau = cfg.tau;
    let mut bank = EncoderBank::with_dtype(bc, DType::F32)?;

    let mut log = BindingLog {
        warmup_loss: warm_up(&mut bank, corpus, &train, cfg)?,
        ..Default::default()
    };

    log.encoder_hash_before = bank.encoder_fingerprint()?;
    let cache = FeatureCache::build(&bank, corpus, &train)?;
    let val_idx = corpus.split_indices(Split::Val);
    let val_cache = if val_idx.len() >= 2 {
        Some(FeatureCache::build(&bank, corpus, &val_idx)?)
    } else {
        None
    };
    let row_of: std::collections::HashMap<usize, usize> = train.iter().enumerate().map(|(r, &i)| (i, r)).collect();

    let mut opt = Adam::new(bank.params().vars_with_prefix("adapter."), cfg.lr)?.with_clip(5.0);
    let mut rng = child_rng(cfg.seed, 200);
    let per = cfg.per_class.min(by_class.iter().map(Vec::len).min().unwrap_or(1));
    let steps_per_epoch = (train.len() / (k * per)).max(1);
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let mut rows = Vec::new();
            for members in &by_class {
                rows.extend(members.choose_multiple(&mut rng, per).map(|i| row_of[i] as u32));
            }
            let ids = Tensor::from_vec(rows.clone(), rows.len(), &Device::Cpu)?;
            let mut embs = Vec::with_capacity(4);
            let mut classes = Vec::new();
            let mut groups = Vec::new();
            for m in Modality::ALL {
                let pooled = cache.pooled[m.index()].index_select(&ids, 0)?;
                embs.push(bank.adapt(m, &pooled)?);
                for &r in &rows {
                    classes.push(cache.classes[r as usize]);
                    groups.push(m.index());
                }
            }
            let batch = ContrastiveBatch::cross_modal(Tensor::cat(&embs, 0)?, classes, groups, cfg.tau);
            let loss = info_nce_loss(&batch)?;
            let v = scalar(&loss)?;
            check_finite(v, "contrastive loss", step, &history)?;
            history.push(v);
            opt.backward_step(&loss)?;
            total += v;
            step += 1;
        }
        log.epoch_loss.push(total / steps_per_epoch as f64);
        let acc = match &val_cache {
            Some(vc) => retrieval_from(&vc.adapted(&bank)?, &vc.classes).mean_off_diagonal(),
            None => f64::NAN,
        };
        log.epoch_val_accuracy.push(acc);
        info!(
            "binding epoch {epoch}: loss {:.4}, val retrieval {acc:.3}",
            log.epoch_loss[epoch]
        );
    }

    log.encoder_hash_after = bank.encoder_fingerprint()?;
    if log.encoder_hash_after != log.encoder_hash_before {
        return Err(Error::Config("frozen encoder parameters changed during alignment".into()));
    }
    bank.mark_trained();
    Ok((bank, log))
}
