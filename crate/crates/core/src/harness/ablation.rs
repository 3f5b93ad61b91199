use serde::{Deserialize, Serialize};

use super::generate::{evaluate_clips, summarize, MetricSummary};
use super::metrics::{EmotionProbe, MetricReport};
use super::train::{train_deterministic, TrainConfig};
use crate::binding::{EncoderBank, Modality};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SyncExpert};
use crate::seqio::Corpus;

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightCell {
    pub weight: f64,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightAblation {
    pub modality: Modality,
    pub cells: Vec<WeightCell>,
    pub au_std_spearman: f64,
    #[serde(skip)]
    pub rows: Vec<MetricReport>,
}

/// Metric analogs over guidance weights, `seeds.len()` sampling seeds per weight.
pub fn run_ablation_weights(
    corpus: &Corpus,
    bank: &EncoderBank,
    model: &Denoiser,
    probe: &EmotionProbe,
    clips: &[usize],
    weights: &[f64],
    seeds: &[u64],
    modality: Modality,
) -> Result<WeightAblation> {
    if weights.len() < 2 || seeds.is_empty() {
        return Err(Error::invalid("weight ablation needs two or more weights and at least one seed"));
    }
    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for &w in weights {
        let mut cell = Vec::new();
        for &s in seeds {
            cell.extend(evaluate_clips(corpus, bank, model, probe, modality, clips, w, s)?);
        }
        cells.push(WeightCell {
            weight: w,
            summary: summarize(&cell),
        });
        rows.extend(cell);
    }
    let au: Vec<f64> = cells.iter().map(|c| c.summary.au_std).collect();
    Ok(WeightAblation {
        modality,
        au_std_spearman: spearman(weights, &au),
        cells,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicAblation {
    pub diffusion: MetricSummary,
    /// Regression with sync and emotion losses.
    pub deterministic: MetricSummary,
    /// Regression with the sync loss only.
    pub sync_only: MetricSummary,
    #[serde(skip)]
    pub rows: Vec<(String, MetricReport)>,
}

/// Train the two regression variants on the diffusion model's configuration
/// and compare them with the diffusion model at `weight`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation_deterministic(
    corpus: &Corpus,
    bank: &EncoderBank,
    expert: &SyncExpert,
    diffusion: &Denoiser,
    probe: &EmotionProbe,
    cfg: &TrainConfig,
    clips: &[usize],
    weight: f64,
    seed: u64,
) -> Result<DeterministicAblation> {
    let full = train_deterministic(corpus, bank, expert, cfg)?.0;
    let sync_cfg = TrainConfig {
        weights: LossWeights {
            emo: 0.0,
            ..cfg.weights
        },
        ..cfg.clone()
    };
    let sync_only = train_deterministic(corpus, bank, expert, &sync_cfg)?.0;
    let mut rows = Vec::new();
    let mut run = |name: &str, m: &Denoiser| -> Result<MetricSummary> {
        let r = evaluate_clips(corpus, bank, m, probe, Modality::V, clips, weight, seed)?;
        rows.extend(r.iter().cloned().map(|x| (name.to_string(), x)));
        Ok(summarize(&r))
    };
    let diffusion = run("diffusion", diffusion)?;
    let deterministic = run("deterministic", &full)?;
    let sync_only = run("deterministic_sync_only", &sync_only)?;
    Ok(DeterministicAblation {
        diffusion,
        deterministic,
        sync_only,
        rows,
    })
}
