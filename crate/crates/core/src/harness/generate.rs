use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::{
    metric_au_std, metric_blink_rate, metric_emo_sim, metric_lip_dist, sequence_like, EmotionProbe, MetricReport,
};
use super::train::prompt_input;
use crate::binding::{EncoderBank, Modality};
use crate::denoiser::{template_vector, Denoiser, DenoiserConditioning, Parameterization};
use crate::diffusion::{batch_row, sample_loop, GuidanceConfig};
use crate::error::{Error, Result};
use crate::rng::child_rng;
use crate::seqio::{Corpus, Split};

/// One clip to synthesise: content track, style embedding, identity template.
#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub content: Array2<f32>,
    pub style: Vec<f32>,
    pub template: Vec<f32>,
}

/// Generate a batch of clips. Diffusion models run the guided ancestral
/// sampler; the deterministic baseline is a single forward pass.
pub fn generate(model: &Denoiser, requests: &[GenerationRequest], weight: f64, seed: u64) -> Result<Vec<Array2<f32>>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let parts = requests
        .iter()
        .map(|r| DenoiserConditioning::single(&r.content, &r.style, &r.template, DType::F32))
        .collect::<Result<Vec<_>>>()?;
    let cond = DenoiserConditioning::cat(&parts)?;
    let sched = model.config.schedule.build()?;
    let out = match model.config.parameterization {
        Parameterization::Epsilon => {
            let guidance = GuidanceConfig::new(weight, 0.0)?;
            let mut rng = child_rng(seed, 500);
            sample_loop(model, &cond, &guidance, &sched, &mut rng)?
        }
        Parameterization::Direct => {
            let (b, t) = cond.batch_and_length()?;
            let zeros = Tensor::zeros((b, t, model.config.channels), DType::F32, &Device::Cpu)?;
            model.forward(&zeros, &vec![sched.steps(); b], &cond, &vec![true; b])?
        }
    };
    (0..requests.len()).map(|i| batch_row(&out, i)).collect()
}

/// Evaluation settings shared by the reports and ablations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Test clips per evaluation cell.
    pub clips: usize,
    pub weight: f64,
    pub weights: Vec<f64>,
    pub seeds: Vec<u64>,
    pub modalities: Vec<Modality>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            clips: 8,
            weight: 2.0,
            weights: vec![0.5, 1.0, 1.5, 2.0, 3.0],
            seeds: vec![11, 12, 13, 14, 15],
            modalities: Modality::ALL.to_vec(),
        }
    }
}

/// First `n` test clips, in an order that cycles through the classes.
pub fn evaluation_clips(corpus: &Corpus, n: usize) -> Vec<usize> {
    let test = corpus.split_indices(Split::Test);
    let k = corpus.manifest.classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in test {
        by_class[corpus.class_of(i)].push(i);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n && by_class.iter().any(|c| c.len() > round) {
        for c in &by_class {
            if let Some(&i) = c.get(round) {
                if out.len() < n {
                    out.push(i);
                }
            }
        }
        round += 1;
    }
    out
}

/// A different test clip of the same class, used as the prompt source so the
/// prompt never carries the target clip itself.
pub fn prompt_source(corpus: &Corpus, target: usize) -> usize {
    let k = corpus.class_of(target);
    let same: Vec<usize> = corpus
        .split_indices(Split::Test)
        .into_iter()
        .filter(|&i| corpus.class_of(i) == k)
        .collect();
    match same.iter().position(|&i| i == target) {
        Some(p) if same.len() > 1 => same[(p + 1) % same.len()],
        _ => target,
    }
}

/// Request for test clip `i` with the emotion prompt given in modality `m`.
pub fn request_for(corpus: &Corpus, bank: &EncoderBank, m: Modality, i: usize) -> Result<GenerationRequest> {
    let src = prompt_source(corpus, i);
    let style = bank.embed(prompt_input(corpus, m, src))?.vector;
    Ok(GenerationRequest {
        content: corpus.samples[i].content.features.clone(),
        style,
        template: template_vector(&corpus.manifest.samples[i].subject_id, bank.config.fs),
    })
}

/// Generate and score clips for the given test indices.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_clips(
    corpus: &Corpus,
    bank: &EncoderBank,
    model: &Denoiser,
    probe: &EmotionProbe,
    modality: Modality,
    indices: &[usize],
    weight: f64,
    seed: u64,
) -> Result<Vec<MetricReport>> {
    if indices.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let requests = indices
        .iter()
        .map(|&i| request_for(corpus, bank, modality, i))
        .collect::<Result<Vec<_>>>()?;
    let clips = generate(model, &requests, weight, seed)?;
    let map = &corpus.manifest.channel_map;
    let fps = corpus.manifest.config.fps;
    indices
        .iter()
        .zip(clips)
        .map(|(&i, frames)| {
            let rec = &corpus.manifest.samples[i];
            let seq = sequence_like(frames, map, fps, &rec.subject_id, Some(rec.emotion_class))?;
            let gt = corpus.manifest.ground_truth(i)?;
            Ok(MetricReport {
                sample: i,
                lip_dist: metric_lip_dist(&seq, &gt.content_part)?,
                au_std: metric_au_std(&seq),
                blink_rate: metric_blink_rate(&seq),
                emo_sim: metric_emo_sim(&seq, rec.emotion_class, Some(probe))?,
                weight,
                seed,
            })
        })
        .collect()
}

/// Mean of each metric over a set of reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub lip_dist: f64,
    pub au_std: f64,
    pub blink_rate: f64,
    pub emo_sim: f64,
    pub min_emo_sim: f64,
    pub clips: usize,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    MetricSummary {
        lip_dist: mean(|r| r.lip_dist),
        au_std: mean(|r| r.au_std),
        blink_rate: mean(|r| r.blink_rate),
        emo_sim: mean(|r| r.emo_sim),
        min_emo_sim: reports.iter().map(|r| r.emo_sim).fold(f64::INFINITY, f64::min),
        clips: reports.len(),
    }
}

