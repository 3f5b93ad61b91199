//! One function per CLI subcommand. Every command reads and writes inside a
//! single run directory, so a pipeline is the same directory passed to each
//! step in turn.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::ablation::{run_ablation_deterministic, run_ablation_weights, DeterministicAblation, WeightAblation};
use super::generate::{evaluate_clips, evaluation_clips, generate, summarize, EvalConfig, GenerationRequest, MetricSummary};
use super::metrics::{lip_noise_floor, sequence_like, EmotionProbe};
use super::report::{metric_rows, plot_weight_curves, read_csv, write_csv, write_json, MetricRow};
use super::train::{train_diffusion, TrainConfig, TrainLog};
use crate::binding::{
    evaluate_retrieval, train_binding, BankConfig, BindingLog, BindingTrainConfig, EncoderBank, Modality,
    ModalityInput, RetrievalTable,
};
use crate::denoiser::{template_vector, Denoiser};
use crate::error::{Error, Result};
use crate::losses::{evaluate_sync, train_sync_expert, SyncConfig, SyncEval, SyncExpert, SyncLog};
use crate::seqio::{read_audio, read_content, read_sequence, write_sequence, Corpus, CorpusConfig, Split};

/// Everything a pipeline run can be configured with; loaded from `--config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub binding: BindingTrainConfig,
    pub sync: SyncConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Apply a global seed to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.binding.seed = seed;
        self.sync.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.path("corpus")
    }

    pub fn manifest(&self) -> PathBuf {
        self.corpus_dir().join(crate::seqio::MANIFEST_FILE)
    }

    pub fn bank(&self) -> PathBuf {
        self.path("binding.ckpt")
    }

    pub fn expert(&self) -> PathBuf {
        self.path("sync_expert.ckpt")
    }

    pub fn denoiser(&self) -> PathBuf {
        self.path("denoiser.ckpt")
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::load(self.manifest())
    }
}

fn need(path: &Path, step: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{} missing; run `{step}` first", path.display())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataReport {
    pub manifest: PathBuf,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

pub fn generate_data(cfg: &PipelineConfig, run: &RunDir) -> Result<DataReport> {
    let mut corpus = Corpus::generate(&cfg.corpus)?;
    let manifest = corpus.write(run.corpus_dir())?;
    let count = |s| corpus.split_indices(s).len();
    let report = DataReport {
        manifest,
        samples: corpus.len(),
        train: count(Split::Train),
        val: count(Split::Val),
        test: count(Split::Test),
    };
    write_json(&run.path("data.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BindingReport {
    pub untrained: RetrievalTable,
    pub trained: RetrievalTable,
    pub log: BindingLog,
}

pub fn train_binding_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<BindingReport> {
    need(&run.manifest(), "generate-data")?;
    let corpus = run.load_corpus()?;
    let mc = &corpus.manifest.config;
    let mut bc = BankConfig::new(
        mc.classes,
        mc.channels(),
        mc.content_dim(),
        corpus.manifest.vocabulary().len(),
        cfg.binding.seed,
    );
    bc.fs = cfg.binding.fs;
    bc.tau = cfg.binding.tau;
    let untrained = evaluate_retrieval(&EncoderBank::new(bc)?, &corpus, Split::Test)?;
    let (bank, log) = train_binding(&corpus, &cfg.binding)?;
    let trained = evaluate_retrieval(&bank, &corpus, Split::Test)?;
    bank.save(run.bank())?;
    let report = BindingReport {
        untrained,
        trained,
        log,
    };
    write_json(&run.path("binding.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyncReport {
    pub test: SyncEval,
    pub log: SyncLog,
}

pub fn train_sync_expert_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<SyncReport> {
    need(&run.manifest(), "generate-data")?;
    let corpus = run.load_corpus()?;
    let (expert, log) = train_sync_expert(&corpus, &cfg.sync)?;
    expert.save(run.expert())?;
    let report = SyncReport {
        test: evaluate_sync(&expert, &corpus, Split::Test)?,
        log,
    };
    write_json(&run.path("sync_expert.json"), &report)?;
    Ok(report)
}

fn load_frozen(run: &RunDir) -> Result<(Corpus, EncoderBank, SyncExpert)> {
    need(&run.manifest(), "generate-data")?;
    need(&run.bank(), "train-binding")?;
    need(&run.expert(), "train-sync-expert")?;
    Ok((run.load_corpus()?, EncoderBank::load(run.bank())?, SyncExpert::load(run.expert())?))
}

pub fn train_diffusion_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<TrainLog> {
    let (corpus, bank, expert) = load_frozen(run)?;
    let ckpt_dir = run.path("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    }
    let (model, log) = train_diffusion(&corpus, &bank, &expert, &cfg.train, Some(&ckpt_dir))?;
    model.save(run.denoiser())?;
    write_json(&run.path("train_log.json"), &log)?;
    Ok(log)
}

/// Emotion prompt for `sample`, in exactly one modality.
#[derive(Debug, Clone)]
pub enum Prompt {
    Label(usize),
    Text(String),
    Audio(PathBuf),
    Motion(PathBuf),
}

#[derive(Debug, Clone)]
pub struct SampleArgs {
    pub prompt: Prompt,
    pub weight: f64,
    /// Must equal the checkpoint's step count when given.
    pub steps: Option<usize>,
    /// Content container to animate; defaults to the first test clip.
    pub content: Option<PathBuf>,
    pub seed: u64,
    /// Overrides for the run directory's bank and denoiser checkpoints.
    pub bank: Option<PathBuf>,
    pub model: Option<PathBuf>,
    /// Output container; defaults to `sample_{modality}.emdf` in the run.
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleReport {
    pub output: PathBuf,
    pub modality: Modality,
    pub weight: f64,
    pub steps: usize,
    pub frames: usize,
    pub subject_id: String,
}

pub fn sample_cmd(args: &SampleArgs, run: &RunDir) -> Result<SampleReport> {
    let bank_path = args.bank.clone().unwrap_or_else(|| run.bank());
    let model_path = args.model.clone().unwrap_or_else(|| run.denoiser());
    need(&run.manifest(), "generate-data")?;
    need(&bank_path, "train-binding")?;
    need(&model_path, "train-diffusion")?;
    let corpus = run.load_corpus()?;
    let bank = EncoderBank::load(&bank_path)?;
    let model = Denoiser::load(&model_path)?;
    let trained_steps = model.config.schedule.steps;
    if let Some(s) = args.steps {
        if s != trained_steps {
            return Err(Error::Config(format!(
                "--steps {s} differs from the {trained_steps} steps the denoiser was trained with"
            )));
        }
    }
    let vocab = corpus.manifest.vocabulary();
    let (modality, style) = match &args.prompt {
        Prompt::Label(k) => {
            if *k >= corpus.manifest.classes() {
                return Err(Error::invalid(format!("label {k} out of range")));
            }
            (Modality::L, bank.embed(ModalityInput::Label(*k))?)
        }
        Prompt::Text(s) => (Modality::T, bank.embed(ModalityInput::Text(&vocab.tokenize(s)))?),
        Prompt::Audio(p) => (Modality::A, bank.embed(ModalityInput::Audio(&read_audio(p)?.0))?),
        Prompt::Motion(p) => (Modality::V, bank.embed(ModalityInput::Motion(&read_sequence(p)?.frames))?),
    };
    let (content, subject) = match &args.content {
        Some(p) => {
            let (track, subject) = read_content(p)?;
            (track.features, subject)
        }
        None => {
            let i = *corpus
                .split_indices(Split::Test)
                .first()
                .ok_or_else(|| Error::invalid("corpus has no test clips"))?;
            (corpus.samples[i].content.features.clone(), corpus.manifest.samples[i].subject_id.clone())
        }
    };
    let request = GenerationRequest {
        content,
        style: style.vector,
        template: template_vector(&subject, bank.config.fs),
    };
    let frames = generate(&model, &[request], args.weight, args.seed)?.remove(0);
    let seq = sequence_like(frames, &corpus.manifest.channel_map, corpus.manifest.config.fps, &subject, None)?;
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| run.path(&format!("sample_{}.emdf", modality.name())));
    write_sequence(&seq, &output)?;
    let summary_path = output.with_extension("json");
    let report = SampleReport {
        output,
        modality,
        weight: args.weight,
        steps: trained_steps,
        frames: seq.len(),
        subject_id: subject,
    };
    write_json(&summary_path, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalitySummary {
    pub modality: Modality,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub weight: f64,
    pub seed: u64,
    pub clips: Vec<usize>,
    /// lip_dist of the ground-truth clips themselves.
    pub lip_noise_floor: f64,
    pub modalities: Vec<ModalitySummary>,
    pub probe_hash: String,
    pub bank_hash: String,
    pub denoiser_hash: String,
}

fn fit_probe(corpus: &Corpus, bank: &EncoderBank, model: &Denoiser) -> Result<EmotionProbe> {
    let probe = EmotionProbe::fit(corpus, Split::Train)?;
    let hash = probe.fingerprint();
    let mut others = bank.params().tensor_hashes()?;
    others.extend(model.params().tensor_hashes()?);
    if others.contains(&hash) {
        return Err(Error::Config("emotion probe shares parameters with a generation model".into()));
    }
    Ok(probe)
}

pub fn evaluate_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<EvalReport> {
    let (corpus, bank, _) = load_frozen(run)?;
    need(&run.denoiser(), "train-diffusion")?;
    let model = Denoiser::load(run.denoiser())?;
    let probe = fit_probe(&corpus, &bank, &model)?;
    let clips = evaluation_clips(&corpus, cfg.eval.clips);
    let seed = *cfg.eval.seeds.first().ok_or_else(|| Error::invalid("no evaluation seeds"))?;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut modalities = Vec::new();
    for &m in &cfg.eval.modalities {
        let reports = evaluate_clips(&corpus, &bank, &model, &probe, m, &clips, cfg.eval.weight, seed)?;
        info!("evaluate {}: {:?}", m.name(), summarize(&reports));
        rows.extend(metric_rows(m.name(), &reports));
        modalities.push(ModalitySummary {
            modality: m,
            summary: summarize(&reports),
        });
    }
    write_csv(&run.path("eval_metrics.csv"), &rows)?;
    let report = EvalReport {
        weight: cfg.eval.weight,
        seed,
        lip_noise_floor: lip_noise_floor(&corpus, &clips)?,
        clips,
        modalities,
        probe_hash: probe.fingerprint(),
        bank_hash: bank.params().fingerprint("")?,
        denoiser_hash: model.fingerprint()?,
    };
    write_json(&run.path("eval_summary.json"), &report)?;
    Ok(report)
}

pub fn ablate_weights_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<WeightAblation> {
    let (corpus, bank, _) = load_frozen(run)?;
    need(&run.denoiser(), "train-diffusion")?;
    let model = Denoiser::load(run.denoiser())?;
    let probe = fit_probe(&corpus, &bank, &model)?;
    let clips = evaluation_clips(&corpus, cfg.eval.clips);
    let ab = run_ablation_weights(
        &corpus,
        &bank,
        &model,
        &probe,
        &clips,
        &cfg.eval.weights,
        &cfg.eval.seeds,
        Modality::V,
    )?;
    let csv = run.path("ablation_weights.csv");
    write_csv(&csv, &metric_rows("diffusion", &ab.rows))?;
    write_json(&run.path("ablation_weights.json"), &ab)?;
    plot_weight_curves(&run.path("ablation_weights.svg"), &read_csv(&csv)?)?;
    Ok(ab)
}

pub fn ablate_deterministic_cmd(cfg: &PipelineConfig, run: &RunDir) -> Result<DeterministicAblation> {
    let (corpus, bank, expert) = load_frozen(run)?;
    need(&run.denoiser(), "train-diffusion")?;
    let model = Denoiser::load(run.denoiser())?;
    let probe = fit_probe(&corpus, &bank, &model)?;
    let clips = evaluation_clips(&corpus, cfg.eval.clips);
    let seed = *cfg.eval.seeds.first().ok_or_else(|| Error::invalid("no evaluation seeds"))?;
    let ab = run_ablation_deterministic(&corpus, &bank, &expert, &model, &probe, &cfg.train, &clips, cfg.eval.weight, seed)?;
    let rows: Vec<MetricRow> = ab
        .rows
        .iter()
        .flat_map(|(variant, r)| metric_rows(variant, std::slice::from_ref(r)))
        .collect();
    write_csv(&run.path("ablation_deterministic.csv"), &rows)?;
    write_json(&run.path("ablation_deterministic.json"), &ab)?;
    Ok(ab)
}

/// Render a metric CSV (default: the weight ablation) as a line plot.
pub fn plot_cmd(run: &RunDir, input: Option<&Path>) -> Result<PathBuf> {
    let csv = input.map(Path::to_path_buf).unwrap_or_else(|| run.path("ablation_weights.csv"));
    need(&csv, "ablate-weights")?;
    let out = csv.with_extension("svg");
    plot_weight_curves(&out, &read_csv(&csv)?)?;
    Ok(out)
}
