//! Synthetic oracle corpus. Every clip is `content_part + style_part +
//! blink_part + noise` with all parts recoverable from the manifest, which is
//! what lets the metrics compare generated motion against ground truth.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::container::{
    read_audio, read_content, read_residual, read_sequence, write_audio, write_content,
    write_residual, write_sequence,
};
use super::text::Vocabulary;
use super::{ChannelMap, ContentTrack, EmotionPromptBundle, ExpressionSequence};
use crate::error::{Error, Result};
use crate::rng::{child_rng, derive_seed, normal, DetRng};

pub const MANIFEST_FILE: &str = "manifest.json";
const MIN_STYLE_DISTANCE: f64 = 0.1;
const RUN_MIN: usize = 3;
const RUN_MAX: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub classes: usize,
    pub samples: usize,
    pub frames: usize,
    pub fps: f64,
    pub upper_channels: usize,
    pub lip_channels: usize,
    pub phonemes: usize,
    pub phoneme_dim: usize,
    pub prosody_dim: usize,
    pub noise_sigma: f64,
    pub blink_rate_hz: f64,
    pub blink_frames: usize,
    pub subjects: usize,
    pub audio_frames_min: usize,
    pub audio_frames_max: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            classes: 8,
            samples: 512,
            frames: 64,
            fps: super::DEFAULT_FPS,
            upper_channels: 42,
            lip_channels: 10,
            phonemes: 16,
            phoneme_dim: 16,
            prosody_dim: 8,
            noise_sigma: 0.02,
            blink_rate_hz: 0.35,
            blink_frames: 5,
            subjects: 8,
            audio_frames_min: 24,
            audio_frames_max: 48,
        }
    }
}

impl CorpusConfig {
    pub fn channels(&self) -> usize {
        self.upper_channels + self.lip_channels + 1
    }

    /// Width of content and audio feature rows.
    pub fn content_dim(&self) -> usize {
        self.phoneme_dim + self.prosody_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("samples", self.samples),
            ("frames", self.frames),
            ("upper_channels", self.upper_channels),
            ("lip_channels", self.lip_channels),
            ("phonemes", self.phonemes),
            ("phoneme_dim", self.phoneme_dim),
            ("prosody_dim", self.prosody_dim),
            ("blink_frames", self.blink_frames),
            ("subjects", self.subjects),
            ("audio_frames_min", self.audio_frames_min),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 emotion classes"));
        }
        if self.samples < self.classes {
            return Err(Error::invalid("need at least one sample per class"));
        }
        if self.frames < 32 {
            return Err(Error::invalid(format!("clips need at least 32 frames, got {}", self.frames)));
        }
        if self.phonemes < 2 {
            return Err(Error::invalid("need at least 2 phonemes"));
        }
        if !(self.fps > 0.0 && self.noise_sigma >= 0.0 && self.blink_rate_hz >= 0.0) {
            return Err(Error::invalid("fps must be positive; noise and blink rate non-negative"));
        }
        if self.audio_frames_max < self.audio_frames_min {
            return Err(Error::invalid("audio_frames_max below audio_frames_min"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Ground-truth style of one emotion class: upper-face channels follow
/// `offset + amplitude * sin(2π f t / fps + phase)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub class: usize,
    pub offset: Vec<f32>,
    pub amplitude: Vec<f32>,
    pub frequency_hz: f64,
    pub prosody: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub subject_id: String,
    pub emotion_class: usize,
    pub split: Split,
    pub motion: String,
    pub content: String,
    pub audio: String,
    pub residual: String,
    /// Per-clip phase of the class sinusoid, radians.
    pub phase: f64,
    pub blink_onsets: Vec<usize>,
    pub blink_times: Vec<f64>,
    pub phoneme_ids: Vec<u32>,
    pub text: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub channel_map: ChannelMap,
    /// P rows of mouth-channel targets, one per phoneme.
    pub lip_table: Vec<Vec<f32>>,
    /// P rows of content embeddings, one per phoneme.
    pub phoneme_embeddings: Vec<Vec<f32>>,
    pub class_styles: Vec<ClassStyle>,
    pub vocabulary: Vec<String>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// Noise-free additive parts of a clip, each T×D with zeros outside its role.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub content_part: Array2<f32>,
    pub style_part: Array2<f32>,
    pub blink_part: Array2<f32>,
}

impl GroundTruth {
    pub fn sum(&self) -> Array2<f32> {
        &(&self.content_part + &self.style_part) + &self.blink_part
    }
}

impl CorpusManifest {
    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.index)
            .collect()
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.classes)
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Recomputes the noise-free decomposition of sample `index`.
    pub fn ground_truth(&self, index: usize) -> Result<GroundTruth> {
        let rec = self
            .samples
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no sample {index}")))?;
        let cfg = &self.config;
        let (t_len, d) = (rec.phoneme_ids.len(), cfg.channels());
        let mut content_part = Array2::zeros((t_len, d));
        for t in 0..t_len {
            let lo = t.saturating_sub(1);
            let hi = (t + 1).min(t_len - 1);
            let n = (hi - lo + 1) as f32;
            for (j, &ch) in self.channel_map.lip.iter().enumerate() {
                let mut acc = 0.0f32;
                for s in lo..=hi {
                    acc += self.lip_table[rec.phoneme_ids[s] as usize][j];
                }
                content_part[[t, ch]] = acc / n;
            }
        }
        let style = &self.class_styles[rec.emotion_class];
        let mut style_part = Array2::zeros((t_len, d));
        for t in 0..t_len {
            let wave = (2.0 * PI * style.frequency_hz * t as f64 / cfg.fps + rec.phase).sin();
            for (j, &ch) in self.channel_map.upper_face.iter().enumerate() {
                style_part[[t, ch]] =
                    (style.offset[j] as f64 + style.amplitude[j] as f64 * wave) as f32;
            }
        }
        let mut blink_part = Array2::zeros((t_len, d));
        let b = self.channel_map.blink_index();
        for &onset in &rec.blink_onsets {
            for t in onset..(onset + cfg.blink_frames).min(t_len) {
                blink_part[[t, b]] = 1.0;
            }
        }
        Ok(GroundTruth {
            content_part,
            style_part,
            blink_part,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: CorpusManifest = serde_json::from_slice(&bytes)?;
        manifest.root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        manifest.config.validate()?;
        for rec in &manifest.samples {
            for rel in [&rec.motion, &rec.content, &rec.audio, &rec.residual] {
                let p = manifest.path_of(rel);
                if !p.is_file() {
                    return Err(Error::invalid(format!("manifest references missing file {}", p.display())));
                }
            }
        }
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub motion: ExpressionSequence,
    pub content: ContentTrack,
    pub audio: Array2<f32>,
    pub residual: Array2<f32>,
}

/// A manifest together with all payloads in memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub samples: Vec<CorpusSample>,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let channel_map = ChannelMap::contiguous(config.upper_channels, config.lip_channels);
        let mut table_rng = child_rng(config.seed, u64::MAX - 2);
        let lip_table = (0..config.phonemes)
            .map(|_| {
                (0..config.lip_channels)
                    .map(|_| table_rng.random_range(-0.4f32..0.4))
                    .collect()
            })
            .collect();
        let phoneme_embeddings = (0..config.phonemes)
            .map(|_| {
                (0..config.phoneme_dim)
                    .map(|_| 0.5 * normal(&mut table_rng) as f32)
                    .collect()
            })
            .collect();
        let class_styles = class_styles(config);
        let vocab = Vocabulary::new(config.classes);
        let mut manifest = CorpusManifest {
            format_version: 1,
            config: config.clone(),
            channel_map,
            lip_table,
            phoneme_embeddings,
            class_styles,
            vocabulary: vocab.words().to_vec(),
            samples: Vec::with_capacity(config.samples),
            root: PathBuf::new(),
        };
        let mut samples = Vec::with_capacity(config.samples);
        for index in 0..config.samples {
            let (rec, sample) = generate_sample(&manifest, &vocab, index)?;
            manifest.samples.push(rec);
            samples.push(sample);
        }
        Ok(Self { manifest, samples })
    }

    /// Writes payload files and `manifest.json` under `dir`; returns the
    /// manifest path.
    pub fn write(&mut self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let fps = self.manifest.config.fps;
        for (rec, s) in self.manifest.samples.iter().zip(&self.samples) {
            write_sequence(&s.motion, dir.join(&rec.motion))?;
            write_content(&s.content, fps, &rec.subject_id, dir.join(&rec.content))?;
            write_audio(&s.audio, fps, Some(rec.emotion_class), dir.join(&rec.audio))?;
            write_residual(&s.residual, fps, dir.join(&rec.residual))?;
        }
        self.manifest.root = dir.to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest = CorpusManifest::load(manifest_path)?;
        let samples = manifest
            .samples
            .iter()
            .map(|rec| {
                Ok(CorpusSample {
                    motion: read_sequence(manifest.path_of(&rec.motion))?,
                    content: read_content(manifest.path_of(&rec.content))?.0,
                    audio: read_audio(manifest.path_of(&rec.audio))?.0,
                    residual: read_residual(manifest.path_of(&rec.residual))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn bundle(&self, index: usize) -> EmotionPromptBundle {
        let rec = &self.manifest.samples[index];
        let s = &self.samples[index];
        EmotionPromptBundle {
            motion: s.motion.clone(),
            audio: s.audio.clone(),
            text: rec.text.clone(),
            label: rec.emotion_class,
            emotion_class: rec.emotion_class,
        }
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.manifest.split_indices(split)
    }

    pub fn class_of(&self, index: usize) -> usize {
        self.manifest.samples[index].emotion_class
    }
}

/// Writes a freshly generated corpus under `dir`.
pub fn generate_corpus(config: &CorpusConfig, dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    let mut corpus = Corpus::generate(config)?;
    corpus.write(dir)?;
    Ok(corpus.manifest)
}

fn class_styles(cfg: &CorpusConfig) -> Vec<ClassStyle> {
    let mut rng = child_rng(cfg.seed, u64::MAX - 1);
    let mut styles: Vec<ClassStyle> = Vec::with_capacity(cfg.classes);
    while styles.len() < cfg.classes {
        let offset: Vec<f32> = (0..cfg.upper_channels)
            .map(|_| 0.3 * normal(&mut rng) as f32)
            .collect();
        let amplitude: Vec<f32> = (0..cfg.upper_channels)
            .map(|_| {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.random_range(0.05f32..0.3)
            })
            .collect();
        // Whole cycles per clip, so the per-clip mean of the sinusoid is zero.
        let cycles = rng.random_range(1..=4usize);
        let frequency_hz = cycles as f64 * cfg.fps / cfg.frames as f64;
        let prosody: Vec<f32> = (0..cfg.prosody_dim)
            .map(|_| normal(&mut rng) as f32)
            .collect();
        let candidate = ClassStyle {
            class: styles.len(),
            offset,
            amplitude,
            frequency_hz,
            prosody,
        };
        if styles
            .iter()
            .all(|s| style_distance(s, &candidate) >= MIN_STYLE_DISTANCE)
        {
            styles.push(candidate);
        }
    }
    styles
}

fn style_distance(a: &ClassStyle, b: &ClassStyle) -> f64 {
    a.offset
        .iter()
        .zip(&b.offset)
        .chain(a.amplitude.iter().zip(&b.amplitude))
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn phoneme_runs(rng: &mut DetRng, len: usize, phonemes: usize) -> Vec<u32> {
    let mut ids = Vec::with_capacity(len);
    let mut prev = u32::MAX;
    while ids.len() < len {
        let mut p = rng.random_range(0..phonemes as u32);
        while p == prev {
            p = rng.random_range(0..phonemes as u32);
        }
        let run = rng.random_range(RUN_MIN..=RUN_MAX);
        ids.extend(std::iter::repeat_n(p, run.min(len - ids.len())));
        prev = p;
    }
    ids
}

/// Gaussian draw truncated at ±5σ by resampling.
fn bounded_noise(rng: &mut DetRng, sigma: f64) -> f32 {
    loop {
        let z = normal(rng);
        if z.abs() <= 5.0 {
            return (z * sigma) as f32;
        }
    }
}

fn generate_sample(
    m: &CorpusManifest,
    vocab: &Vocabulary,
    index: usize,
) -> Result<(SampleRecord, CorpusSample)> {
    let cfg = &m.config;
    let mut rng = child_rng(cfg.seed, index as u64);
    let class = index % cfg.classes;
    let split = match (index / cfg.classes) % 10 {
        0..=6 => Split::Train,
        7 => Split::Val,
        _ => Split::Test,
    };
    let subject_id = format!(
        "S{:02}",
        derive_seed(cfg.seed ^ 0x5b, index as u64) % cfg.subjects as u64
    );
    let t_len = cfg.frames;
    let phoneme_ids = phoneme_runs(&mut rng, t_len, cfg.phonemes);
    let phase = rng.random_range(0.0..2.0 * PI);

    let exp = Exp::new(cfg.blink_rate_hz.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let duration = t_len as f64 / cfg.fps;
    let mut blink_times = Vec::new();
    let mut clock = 0.0;
    if cfg.blink_rate_hz > 0.0 {
        loop {
            clock += exp.sample(&mut rng);
            if clock >= duration {
                break;
            }
            blink_times.push(clock);
        }
    }
    let blink_onsets: Vec<usize> = blink_times
        .iter()
        .map(|t| ((t * cfg.fps).floor() as usize).min(t_len - 1))
        .collect();

    let text = vocab.tokenize(&vocab.describe(class, &mut rng));
    let stem = format!("samples/{index:05}");
    let rec = SampleRecord {
        index,
        subject_id: subject_id.clone(),
        emotion_class: class,
        split,
        motion: format!("{stem}_motion.emdf"),
        content: format!("{stem}_content.emdf"),
        audio: format!("{stem}_audio.emdf"),
        residual: format!("{stem}_residual.emdf"),
        phase,
        blink_onsets,
        blink_times,
        phoneme_ids: phoneme_ids.clone(),
        text,
    };

    let gt = {
        // ground_truth reads the record back through the manifest
        let mut probe = m.clone();
        probe.samples = vec![SampleRecord { index: 0, ..rec.clone() }];
        probe.ground_truth(0)?
    };
    let clean = gt.sum();
    let blink = m.channel_map.blink_index();
    let mut frames = clean.clone();
    for t in 0..t_len {
        for ch in 0..cfg.channels() {
            if ch != blink {
                frames[[t, ch]] += bounded_noise(&mut rng, cfg.noise_sigma);
            }
        }
    }
    let residual = &frames - &clean;

    let content_dim = cfg.content_dim();
    let content_features = Array2::from_shape_fn((t_len, content_dim), |(t, j)| {
        let base = if j < cfg.phoneme_dim {
            m.phoneme_embeddings[phoneme_ids[t] as usize][j]
        } else {
            0.0
        };
        base + rng.random_range(-0.05f32..0.05)
    });
    let content = ContentTrack::new(phoneme_ids, content_features)?;

    let audio_len = rng.random_range(cfg.audio_frames_min..=cfg.audio_frames_max);
    let audio_ids = phoneme_runs(&mut rng, audio_len, cfg.phonemes);
    let prosody = &m.class_styles[class].prosody;
    let audio = Array2::from_shape_fn((audio_len, content_dim), |(t, j)| {
        let base = if j < cfg.phoneme_dim {
            m.phoneme_embeddings[audio_ids[t] as usize][j]
        } else {
            prosody[j - cfg.phoneme_dim] + 0.1 * normal(&mut rng) as f32
        };
        base + rng.random_range(-0.05f32..0.05)
    });

    let motion = ExpressionSequence::new(
        frames,
        cfg.fps,
        m.channel_map.clone(),
        subject_id,
        Some(class),
    )?;
    Ok((
        rec,
        CorpusSample {
            motion,
            content,
            audio,
            residual,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            classes: 4,
            samples: 40,
            frames: 32,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        for cfg in [
            CorpusConfig { classes: 1, ..small(1) },
            CorpusConfig { samples: 3, ..small(1) },
            CorpusConfig { frames: 31, ..small(1) },
            CorpusConfig { lip_channels: 0, ..small(1) },
        ] {
            assert!(matches!(Corpus::generate(&cfg), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn decomposition_is_consistent() {
        let c = Corpus::generate(&small(3)).unwrap();
        let sigma = c.manifest.config.noise_sigma as f32;
        for (i, s) in c.samples.iter().enumerate() {
            let gt = c.manifest.ground_truth(i).unwrap();
            let residual = &s.motion.frames - &gt.sum();
            assert_eq!(residual, s.residual);
            assert!(residual.iter().all(|r| r.abs() <= 5.0 * sigma + 1e-6));
            assert_eq!(s.content.len(), s.motion.len());
        }
    }

    #[test]
    fn class_styles_are_separated() {
        let c = Corpus::generate(&small(9)).unwrap();
        let styles = &c.manifest.class_styles;
        for a in 0..styles.len() {
            for b in 0..a {
                assert!(style_distance(&styles[a], &styles[b]) >= MIN_STYLE_DISTANCE);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover_every_class() {
        let c = Corpus::generate(&CorpusConfig { samples: 80, ..small(2) }).unwrap();
        let mut seen = std::collections::HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            let idx = c.split_indices(split);
            let classes: std::collections::HashSet<_> = idx.iter().map(|&i| c.class_of(i)).collect();
            assert_eq!(classes.len(), 4, "{split:?}");
            for i in idx {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 80);
    }

    #[test]
    fn phoneme_runs_respect_bounds() {
        let mut rng = child_rng(5, 0);
        let ids = phoneme_runs(&mut rng, 500, 16);
        let mut run = 1;
        let mut runs = Vec::new();
        for w in ids.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        assert!(runs.iter().all(|r| (RUN_MIN..=RUN_MAX).contains(r)), "{runs:?}");
    }

    #[test]
    fn write_and_load_reproduces_payloads() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Corpus::generate(&small(4)).unwrap();
        let path = c.write(dir.path()).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back.samples, c.samples);
        assert_eq!(back.manifest.samples, c.manifest.samples);
    }

    #[test]
    fn missing_payload_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Corpus::generate(&small(4)).unwrap();
        let path = c.write(dir.path()).unwrap();
        fs::remove_file(dir.path().join(&c.manifest.samples[3].audio)).unwrap();
        assert!(CorpusManifest::load(&path).is_err());
    }
}
