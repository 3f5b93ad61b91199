//! Expression-sequence data model, the EMDF on-disk container and the
//! synthetic oracle corpus.

mod container;
mod corpus;
pub mod text;

pub use container::{
    decode_container, encode_container, read_audio, read_content, read_residual, read_sequence,
    write_audio, write_content, write_residual, write_sequence, ContainerHeader, ContainerKind,
    EMDF_MAGIC, EMDF_VERSION,
};
pub use corpus::{
    generate_corpus, ClassStyle, Corpus, CorpusConfig, CorpusManifest, CorpusSample, GroundTruth, SampleRecord,
    Split, MANIFEST_FILE,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default frame rate of generated clips.
pub const DEFAULT_FPS: f64 = 25.0;

/// Named channel roles. The three sets partition `0..D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub lip: Vec<usize>,
    pub upper_face: Vec<usize>,
    pub blink: Vec<usize>,
}

impl ChannelMap {
    /// Layout with `n_upper` expression channels first, then `n_lip` mouth
    /// channels (mouth expression + jaw), then the blink channel.
    pub fn contiguous(n_upper: usize, n_lip: usize) -> Self {
        Self {
            upper_face: (0..n_upper).collect(),
            lip: (n_upper..n_upper + n_lip).collect(),
            blink: vec![n_upper + n_lip],
        }
    }

    /// 53 channels: 42 upper-face expression, 8 mouth expression + 2 jaw, 1 blink.
    pub fn flame_default() -> Self {
        Self::contiguous(42, 10)
    }

    pub fn channels(&self) -> usize {
        self.lip.len() + self.upper_face.len() + self.blink.len()
    }

    pub fn blink_index(&self) -> usize {
        self.blink[0]
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.blink.len() != 1 {
            return Err(Error::invalid(format!(
                "blink set must hold exactly one channel, got {}",
                self.blink.len()
            )));
        }
        let mut seen = vec![false; d];
        for &c in self.lip.iter().chain(&self.upper_face).chain(&self.blink) {
            if c >= d {
                return Err(Error::invalid(format!("channel {c} out of range for D={d}")));
            }
            if seen[c] {
                return Err(Error::invalid(format!("channel {c} assigned to more than one role")));
            }
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("channel {missing} has no role")));
        }
        Ok(())
    }
}

/// T×D FLAME-style expression frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionSequence {
    pub frames: Array2<f32>,
    pub fps: f64,
    pub channel_map: ChannelMap,
    pub subject_id: String,
    pub emotion_class: Option<usize>,
}

impl ExpressionSequence {
    pub fn new(
        frames: Array2<f32>,
        fps: f64,
        channel_map: ChannelMap,
        subject_id: impl Into<String>,
        emotion_class: Option<usize>,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            fps,
            channel_map,
            subject_id: subject_id.into(),
            emotion_class,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.nrows() == 0 {
            return Err(Error::invalid("expression sequence needs at least one frame"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {}", self.fps)));
        }
        if let Some((idx, _)) = self.frames.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite frame value at flat index {idx}")));
        }
        self.channel_map.validate(self.frames.ncols())
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.ncols()
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.fps
    }

    /// Copy of the given channels, T×|cols|.
    pub fn select(&self, cols: &[usize]) -> Array2<f32> {
        select_columns(&self.frames, cols)
    }
}

pub(crate) fn select_columns(a: &Array2<f32>, cols: &[usize]) -> Array2<f32> {
    Array2::from_shape_fn((a.nrows(), cols.len()), |(t, j)| a[[t, cols[j]]])
}

/// Per-frame speech-content conditioning (the `A` track of the denoiser).
#[derive(Debug, Clone, PartialEq)]
pub struct ContentTrack {
    pub phoneme_ids: Vec<u32>,
    /// T×F_a.
    pub features: Array2<f32>,
}

impl ContentTrack {
    pub fn new(phoneme_ids: Vec<u32>, features: Array2<f32>) -> Result<Self> {
        if phoneme_ids.len() != features.nrows() {
            return Err(Error::invalid(format!(
                "content track has {} phoneme ids but {} feature rows",
                phoneme_ids.len(),
                features.nrows()
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::invalid("content track is empty"));
        }
        Ok(Self {
            phoneme_ids,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// One emotion sample seen through four modalities.
#[derive(Debug, Clone)]
pub struct EmotionPromptBundle {
    pub motion: ExpressionSequence,
    /// L_A×F_a emotional audio features.
    pub audio: Array2<f32>,
    pub text: Vec<u32>,
    pub label: usize,
    pub emotion_class: usize,
}

impl EmotionPromptBundle {
    pub fn validate(&self) -> Result<()> {
        if self.motion.emotion_class != Some(self.emotion_class) || self.label != self.emotion_class
        {
            return Err(Error::invalid("bundle modalities disagree on emotion class"));
        }
        Ok(())
    }
}
