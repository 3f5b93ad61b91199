//! Multimodal emotion binding: four modality encoders, MaxPool aggregation,
//! per-modality adapters and contrastive alignment into one shared space.

mod bank;
mod contrastive;
mod train;

pub use bank::{BankConfig, EncoderBank, ModalityInput};
pub use contrastive::{info_nce_loss, ContrastiveBatch};
pub(crate) use contrastive::softplus;
pub use train::{alignment_gap, evaluate_retrieval, train_binding, BindingLog, BindingTrainConfig, RetrievalTable};

use candle_core::Tensor;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// Expression (FLAME motion) clip.
    V,
    /// Emotional audio features.
    A,
    /// Text tokens.
    T,
    /// Class label.
    L,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::V, Modality::A, Modality::T, Modality::L];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::V => "motion",
            Modality::A => "audio",
            Modality::T => "text",
            Modality::L => "label",
        }
    }
}

/// Unit-norm vector in the shared emotion space.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEmbedding {
    pub vector: Vec<f32>,
    pub modality: Modality,
    pub emotion_class: Option<usize>,
}

impl ModalityEmbedding {
    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &ModalityEmbedding) -> f64 {
        cosine(&self.vector, &other.vector)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Column-wise maximum over the rows of an L×F feature sequence.
pub fn maxpool_aggregate(z: &Array2<f32>) -> Result<Array1<f32>> {
    if z.nrows() == 0 {
        return Err(Error::invalid("cannot max-pool an empty feature sequence"));
    }
    Ok(z.fold_axis(ndarray::Axis(0), f32::NEG_INFINITY, |m, v| m.max(*v)))
}

/// Tensor form over the sequence axis: (L, F) → (F) or (B, L, F) → (B, F).
pub fn maxpool_tensor(z: &Tensor) -> Result<Tensor> {
    let axis = z.rank().checked_sub(2).ok_or_else(|| Error::invalid("max-pool needs rank ≥ 2"))?;
    if z.dim(axis)? == 0 {
        return Err(Error::invalid("cannot max-pool an empty feature sequence"));
    }
    Ok(z.max(axis)?)
}
