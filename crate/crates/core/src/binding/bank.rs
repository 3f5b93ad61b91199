use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{maxpool_tensor, Modality, ModalityEmbedding};
use crate::attention::MultiHeadAttention;
use crate::error::{Error, Result};
use crate::nn::{
    l2_normalize, sinusoidal, tensor_to_f32, Activation, Checkpoint, Init, LayerNorm, Linear, Mlp,
    ParamStore,
};
use crate::rng::rng_from;

pub const BANK_KIND: &str = "binding-bank";
/// Padding positions are pushed this far down before max-pooling.
const PAD_PENALTY: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    /// Shared embedding width F_s.
    pub fs: usize,
    pub classes: usize,
    /// Expression channels D.
    pub channels: usize,
    /// Audio feature width F_a.
    pub audio_dim: usize,
    pub vocab: usize,
    pub heads: usize,
    pub seed: u64,
    pub tau: f64,
    /// Set once contrastive alignment has run.
    #[serde(default)]
    pub trained: bool,
}

impl BankConfig {
    pub fn new(classes: usize, channels: usize, audio_dim: usize, vocab: usize, seed: u64) -> Self {
        Self {
            fs: 64,
            classes,
            channels,
            audio_dim,
            vocab,
            heads: 4,
            seed,
            tau: 0.07,
            trained: false,
        }
    }
}

/// One payload for one of the four encoders.
#[derive(Debug, Clone, Copy)]
pub enum ModalityInput<'a> {
    /// T×D expression frames.
    Motion(&'a Array2<f32>),
    /// L_A×F_a audio features.
    Audio(&'a Array2<f32>),
    Text(&'a [u32]),
    Label(usize),
}

impl ModalityInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            ModalityInput::Motion(_) => Modality::V,
            ModalityInput::Audio(_) => Modality::A,
            ModalityInput::Text(_) => Modality::T,
            ModalityInput::Label(_) => Modality::L,
        }
    }

    fn len(&self) -> usize {
        match self {
            ModalityInput::Motion(a) | ModalityInput::Audio(a) => a.nrows(),
            ModalityInput::Text(t) => t.len(),
            ModalityInput::Label(_) => 1,
        }
    }
}

#[derive(Debug, Clone)]
struct MotionEncoder {
    input: Linear,
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
struct AudioEncoder {
    input: Linear,
    conv: Linear,
}

#[derive(Debug, Clone)]
struct TextEncoder {
    table: Tensor,
    proj: Linear,
}

/// Modality encoders E_V, E_A, E_T, E_L, their warm-up classification heads
/// and the three-layer adapters. Parameter name prefixes: `enc.`, `head.`,
/// `adapter.`.
#[derive(Debug, Clone)]
pub struct EncoderBank {
    pub config: BankConfig,
    params: ParamStore,
    motion: MotionEncoder,
    audio: AudioEncoder,
    text: TextEncoder,
    label_table: Tensor,
    heads: Vec<Linear>,
    adapters: Vec<Mlp>,
}

impl EncoderBank {
    pub fn new(config: BankConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: BankConfig, dtype: DType) -> Result<Self> {
        if config.fs == 0 || config.heads == 0 || config.fs % config.heads != 0 {
            return Err(Error::invalid("F_s must be a positive multiple of the head count"));
        }
        if config.classes < 2 || config.channels == 0 || config.audio_dim == 0 || config.vocab == 0 {
            return Err(Error::invalid("bank dimensions must be positive"));
        }
        let mut rng = rng_from(config.seed);
        let mut ps = ParamStore::new(dtype);
        let fs = config.fs;
        let r = &mut rng;
        let motion = MotionEncoder {
            input: Linear::new(&mut ps, r, "enc.v.input", config.channels, fs)?,
            norm1: LayerNorm::new(&mut ps, r, "enc.v.norm1", fs)?,
            attn: MultiHeadAttention::new(&mut ps, r, "enc.v.attn", fs, fs, config.heads)?,
            norm2: LayerNorm::new(&mut ps, r, "enc.v.norm2", fs)?,
            ffn: Mlp::new(&mut ps, r, "enc.v.ffn", &[fs, 2 * fs, fs], Activation::Gelu, false)?,
        };
        let audio = AudioEncoder {
            input: Linear::new(&mut ps, r, "enc.a.input", config.audio_dim, fs)?,
            conv: Linear::new(&mut ps, r, "enc.a.conv", 3 * fs, fs)?,
        };
        let text = TextEncoder {
            table: ps.param("enc.t.table", &[config.vocab, fs], Init::Normal(1.0), r)?,
            proj: Linear::new(&mut ps, r, "enc.t.proj", fs, fs)?,
        };
        let label_table = ps.param("enc.l.table", &[config.classes, fs], Init::Normal(1.0), r)?;
        let heads = Modality::ALL
            .iter()
            .map(|m| Linear::new(&mut ps, r, &format!("head.{}", m.name()), fs, config.classes))
            .collect::<Result<Vec<_>>>()?;
        let adapters = Modality::ALL
            .iter()
            .map(|m| {
                Mlp::new(
                    &mut ps,
                    r,
                    &format!("adapter.{}", m.name()),
                    &[fs, fs, fs, fs],
                    Activation::Relu,
                    false,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: ps,
            motion,
            audio,
            text,
            label_table,
            heads,
            adapters,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn is_trained(&self) -> bool {
        self.config.trained
    }

    /// Flag the bank as usable for conditioning without running `train_binding`,
    /// e.g. for gradient checks on a freshly initialised bank.
    pub fn mark_trained(&mut self) {
        self.config.trained = true;
    }

    /// Hash of the encoder parameters (frozen during alignment).
    pub fn encoder_fingerprint(&self) -> Result<String> {
        self.params.fingerprint("enc.")
    }

    pub fn encoder_prefix(m: Modality) -> &'static str {
        match m {
            Modality::V => "enc.v.",
            Modality::A => "enc.a.",
            Modality::T => "enc.t.",
            Modality::L => "enc.l.",
        }
    }

    pub(crate) fn head(&self, m: Modality) -> &Linear {
        &self.heads[m.index()]
    }

    fn tensor(&self, a: &Array2<f32>) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            a.as_slice().ok_or_else(|| Error::invalid("non-contiguous input"))?,
            a.dim(),
            &Device::Cpu,
        )?
        .to_dtype(self.dtype())?)
    }

    /// (B, T, D) frames → (B, T, F_s). All clips share one length.
    pub fn encode_motion_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, t, _) = frames.dims3()?;
        let e = &self.motion;
        let pos: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let pe = sinusoidal(&pos, self.config.fs, self.dtype())?;
        let h = e.input.forward(frames)?.broadcast_add(&pe)?;
        let n = e.norm1.forward(&h)?;
        let h = (&h + e.attn.forward(&n, &n, None)?)?;
        let h = (&h + e.ffn.forward(&e.norm2.forward(&h)?)?)?;
        Ok(h)
    }

    /// Padded (B, L, F_a) features with a (B, L, 1) validity mask.
    fn encode_audio_tensor(&self, feats: &Tensor, valid: &Tensor) -> Result<Tensor> {
        let (b, l, _) = feats.dims3()?;
        let fs = self.config.fs;
        let h = self.audio.input.forward(feats)?.gelu()?.broadcast_mul(valid)?;
        let zero = Tensor::zeros((b, 1, fs), self.dtype(), &Device::Cpu)?;
        let prev = Tensor::cat(&[&zero, &h.narrow(1, 0, l - 1)?], 1)?;
        let next = Tensor::cat(&[&h.narrow(1, 1, l - 1)?, &zero], 1)?;
        let stacked = Tensor::cat(&[&prev, &h, &next], 2)?;
        Ok(self.audio.conv.forward(&stacked)?.gelu()?)
    }

    fn encode_text_tensor(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let rows = self.text.table.index_select(&ids.flatten_all()?, 0)?;
        let rows = rows.reshape((b, l, self.config.fs))?;
        Ok(self.text.proj.forward(&rows)?.gelu()?)
    }

    fn encode_label_tensor(&self, labels: &[usize]) -> Result<Tensor> {
        for &k in labels {
            if k >= self.config.classes {
                return Err(Error::invalid(format!("label {k} out of range")));
            }
        }
        let ids = Tensor::from_vec(
            labels.iter().map(|&k| k as u32).collect::<Vec<_>>(),
            labels.len(),
            &Device::Cpu,
        )?;
        Ok(self.label_table.index_select(&ids, 0)?.unsqueeze(1)?)
    }

    /// L_m×F_s feature sequence for one payload.
    pub fn encode_modality(&self, input: ModalityInput<'_>) -> Result<Tensor> {
        if input.len() == 0 {
            return Err(Error::invalid("empty input sequence"));
        }
        let z = match input {
            ModalityInput::Motion(frames) => {
                if frames.ncols() != self.config.channels {
                    return Err(Error::invalid(format!(
                        "motion clip has {} channels, encoder expects {}",
                        frames.ncols(),
                        self.config.channels
                    )));
                }
                self.encode_motion_tensor(&self.tensor(frames)?.unsqueeze(0)?)?
            }
            ModalityInput::Audio(feats) => {
                if feats.ncols() != self.config.audio_dim {
                    return Err(Error::invalid("audio feature width mismatch"));
                }
                let valid = Tensor::ones((1, feats.nrows(), 1), self.dtype(), &Device::Cpu)?;
                self.encode_audio_tensor(&self.tensor(feats)?.unsqueeze(0)?, &valid)?
            }
            ModalityInput::Text(tokens) => {
                if let Some(t) = tokens.iter().find(|t| **t as usize >= self.config.vocab) {
                    return Err(Error::invalid(format!("token {t} outside vocabulary")));
                }
                let ids = Tensor::from_slice(tokens, (1, tokens.len()), &Device::Cpu)?;
                self.encode_text_tensor(&ids)?
            }
            ModalityInput::Label(k) => self.encode_label_tensor(&[k])?,
        };
        Ok(z.squeeze(0)?)
    }

    /// Max-pooled encoder output for a batch of payloads of one modality,
    /// (B, F_s). Variable lengths are padded and masked out of the max.
    pub fn pooled_batch(&self, inputs: &[ModalityInput<'_>]) -> Result<Tensor> {
        let first = inputs.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let m = first.modality();
        if inputs.iter().any(|i| i.modality() != m) {
            return Err(Error::invalid("mixed modalities in one batch"));
        }
        if inputs.iter().any(|i| i.len() == 0) {
            return Err(Error::invalid("empty input sequence"));
        }
        let dt = self.dtype();
        match m {
            Modality::V => {
                let t = first.len();
                if inputs.iter().any(|i| i.len() != t) {
                    // encode each length separately
                    let rows = inputs
                        .iter()
                        .map(|i| Ok(maxpool_tensor(&self.encode_modality(*i)?)?.unsqueeze(0)?))
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(Tensor::cat(&rows, 0)?);
                }
                let mut data = Vec::with_capacity(inputs.len() * t * self.config.channels);
                for i in inputs {
                    if let ModalityInput::Motion(a) = i {
                        if a.ncols() != self.config.channels {
                            return Err(Error::invalid("motion channel count mismatch"));
                        }
                        data.extend(a.iter().copied());
                    }
                }
                let x = Tensor::from_vec(data, (inputs.len(), t, self.config.channels), &Device::Cpu)?
                    .to_dtype(dt)?;
                maxpool_tensor(&self.encode_motion_tensor(&x)?)
            }
            Modality::A => {
                let l = inputs.iter().map(|i| i.len()).max().unwrap();
                let f = self.config.audio_dim;
                let mut data = vec![0f32; inputs.len() * l * f];
                let mut valid = vec![0f32; inputs.len() * l];
                for (b, i) in inputs.iter().enumerate() {
                    if let ModalityInput::Audio(a) = i {
                        if a.ncols() != f {
                            return Err(Error::invalid("audio feature width mismatch"));
                        }
                        for (t, row) in a.outer_iter().enumerate() {
                            valid[b * l + t] = 1.0;
                            for (j, v) in row.iter().enumerate() {
                                data[(b * l + t) * f + j] = *v;
                            }
                        }
                    }
                }
                let x = Tensor::from_vec(data, (inputs.len(), l, f), &Device::Cpu)?.to_dtype(dt)?;
                let valid = Tensor::from_vec(valid, (inputs.len(), l, 1), &Device::Cpu)?.to_dtype(dt)?;
                let z = self.encode_audio_tensor(&x, &valid)?;
                let penalty = ((valid - 1.0)? * PAD_PENALTY)?;
                maxpool_tensor(&z.broadcast_add(&penalty)?)
            }
            Modality::T => {
                let l = inputs.iter().map(|i| i.len()).max().unwrap();
                let mut ids = vec![0u32; inputs.len() * l];
                let mut valid = vec![0f32; inputs.len() * l];
                for (b, i) in inputs.iter().enumerate() {
                    if let ModalityInput::Text(toks) = i {
                        for (t, tok) in toks.iter().enumerate() {
                            if *tok as usize >= self.config.vocab {
                                return Err(Error::invalid(format!("token {tok} outside vocabulary")));
                            }
                            ids[b * l + t] = *tok;
                            valid[b * l + t] = 1.0;
                        }
                    }
                }
                let ids = Tensor::from_vec(ids, (inputs.len(), l), &Device::Cpu)?;
                let valid = Tensor::from_vec(valid, (inputs.len(), l, 1), &Device::Cpu)?.to_dtype(dt)?;
                let z = self.encode_text_tensor(&ids)?;
                let penalty = ((valid - 1.0)? * PAD_PENALTY)?;
                maxpool_tensor(&z.broadcast_add(&penalty)?)
            }
            Modality::L => {
                let labels: Vec<usize> = inputs
                    .iter()
                    .map(|i| match i {
                        ModalityInput::Label(k) => *k,
                        _ => unreachable!(),
                    })
                    .collect();
                maxpool_tensor(&self.encode_label_tensor(&labels)?)
            }
        }
    }

    /// Adapter projection of pooled features onto the unit sphere, (B, F_s).
    pub fn adapt(&self, m: Modality, pooled: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.adapters[m.index()].forward(pooled)?)
    }

    /// Differentiable motion → shared-space embedding, (B, T, D) → (B, F_s).
    pub fn embed_motion_tensor(&self, frames: &Tensor) -> Result<Tensor> {
        let pooled = maxpool_tensor(&self.encode_motion_tensor(frames)?)?;
        self.adapt(Modality::V, &pooled)
    }

    pub fn embed_batch(&self, inputs: &[ModalityInput<'_>]) -> Result<Vec<ModalityEmbedding>> {
        let m = inputs.first().ok_or_else(|| Error::invalid("empty batch"))?.modality();
        let z = self.adapt(m, &self.pooled_batch(inputs)?)?;
        let rows = z.dim(0)?;
        (0..rows)
            .map(|r| {
                Ok(ModalityEmbedding {
                    vector: tensor_to_f32(&z.get(r)?)?,
                    modality: m,
                    emotion_class: match inputs[r] {
                        ModalityInput::Label(k) => Some(k),
                        _ => None,
                    },
                })
            })
            .collect()
    }

    pub fn embed(&self, input: ModalityInput<'_>) -> Result<ModalityEmbedding> {
        Ok(self.embed_batch(&[input])?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params
            .save(path, BANK_KIND, &serde_json::to_value(&self.config)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ckpt = Checkpoint::read(path)?;
        ckpt.expect_kind(BANK_KIND)?;
        let config: BankConfig = ckpt.meta_as()?;
        let bank = Self::new(config)?;
        bank.params.load_from(&ckpt)?;
        Ok(bank)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor_to_f32;

    fn bank() -> EncoderBank {
        EncoderBank::new(BankConfig::new(4, 9, 6, 20, 7)).unwrap()
    }

    #[test]
    fn label_encoding_is_table_row() {
        let b = bank();
        let z = b.encode_modality(ModalityInput::Label(2)).unwrap();
        assert_eq!(z.dims(), &[1, 64]);
        let row = tensor_to_f32(&b.label_table.get(2).unwrap()).unwrap();
        assert_eq!(tensor_to_f32(&z).unwrap(), row);
    }

    #[test]
    fn shapes_and_determinism() {
        let b = bank();
        let clip = Array2::from_shape_fn((11, 9), |(t, c)| ((t * 9 + c) as f32 * 0.37).sin());
        let z1 = b.encode_modality(ModalityInput::Motion(&clip)).unwrap();
        let z2 = b.encode_modality(ModalityInput::Motion(&clip)).unwrap();
        assert_eq!(z1.dims(), &[11, 64]);
        let v1 = tensor_to_f32(&z1).unwrap();
        assert!(v1.iter().all(|v| v.is_finite()));
        assert_eq!(v1, tensor_to_f32(&z2).unwrap());
        let audio = Array2::from_elem((5, 6), 0.3f32);
        assert_eq!(b.encode_modality(ModalityInput::Audio(&audio)).unwrap().dims(), &[5, 64]);
        assert_eq!(b.encode_modality(ModalityInput::Text(&[1, 4, 2])).unwrap().dims(), &[3, 64]);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let b = bank();
        let empty = Array2::<f32>::zeros((0, 9));
        assert!(matches!(
            b.encode_modality(ModalityInput::Motion(&empty)),
            Err(Error::InvalidArgument(_))
        ));
        assert!(b.encode_modality(ModalityInput::Text(&[])).is_err());
        assert!(b.encode_modality(ModalityInput::Label(4)).is_err());
    }

    #[test]
    fn padded_batches_match_single_encoding() {
        let b = bank();
        let a1 = Array2::from_shape_fn((4, 6), |(t, c)| (t as f32 - c as f32) * 0.1);
        let a2 = Array2::from_shape_fn((7, 6), |(t, c)| (t as f32 * c as f32) * 0.05);
        let batch = b
            .pooled_batch(&[ModalityInput::Audio(&a1), ModalityInput::Audio(&a2)])
            .unwrap();
        for (r, a) in [&a1, &a2].iter().enumerate() {
            let single = maxpool_tensor(&b.encode_modality(ModalityInput::Audio(a)).unwrap()).unwrap();
            let d = (batch.get(r).unwrap() - single).unwrap().abs().unwrap().max_all().unwrap();
            assert!(crate::nn::scalar(&d).unwrap() < 1e-5);
        }
        let t1 = [1u32, 5, 2];
        let t2 = [1u32, 6, 7, 8, 2];
        let batch = b.pooled_batch(&[ModalityInput::Text(&t1), ModalityInput::Text(&t2)]).unwrap();
        let single = maxpool_tensor(&b.encode_modality(ModalityInput::Text(&t1)).unwrap()).unwrap();
        let d = (batch.get(0).unwrap() - single).unwrap().abs().unwrap().max_all().unwrap();
        assert!(crate::nn::scalar(&d).unwrap() < 1e-5);
    }

    #[test]
    fn adapter_outputs_are_unit_norm() {
        let b = bank();
        for k in 0..4 {
            let e = b.embed(ModalityInput::Label(k)).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }
}
