//! Small neural-network toolkit on top of candle: a deterministic parameter
//! store, the few layers the models need, and the checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{normal, DetRng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMCK";
pub const CHECKPOINT_SCHEMA_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±bound.
    Uniform(f64),
    Normal(f64),
}

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn param(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut DetRng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} declared twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b)).collect(),
            Init::Normal(std) => (0..n).map(|_| std * normal(rng)).collect(),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and f32 values of parameters under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in tensor_to_f32(var.as_tensor())? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex(&h.finalize()))
    }

    /// Per-tensor hashes, used to check that two models share no weights.
    pub fn tensor_hashes(&self) -> Result<Vec<String>> {
        self.vars
            .values()
            .map(|v| {
                let mut h = Sha256::new();
                for x in tensor_to_f32(v.as_tensor())? {
                    h.update(x.to_le_bytes());
                }
                Ok(hex(&h.finalize()))
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>, kind: &str, meta: &serde_json::Value) -> Result<()> {
        let path = path.as_ref();
        let header = CheckpointHeader {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: kind.to_string(),
            meta: meta.clone(),
            tensors: self
                .vars
                .iter()
                .map(|(name, v)| TensorEntry {
                    name: name.clone(),
                    shape: v.dims().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for var in self.vars.values() {
            for v in tensor_to_f32(var.as_tensor())? {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Overwrites every parameter with the values stored in `ckpt`.
    pub fn load_from(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.tensors.len() != self.vars.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} tensors, model expects {}",
                ckpt.tensors.len(),
                self.vars.len()
            )));
        }
        for (name, var) in &self.vars {
            let (shape, values) = ckpt
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor {name}")))?;
            if shape.as_slice() != var.dims() {
                return Err(Error::Config(format!(
                    "tensor {name}: checkpoint shape {shape:?}, model shape {:?}",
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(values, shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// 2-D array to a tensor of the given dtype.
pub fn array_to_tensor(a: &ndarray::Array2<f32>, dtype: DType) -> Result<Tensor> {
    let std = a.as_standard_layout();
    Ok(Tensor::from_slice(std.as_slice().unwrap(), a.dim(), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u16,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint: `"EMCK"`, u16 schema version, u32 JSON length, JSON
/// metadata, then every tensor as little-endian f32 in header order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub schema_version: u16,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |offset: usize, reason: String| Error::Decode { offset, reason };
        if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(err(0, "not a checkpoint (bad magic or truncated)".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_SCHEMA_VERSION {
            return Err(err(4, format!("unknown checkpoint schema version {version}")));
        }
        let hl = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let start = 10 + hl;
        if bytes.len() < start {
            return Err(err(10, "truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&bytes[10..start])
            .map_err(|e| err(10, format!("malformed checkpoint header: {e}")))?;
        let mut offset = start;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = offset + 4 * n;
            if bytes.len() < end {
                return Err(err(offset, format!("tensor {} truncated", entry.name)));
            }
            let values = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(entry.name, (entry.shape, values));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(err(offset, "trailing bytes after last tensor".into()));
        }
        Ok(Self {
            schema_version: header.schema_version,
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn meta_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.meta.clone())?)
    }
}

/// Affine layer; weight stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, rng: &mut DetRng, name: &str, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[inp, out], Init::Uniform(bound), rng)?,
            bias: Some(ps.param(&format!("{name}.bias"), &[out], Init::Zeros, rng)?),
        })
    }

    pub fn zeros(ps: &mut ParamStore, rng: &mut DetRng, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[inp, out], Init::Zeros, rng)?,
            bias: Some(ps.param(&format!("{name}.bias"), &[out], Init::Zeros, rng)?),
        })
    }

    pub fn no_bias(ps: &mut ParamStore, rng: &mut DetRng, name: &str, inp: usize, out: usize) -> Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[inp, out], Init::Uniform(bound), rng)?,
            bias: None,
        })
    }

    /// Applies to the last dimension of an input of any rank ≥ 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, inp))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, rng: &mut DetRng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Ones, rng)?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros, rng)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
            Activation::Silu => x.silu()?,
        })
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` = [in, hidden.., out]. With `zero_last` the final layer starts
    /// at zero so the network initially outputs exactly zero.
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut DetRng,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_last: bool,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output sizes"));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let lname = format!("{name}.{i}");
                if zero_last && i == n - 1 {
                    Linear::zeros(ps, rng, &lname, sizes[i], sizes[i + 1])
                } else {
                    Linear::new(ps, rng, &lname, sizes[i], sizes[i + 1])
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, activation })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(&h)?;
            }
        }
        Ok(h)
    }
}

/// Standard sinusoidal features for integer positions, shape (len, dim).
pub fn sinusoidal(positions: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = (i % half.max(1)) as f64;
            let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
            data.push(if i < half { (p * freq).sin() } else { (p * freq).cos() });
        }
    }
    Ok(Tensor::from_vec(data, (positions.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Row-wise L2 normalisation over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Mean cross-entropy of `logits` (N×K) against integer targets.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let t = Tensor::from_vec(
        targets.iter().map(|&t| t as u32).collect::<Vec<_>>(),
        targets.len(),
        logits.device(),
    )?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

/// Adam (decoupled weight decay disabled) over a fixed set of variables.
pub struct Adam {
    inner: AdamW,
    vars: Vec<Var>,
    clip: Option<f64>,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        Ok(Self {
            inner: AdamW::new(vars.clone(), params)?,
            vars,
            clip: None,
        })
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.clip = Some(max_norm);
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let mut grads = loss.backward()?;
        if let Some(max_norm) = self.clip {
            clip_grad_norm(&mut grads, &self.vars, max_norm)?;
        }
        self.inner.step(&grads)?;
        Ok(())
    }
}

pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut total = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-12);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}
