//! Checkpoint archive.
//!
//! Layout: the 8-byte magic `AGGRCKPT`, a little-endian `u64` manifest
//! length, the JSON manifest, then the AGT1 records it indexes (offsets are
//! relative to the first record).

use std::fs;
use std::path::Path;

use aggrnet_tensor::io::{self as tio, Record};
use aggrnet_tensor::{DType, Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::{ParamKind, ParamStore};
use crate::train::{SgdState, TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"AGGRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Param,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub group: Group,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

/// ChaCha8 position: key, stream and word offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Integrity(format!("bad RNG word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
        DType::I64 => "i64",
    }
}

/// Serializes the full training state.
pub fn encode<F: Element>(t: &Trainer<F>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: &str, group: Group, kind: ParamKind, value: &Tensor<F>| -> Result<()> {
        let bytes = tio::encode(value)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            group,
            kind,
            shape: value.shape().to_vec(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
        Ok(())
    };
    for id in t.params.ids() {
        let spec = t.params.spec(id);
        push(&spec.name, Group::Param, spec.kind, t.params.get(id))?;
    }
    for id in t.params.ids() {
        if let Some(v) = &t.sgd.velocity[id.index()] {
            let spec = t.params.spec(id);
            push(&spec.name, Group::Momentum, spec.kind, v)?;
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        dtype: dtype_name(F::DTYPE).into(),
        model: t.model.config.clone(),
        train: t.config.clone(),
        epoch: t.epoch,
        step: t.step,
        rng: RngState::capture(&t.rng),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<F: Element>(t: &Trainer<F>, path: &Path) -> Result<()> {
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

/// A parsed archive whose tensors are still raw records.
#[derive(Debug, Clone)]
pub struct Archive {
    pub manifest: Manifest,
    records: Vec<Record>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Archive {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(integrity("not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let json_end = usize::try_from(len).ok().and_then(|l| l.checked_add(16)).filter(|&e| e <= bytes.len());
        let json_end = json_end.ok_or_else(|| integrity("manifest length exceeds file size"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..json_end]).map_err(|e| integrity(format!("unreadable manifest: {e}")))?;
        if manifest.format != FORMAT_VERSION {
            return Err(integrity(format!("unsupported checkpoint format {}", manifest.format)));
        }
        let payload = &bytes[json_end..];
        let mut expected = 0u64;
        let mut records = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.offset != expected || e.offset.saturating_add(e.len) > payload.len() as u64 {
                return Err(integrity(format!("tensor {} lies outside the archive", e.name)));
            }
            let mut slice = &payload[e.offset as usize..(e.offset + e.len) as usize];
            let rec = tio::read_record(&mut slice).map_err(|err| integrity(format!("tensor {}: {err}", e.name)))?;
            if !slice.is_empty() || rec.shape() != e.shape.as_slice() {
                return Err(integrity(format!("tensor {} does not match its manifest entry", e.name)));
            }
            expected = e.offset + e.len;
            records.push(rec);
        }
        if expected != payload.len() as u64 {
            return Err(integrity("trailing bytes after the last tensor"));
        }
        Ok(Self { manifest, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| integrity(format!("cannot read {}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    fn tensor<F: Element>(&self, i: usize) -> Result<Tensor<F>> {
        Ok(match &self.records[i] {
            Record::F32(t) => t.cast(),
            Record::F64(t) => t.cast(),
            Record::I64 { .. } => {
                return Err(integrity(format!("tensor {} is not floating point", self.manifest.tensors[i].name)))
            }
        })
    }

    /// Rebuilds the model and its parameters (values cast to `F` if needed).
    pub fn into_model<F: Element>(&self) -> Result<(Model, ParamStore<F>)> {
        let model = Model::build(&self.manifest.model)
            .map_err(|e| integrity(format!("stored model config is invalid: {e}")))?;
        let mut params: ParamStore<F> = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let mut seen = vec![false; params.len()];
        for (i, e) in self.manifest.tensors.iter().enumerate().filter(|(_, e)| e.group == Group::Param) {
            let id = params.id(&e.name).ok_or_else(|| integrity(format!("unknown parameter {}", e.name)))?;
            params.set(id, self.tensor(i)?).map_err(|err| integrity(err.to_string()))?;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(integrity(format!("parameter {} is missing", params.specs()[i].name)));
        }
        Ok((model, params))
    }

    pub fn into_trainer<F: Element>(&self) -> Result<Trainer<F>> {
        let (model, params) = self.into_model::<F>()?;
        let mut sgd = SgdState::new(&params);
        for (i, e) in self.manifest.tensors.iter().enumerate().filter(|(_, e)| e.group == Group::Momentum) {
            let id = params.id(&e.name).ok_or_else(|| integrity(format!("unknown momentum buffer {}", e.name)))?;
            if e.shape != params.spec(id).shape {
                return Err(integrity(format!("momentum buffer {} has shape {:?}", e.name, e.shape)));
            }
            sgd.velocity[id.index()] = Some(self.tensor(i)?);
        }
        let m = &self.manifest;
        Ok(Trainer::from_parts(model, params, Some(sgd), m.train.clone(), m.rng.restore()?, m.epoch, m.step))
    }
}

pub fn load<F: Element>(path: &Path) -> Result<Trainer<F>> {
    Archive::read(path)?.into_trainer()
}
