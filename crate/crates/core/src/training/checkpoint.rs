//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! raw little-endian f64 tensors in declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Moment, TrainState};
use crate::error::{Error, Result};
use crate::model::{LoraConfig, ModelConfig, RegressionLM};
use crate::targets::TargetStats;

const MAGIC: &[u8; 9] = b"FORECITE1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateHeader {
    global_step: u64,
    seed: u64,
    moments: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model_config: ModelConfig,
    lora: Option<LoraConfig>,
    target_stats: Option<TargetStats>,
    tensors: Vec<TensorEntry>,
    train_state: Option<StateHeader>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RegressionLM,
    pub state: Option<TrainState>,
    pub stats: Option<TargetStats>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &RegressionLM,
    state: Option<&TrainState>,
    stats: Option<&TargetStats>,
) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        format_version: FORMAT_VERSION,
        model_config: model.config.clone(),
        lora: model.lora.clone(),
        target_stats: stats.copied(),
        tensors: tensors
            .iter()
            .map(|t| TensorEntry { name: t.name.clone(), shape: t.shape.clone() })
            .collect(),
        train_state: state.map(|s| StateHeader {
            global_step: s.global_step,
            seed: s.seed,
            moments: s
                .moments
                .iter()
                .map(|m| TensorEntry { name: m.name.clone(), shape: vec![m.m.len()] })
                .collect(),
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * model.num_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    for t in &tensors {
        put(t.data);
    }
    if let Some(s) = state {
        for m in &s.moments {
            put(&m.m);
            put(&m.v);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn fill(&mut self, dst: &mut [f64]) -> Result<()> {
        let raw = self.take(dst.len() * 8)?;
        for (d, chunk) in dst.iter_mut().zip(raw.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let magic = r
        .take(MAGIC.len())
        .map_err(|_| Error::Checkpoint("missing header: not a checkpoint or unsupported version".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint or unsupported version".into()));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflow".into()))?;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }

    let mut model = RegressionLM::new(header.model_config.clone())?;
    if let Some(lora) = &header.lora {
        model.apply_lora(lora, 0)?;
    }
    {
        let tensors = model.params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "header lists {} tensors, model has {}",
                header.tensors.len(),
                tensors.len()
            )));
        }
        for (t, entry) in tensors.into_iter().zip(&header.tensors) {
            let len: usize = entry.shape.iter().product();
            if t.name != entry.name || t.data.len() != len {
                return Err(Error::Checkpoint(format!("tensor {} does not match {}", entry.name, t.name)));
            }
            r.fill(t.data)?;
        }
    }
    let state = match header.train_state {
        None => None,
        Some(sh) => {
            let mut moments = Vec::with_capacity(sh.moments.len());
            for entry in sh.moments {
                let n: usize = entry.shape.iter().product();
                let mut m = vec![0.0; n];
                let mut v = vec![0.0; n];
                r.fill(&mut m)?;
                r.fill(&mut v)?;
                moments.push(Moment { name: entry.name, m, v });
            }
            Some(TrainState { global_step: sh.global_step, seed: sh.seed, moments })
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { model, state, stats: header.target_stats })
}
