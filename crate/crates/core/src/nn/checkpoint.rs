//! Versioned binary checkpoint: spec, training metadata, parameters and
//! normalization statistics. Byte-stable for identical inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{build_model, Mode, Model, ModelSpec};
use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 4] = b"MDCK";
const VERSION: u32 = 1;

/// Best-epoch bookkeeping stored alongside the weights; validation metrics
/// feed the ensemble's voting weights.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub val_loss: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
    pub val_sen: Option<f64>,
    pub val_spe: Option<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> NnError {
    NnError::CheckpointIo {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> NnError {
    NnError::CheckpointFormat {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<(), NnError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let spec_json = serde_json::to_vec(model.spec()).expect("spec serializes");
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_json);

    let params = model.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let shape = p.data.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.data.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let stats = model.stats();
    buf.extend_from_slice(&(stats.len() as u32).to_le_bytes());
    for s in stats {
        buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
        for v in s.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.bytes.len() {
            return Err(format_err(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>, NnError> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Load a checkpoint: rebuild the model from its stored spec, then fill in
/// parameters and statistics. The model comes back in eval mode.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), NnError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let spec_len = r.u32()? as usize;
    let spec: ModelSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| format_err(path, format!("bad spec json: {e}")))?;
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| format_err(path, format!("bad meta json: {e}")))?;

    let mut model = build_model(&spec)?;
    let n_params = r.u32()? as usize;
    if n_params != model.params().len() {
        return Err(format_err(
            path,
            format!(
                "parameter count mismatch: file has {n_params}, spec builds {}",
                model.params().len()
            ),
        ));
    }
    for p in model.params_mut() {
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != p.data.shape() {
            return Err(format_err(
                path,
                format!(
                    "tensor shape mismatch: file {shape:?}, spec {:?}",
                    p.data.shape()
                ),
            ));
        }
        let data = r.f64_vec(shape.iter().product())?;
        p.data = Tensor::from_data(&shape, data).expect("validated shape");
    }
    let n_stats = r.u32()? as usize;
    if n_stats != model.stats().len() {
        return Err(format_err(path, "statistics count mismatch"));
    }
    for s in model.stats_mut() {
        let len = r.u64()? as usize;
        if len != s.len() {
            return Err(format_err(path, "statistics length mismatch"));
        }
        *s = r.f64_vec(len)?;
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes"));
    }
    model.set_mode(Mode::Eval);
    Ok((model, meta))
}
