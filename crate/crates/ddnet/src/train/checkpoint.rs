//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"DDCK"
//! version u16 (currently 1)
//! payload:
//!   epochs_done   u32
//!   opt_step      u64
//!   rng_seed      [u8; 32]
//!   rng_stream    u64
//!   rng_word_pos  u128
//!   model_config  u32 length + JSON bytes
//!   train_config  u32 length + JSON bytes
//!   params        u32 count, then per entry:
//!                   u16 name length + name bytes
//!                   u32 element count + elements as f64
//!   moments       u32 count, then per entry:
//!                   u16 name length + name bytes
//!                   u32 element count + first moments + second moments
//! crc32 over the payload
//! ```
//!
//! Every parameter tensor is serialized by name; loading rebuilds the model
//! from the embedded config and overwrites each tensor, refusing files whose
//! names or element counts disagree with the rebuilt shape. Optimizer
//! moments and the shuffling RNG state round-trip exactly, so a resumed run
//! continues bit-for-bit where the original would have gone.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{DdnetModel, ModelConfig};
use crate::tensor::gradcheck::ParamVisit;

use super::{AdamW, Result, TrainConfig, TrainError, TrainState};

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u16 = 1;

/// Everything needed to continue a run.
pub struct Checkpoint {
    pub state: TrainState,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, detail: impl Into<String>) -> TrainError {
    TrainError::Checkpoint { path: path.display().to_string(), detail: detail.into() }
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8], what: &str, path: &Path) -> Result<()> {
    if bytes.len() > u32::MAX as usize {
        return Err(format_err(path, format!("{what} too large to serialize")));
    }
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn push_name(out: &mut Vec<u8>, name: &str, path: &Path) -> Result<()> {
    let bytes = name.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(format_err(path, format!("parameter name too long: {name}")));
    }
    out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize the full training state to `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &DdnetModel,
    opt: &AdamW,
    rng: &ChaCha8Rng,
    epochs_done: usize,
    train_config: &TrainConfig,
) -> Result<()> {
    let path = path.as_ref();
    let mut payload = Vec::new();
    payload.extend_from_slice(&(epochs_done as u32).to_le_bytes());
    let (step, moments) = opt.state();
    payload.extend_from_slice(&step.to_le_bytes());
    payload.extend_from_slice(&rng.get_seed());
    payload.extend_from_slice(&rng.get_stream().to_le_bytes());
    payload.extend_from_slice(&rng.get_word_pos().to_le_bytes());

    let model_json = serde_json::to_vec(&model.config)
        .map_err(|e| format_err(path, format!("model config serialization: {e}")))?;
    push_bytes(&mut payload, &model_json, "model config", path)?;
    let train_json = serde_json::to_vec(train_config)
        .map_err(|e| format_err(path, format!("train config serialization: {e}")))?;
    push_bytes(&mut payload, &train_json, "train config", path)?;

    let mut params: Vec<(String, Vec<f64>)> = Vec::new();
    model.visit_params(&mut |name, t| params.push((name.to_string(), t.data().to_vec())));
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, data) in &params {
        push_name(&mut payload, name, path)?;
        payload.extend_from_slice(&(data.len() as u32).to_le_bytes());
        push_f64s(&mut payload, data);
    }

    payload.extend_from_slice(&(moments.len() as u32).to_le_bytes());
    for (name, (m, v)) in moments {
        push_name(&mut payload, name, path)?;
        payload.extend_from_slice(&(m.len() as u32).to_le_bytes());
        push_f64s(&mut payload, m);
        push_f64s(&mut payload, v);
    }

    let mut bytes = Vec::with_capacity(payload.len() + 10);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(self.path, format!("truncated at byte {} (needed {n} more)", self.at))
        })?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| format_err(self.path, "parameter name is not valid UTF-8"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let byte_len = n
            .checked_mul(8)
            .ok_or_else(|| format_err(self.path, "element count overflows"))?;
        let bytes = self.take(byte_len)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Load a checkpoint and rebuild a resumable [`TrainState`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 10 {
        return Err(format_err(path, "file too small to hold a header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let payload = &bytes[6..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored_crc != computed {
        return Err(format_err(
            path,
            format!("checksum mismatch (stored {stored_crc:#010x}, computed {computed:#010x})"),
        ));
    }

    let mut cur = Cursor { bytes: payload, at: 0, path };
    let epochs_done = cur.u32()? as usize;
    let step = cur.u64()?;
    let seed: [u8; 32] = cur.take(32)?.try_into().unwrap();
    let stream = cur.u64()?;
    let word_pos = cur.u128()?;

    let model_len = cur.u32()? as usize;
    let model_json = cur.take(model_len)?;
    let model_config: ModelConfig = serde_json::from_slice(model_json)
        .map_err(|e| format_err(path, format!("model config: {e}")))?;
    let train_len = cur.u32()? as usize;
    let train_json = cur.take(train_len)?;
    let train_config: TrainConfig = serde_json::from_slice(train_json)
        .map_err(|e| format_err(path, format!("train config: {e}")))?;

    let n_params = cur.u32()? as usize;
    let mut params: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for _ in 0..n_params {
        let name = cur.name()?;
        let n = cur.u32()? as usize;
        let data = cur.f64s(n)?;
        if params.insert(name.clone(), data).is_some() {
            return Err(format_err(path, format!("duplicate parameter {name}")));
        }
    }

    let n_moments = cur.u32()? as usize;
    let mut moments: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for _ in 0..n_moments {
        let name = cur.name()?;
        let n = cur.u32()? as usize;
        let m = cur.f64s(n)?;
        let v = cur.f64s(n)?;
        if moments.insert(name.clone(), (m, v)).is_some() {
            return Err(format_err(path, format!("duplicate moment entry {name}")));
        }
    }
    if cur.at != payload.len() {
        return Err(format_err(
            path,
            format!("{} unexpected trailing bytes", payload.len() - cur.at),
        ));
    }

    // Rebuild the model, then overwrite every tensor from the stored blobs.
    let mut model = DdnetModel::init(model_config.clone(), 0)?;
    let mut missing = Vec::new();
    let mut shape_errs = Vec::new();
    model.visit_params_mut(&mut |name, t| match params.remove(name) {
        Some(data) if data.len() == t.data().len() => t.data_mut().copy_from_slice(&data),
        Some(data) => shape_errs.push(format!(
            "{name}: {} elements stored, {} expected",
            data.len(),
            t.data().len()
        )),
        None => missing.push(name.to_string()),
    });
    if let Some(err) = shape_errs.first() {
        return Err(format_err(path, err.clone()));
    }
    if !missing.is_empty() {
        return Err(format_err(path, format!("missing parameters: {}", missing.join(", "))));
    }
    if let Some(extra) = params.keys().next() {
        return Err(format_err(path, format!("unknown parameter {extra}")));
    }
    for (name, (m, v)) in &moments {
        if m.len() != v.len() {
            return Err(format_err(path, format!("moment length mismatch for {name}")));
        }
    }

    let mut opt = AdamW::new(&train_config);
    opt.restore(step, moments);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    Ok(Checkpoint {
        state: TrainState { model, opt, rng, epochs_done },
        model_config,
        train_config,
    })
}
