//! Binary checkpoint: `SQLF`, u32 version, u32-prefixed JSON header, u32
//! tensor count, then per tensor u32-prefixed name, u32 rank, u64 dims and
//! raw f32 data. All integers and floats little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::InputStyle;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::numerics::Tensor;
use crate::tokenizer::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SQLF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TransformerModel<f32>,
    pub step: usize,
    pub val_lfacc: f64,
    /// Token list in id order, when the model was trained through the CLI.
    pub vocab: Option<Vocabulary>,
    pub style: Option<InputStyle>,
    /// Resolved run settings, kept verbatim.
    pub run_config: serde_json::Value,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model.config() == other.model.config()
            && self.model.named_tensors() == other.model.named_tensors()
            && self.step == other.step
            && self.val_lfacc.to_bits() == other.val_lfacc.to_bits()
            && self.vocab == other.vocab
            && self.style == other.style
            && self.run_config == other.run_config
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    step: usize,
    val_lfacc: f64,
    vocab: Option<Vec<String>>,
    style: Option<InputStyle>,
    #[serde(default)]
    run_config: serde_json::Value,
}

fn u32_len(n: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Invalid(format!("{what} too large for checkpoint")))
}

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ckpt.model.config().clone(),
        step: ckpt.step,
        val_lfacc: ckpt.val_lfacc,
        vocab: ckpt.vocab.as_ref().map(|v| v.tokens().to_vec()),
        style: ckpt.style,
        run_config: ckpt.run_config.clone(),
    };
    let blob = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let tensors = ckpt.model.named_tensors();
    let mut out = Vec::with_capacity(16 + blob.len() + 4 * ckpt.model.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(blob.len(), "header")?);
    out.extend_from_slice(&blob);
    out.extend_from_slice(&u32_len(tensors.len(), "tensor count")?);
    for (name, t) in &tensors {
        out.extend_from_slice(&u32_len(name.len(), "tensor name")?);
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.rank(), "rank")?);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes through a temporary file in the target directory, so a failed
/// save leaves no partial checkpoint behind.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let blob_len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(blob_len, "header")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("tensor dims")?).map_err(|_| Error::CorruptCheckpoint("dimension overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("tensor '{name}' is too large")))?;
        let data = r
            .take(numel, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("tensor '{name}': {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let model = TransformerModel::from_named(header.model, tensors)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let vocab = header
        .vocab
        .map(|tokens| Vocabulary::from_text(&(tokens.join("\n") + "\n")))
        .transpose()
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok(Checkpoint {
        model,
        step: header.step,
        val_lfacc: header.val_lfacc,
        vocab,
        style: header.style,
        run_config: header.run_config,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&buf)
}
