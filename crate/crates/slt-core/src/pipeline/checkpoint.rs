//! Binary checkpoint container.
//!
//! Layout, all integers little-endian: magic `SLTC`, u32 version, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, one
//! u32 per dimension, and the values as f64. A u64-length-prefixed JSON
//! trailer carries everything that is not a tensor (configs, vocabularies,
//! stage provenance, frozen-parameter names). The final four bytes are a
//! CRC32 over all preceding bytes; nothing may follow it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ctc::GlossVocab;
use crate::error::{Error, Result};
use crate::mapper::MapperConfig;
use crate::numerics::{ParamStore, Tensor};
use crate::translation::{TextVocab, TranslationConfig};
use crate::visual::VisualEncoderConfig;

use super::PipelineModel;

const MAGIC: &[u8; 4] = b"SLTC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    visual: VisualEncoderConfig,
    translation: TranslationConfig,
    mapper: Option<MapperConfig>,
    gloss_labels: Option<Vec<String>>,
    src_tokens: Option<Vec<String>>,
    tgt_tokens: Option<Vec<String>>,
    lang: String,
    stages: Vec<String>,
    non_trainable: Vec<String>,
}

pub fn save_checkpoint(model: &PipelineModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    let count = u32::try_from(model.params.len())
        .map_err(|_| Error::InvalidArgument("too many tensors for checkpoint".to_string()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, param) in model.params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| {
            Error::InvalidArgument(format!("parameter name too long for checkpoint: {name}"))
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let shape = param.value.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::InvalidArgument(format!("tensor rank too large: {name}")))?;
        buf.push(rank);
        for &dim in shape {
            let dim = u32::try_from(dim).map_err(|_| {
                Error::InvalidArgument(format!("tensor dimension too large: {name}"))
            })?;
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let trailer = Trailer {
        visual: model.visual_cfg.clone(),
        translation: model.translation_cfg.clone(),
        mapper: model.mapper_cfg.clone(),
        gloss_labels: model.gloss_vocab.as_ref().map(|v| v.labels().to_vec()),
        src_tokens: model.src_vocab.as_ref().map(|v| v.tokens().to_vec()),
        tgt_tokens: model.tgt_vocab.as_ref().map(|v| v.tokens().to_vec()),
        lang: model.lang.clone(),
        stages: model.stages.clone(),
        non_trainable: model
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect(),
    };
    let trailer_bytes = serde_json::to_vec(&trailer)
        .map_err(|e| Error::InvalidArgument(format!("unserializable checkpoint trailer: {e}")))?;
    buf.extend_from_slice(&(trailer_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&trailer_bytes);

    buf.extend_from_slice(&crc32fast::hash(&buf).to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Sequential reader over the checkpoint bytes. Running out of bytes means
/// the file was cut short.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::CheckpointCorrupt(format!("file truncated at byte {}", self.buf.len()))
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
}

pub fn load_checkpoint(path: &Path) -> Result<PipelineModel> {
    let bytes =
        fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut r = Reader { buf: &bytes, pos: 0 };

    if r.take(4)? != MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::CheckpointCorrupt("tensor name is not UTF-8".to_string()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::CheckpointCorrupt(format!("tensor {name} overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| {
            Error::CheckpointCorrupt(format!("tensor {name} overflows"))
        })?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(shape, data)
            .map_err(|e| Error::CheckpointCorrupt(format!("tensor {name}: {e}")))?;
        params.insert(&name, value, true);
    }

    let trailer_len = usize::try_from(r.u64()?)
        .map_err(|_| Error::CheckpointCorrupt("trailer length overflows".to_string()))?;
    let trailer: Trailer = serde_json::from_slice(r.take(trailer_len)?)
        .map_err(|e| Error::CheckpointCorrupt(format!("bad trailer: {e}")))?;

    let body_end = r.pos;
    match bytes.len() - body_end {
        4 => {}
        0..=3 => {
            return Err(Error::CheckpointCorrupt(
                "file truncated before checksum".to_string(),
            ))
        }
        n => {
            return Err(Error::CheckpointFormat(format!(
                "{} unexpected bytes after checksum",
                n - 4
            )))
        }
    }
    let stored = u32::from_le_bytes(bytes[body_end..body_end + 4].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::CheckpointCorrupt("checksum mismatch".to_string()));
    }

    for name in &trailer.non_trainable {
        if let Ok(p) = params.get_mut(name) {
            p.trainable = false;
        }
    }
    let gloss_vocab = trailer
        .gloss_labels
        .map(GlossVocab::new)
        .transpose()
        .map_err(|e| Error::CheckpointCorrupt(format!("gloss vocabulary: {e}")))?;
    let src_vocab = trailer
        .src_tokens
        .map(TextVocab::from_tokens)
        .transpose()
        .map_err(|e| Error::CheckpointCorrupt(format!("source vocabulary: {e}")))?;
    let tgt_vocab = trailer
        .tgt_tokens
        .map(TextVocab::from_tokens)
        .transpose()
        .map_err(|e| Error::CheckpointCorrupt(format!("target vocabulary: {e}")))?;

    Ok(PipelineModel {
        params,
        visual_cfg: trailer.visual,
        translation_cfg: trailer.translation,
        mapper_cfg: trailer.mapper,
        gloss_vocab,
        src_vocab,
        tgt_vocab,
        lang: trailer.lang,
        stages: trailer.stages,
    })
}
