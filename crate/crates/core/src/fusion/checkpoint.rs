//! Model checkpoints: `COLAMODL`, `u32` version, `u32`-prefixed JSON header
//! (fusion config, backbone config, vocabulary, metadata), then `u32` parameter count
//! and per parameter a `u32`-prefixed name, `u32` rank, `u32` dims and
//! little-endian f64 values in name order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use bindlab_tensor::{ParameterSet, Tensor};

use super::{FusionConfig, FusionModel};
use crate::backbone::BackboneConfig;
use crate::vocab::Vocabulary;
use crate::{CoreError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COLAMODL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    fusion: FusionConfig,
    backbone: BackboneConfig,
    vocabulary: Vocabulary,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let v = u32::try_from(n).map_err(|_| CoreError::Contract(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &FusionModel) -> Result<Vec<u8>> {
    let header = Header {
        fusion: model.config().clone(),
        backbone: model.backbone_config().clone(),
        vocabulary: model.vocab().clone(),
        metadata: model.metadata().clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::json("checkpoint header", e))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params().len())?;
    for (name, t) in model.params().iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> CoreError {
        CoreError::Format {
            offset: self.at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FusionModel> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            message: "bad magic, expected COLAMODL".into(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(CoreError::Format {
            offset: 8,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = r.u32("header length")?;
    let header_at = r.at;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| CoreError::Format {
        offset: header_at as u64,
        message: format!("bad header: {e}"),
    })?;
    let count = r.u32("parameter count")?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name_at = r.at;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| CoreError::Format {
                offset: name_at as u64,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.and_then(|l| l.checked_mul(8)).ok_or_else(|| r.fail("parameter size overflows"))?;
        let raw = r.take(len, "parameter values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(shape, values).map_err(|e| r.fail(e.to_string()))?;
        params.insert(&name, t).map_err(|e| r.fail(e.to_string()))?;
    }
    if r.at != bytes.len() {
        return Err(r.fail("trailing bytes after parameters"));
    }
    let mut model = FusionModel::from_parts(header.fusion, header.backbone, header.vocabulary, params)?;
    for (k, v) in header.metadata {
        model.set_metadata(&k, v);
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &FusionModel) -> Result<()> {
    crate::util::write_file(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_checkpoint(&bytes)
}
