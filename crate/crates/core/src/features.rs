//! Binary feature files, so precomputed backbone outputs can replace the
//! synthetic encoder.
//!
//! Layout, little-endian: `COLAFEAT`, `u32` version, `u32` count, then per
//! record a `u32`-prefixed UTF-8 id, `u32` p, `u32` n_tokens, `u32` d, and
//! f32 blocks for patches (p·d), tokens (n_tokens·d), pooled image (d) and
//! pooled text (d).

use std::path::Path;

use bindlab_tensor::Tensor;

use crate::backbone::{row_mean, FeatureBundle, ImageFeatures, QueryFeatures};
use crate::{CoreError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"COLAFEAT";
pub const FEATURE_VERSION: u32 = 1;
const POOLED_TOLERANCE: f64 = 1e-6;

/// Shape summary of a parsed feature file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureFileInfo {
    pub count: usize,
    pub patches: Option<usize>,
    pub d_model: Option<usize>,
}

pub fn encode_feature_file(bundles: &[FeatureBundle]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(bundles.len(), "record count")?.to_le_bytes());
    for b in bundles {
        let (p, d) = b.image.patches.dims2()?;
        let (n, dt) = b.query.tokens.dims2()?;
        if dt != d || b.image.pooled.len() != d || b.query.pooled.len() != d {
            return Err(CoreError::Contract(format!("bundle {} mixes feature widths", b.id)));
        }
        out.extend_from_slice(&u32_of(b.id.len(), "id length")?.to_le_bytes());
        out.extend_from_slice(b.id.as_bytes());
        for dim in [p, n, d] {
            out.extend_from_slice(&u32_of(dim, "dimension")?.to_le_bytes());
        }
        // Pooled vectors are written as the mean of the stored (rounded)
        // rows, which is what decoding recomputes; re-encoding is then a
        // fixed point.
        let patches = rounded(b.image.patches.values());
        let tokens = rounded(b.query.tokens.values());
        let pooled_image = row_mean(&Tensor::from_vec(vec![p, d], patches.clone())?);
        let pooled_text = row_mean(&Tensor::from_vec(vec![n, d], tokens.clone())?);
        for block in [patches, tokens, pooled_image, pooled_text] {
            for v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn rounded(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(v as f32)).collect()
}

fn u32_of(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| CoreError::Contract(format!("{what} {n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> CoreError {
        CoreError::Format {
            offset: self.at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.fail(format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

fn check_pooled(at: usize, stored: &[f64], recomputed: &[f64], what: &str) -> Result<()> {
    let worst = stored
        .iter()
        .zip(recomputed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if !(worst <= POOLED_TOLERANCE) {
        return Err(CoreError::Format {
            offset: at as u64,
            message: format!("{what} differs from the mean of its rows by {worst:e}"),
        });
    }
    Ok(())
}

/// Parses a whole feature file; any defect fails the entire parse.
pub fn decode_feature_file(bytes: &[u8]) -> Result<Vec<FeatureBundle>> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(CoreError::Format {
            offset: 0,
            message: "bad magic, expected COLAFEAT".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(CoreError::Format {
            offset: 8,
            message: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = cur.u32("id length")? as usize;
        let id_at = cur.at;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|_| CoreError::Format {
                offset: id_at as u64,
                message: "id is not UTF-8".into(),
            })?
            .to_string();
        let dims_at = cur.at;
        let p = cur.u32("patch count")? as usize;
        let n = cur.u32("token count")? as usize;
        let d = cur.u32("width")? as usize;
        if p == 0 || n == 0 || d == 0 {
            return Err(CoreError::Format {
                offset: dims_at as u64,
                message: format!("record {id} has a zero dimension ({p}, {n}, {d})"),
            });
        }
        let patches = cur.f32s(p * d, "patch features")?;
        let tokens = cur.f32s(n * d, "token features")?;
        let pooled_at = cur.at;
        let pooled_image = cur.f32s(d, "pooled image")?;
        let pooled_text = cur.f32s(d, "pooled text")?;
        let patches = Tensor::from_vec(vec![p, d], patches)?;
        let tokens = Tensor::from_vec(vec![n, d], tokens)?;
        let image_mean = row_mean(&patches);
        let text_mean = row_mean(&tokens);
        check_pooled(pooled_at, &pooled_image, &image_mean, "pooled image")?;
        check_pooled(pooled_at + 4 * d, &pooled_text, &text_mean, "pooled text")?;
        out.push(FeatureBundle {
            id,
            image: ImageFeatures {
                patches,
                pooled: image_mean,
                inputs: None,
            },
            query: QueryFeatures {
                tokens,
                pooled: text_mean,
                token_ids: None,
            },
        });
    }
    if cur.at != bytes.len() {
        return Err(cur.fail(format!("{} trailing bytes", bytes.len() - cur.at)));
    }
    Ok(out)
}

pub fn write_feature_file(path: &Path, bundles: &[FeatureBundle]) -> Result<()> {
    crate::util::write_file(path, &encode_feature_file(bundles)?)
}

pub fn load_feature_file(path: &Path) -> Result<Vec<FeatureBundle>> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_feature_file(&bytes)
}

pub fn describe(bundles: &[FeatureBundle]) -> FeatureFileInfo {
    let first = bundles.first();
    FeatureFileInfo {
        count: bundles.len(),
        patches: first.map(|b| b.image.patches.shape()[0]),
        d_model: first.map(|b| b.image.patches.shape()[1]),
    }
}
