//! Checkpoint files: spec, little-endian `f32` parameters, SHA-256 trailer.
//!
//! ```text
//! "EFFCRNCK" | version u32 | header_len u64 | header JSON
//!            | count u64   | count × f32    | sha256(everything before)
//! ```
//!
//! The header holds the [`ModelSpec`] and a free-form `meta` object.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::Model;
use super::variant::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 8] = b"EFFCRNCK";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn to_bytes(model: &Model<f32>, meta: &serde_json::Value) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        spec: model.spec().clone(),
        meta: meta.clone(),
    })
    .expect("header serializes");
    let count = model.num_params();
    let mut out =
        Vec::with_capacity(MAGIC.len() + 4 + 8 + header.len() + 8 + 4 * count + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for p in model.store().iter() {
        f32::to_le_bytes_vec(p.value.data(), &mut out);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or("file is truncated")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| "length field overflows".to_string())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<(Model<f32>, serde_json::Value), String> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err("not a checkpoint file".into());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err("checksum mismatch (file truncated or corrupt)".into());
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        ));
    }
    let header_len = r.u64()?;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| format!("bad header: {e}"))?;
    let count = r.u64()?;
    let mut model = Model::new(header.spec, 0).map_err(|e| format!("spec does not build: {e}"))?;
    if count != model.num_params() {
        return Err(format!(
            "blob holds {count} parameters, spec needs {}",
            model.num_params()
        ));
    }
    let blob = r.take(count.checked_mul(4).ok_or("length field overflows")?)?;
    if r.pos != body.len() {
        return Err("trailing bytes after parameter blob".into());
    }
    let mut values = Vec::with_capacity(model.store().len());
    let mut offset = 0;
    for p in model.store().iter() {
        let n = p.value.len();
        let data = blob[offset * 4..(offset + n) * 4]
            .chunks_exact(4)
            .map(f32::from_le_chunk)
            .collect();
        values.push(Tensor::from_vec(p.value.shape(), data).map_err(|e| e.to_string())?);
        offset += n;
    }
    model.set_values(values).map_err(|e| e.to_string())?;
    Ok((model, header.meta))
}

/// Decodes a checkpoint. Nothing is returned unless the whole file checks
/// out.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Model<f32>, serde_json::Value)> {
    parse(bytes).map_err(|reason| Error::Load {
        path: origin.to_path_buf(),
        reason,
    })
}

/// Writes through a temporary sibling and renames, so a crash never leaves
/// a half-written checkpoint under `path`.
pub fn save(path: &Path, model: &Model<f32>, meta: &serde_json::Value) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, to_bytes(model, meta))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model<f32>, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::variant::{Overrides, Variant};

    fn model() -> Model<f32> {
        Model::from_variant(&Variant::EffCrn23Lite, &Overrides::default(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let meta = serde_json::json!({"epoch": 3});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&path, &m, &meta).unwrap();
        let (back, meta2) = load(&path).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(back.spec(), m.spec());
        assert_eq!(back.num_params(), m.num_params());
        for (a, b) in back.store().iter().zip(m.store().iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let x = Tensor::full(&m.io_shape(1, 1).dims(), 0.3f32);
        let ya = m.forward_frame(&x, &mut m.zero_state(1)).unwrap();
        let yb = back.forward_frame(&x, &mut back.zero_state(1)).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn truncated_and_corrupt_files_fail() {
        let bytes = to_bytes(&model(), &serde_json::Value::Null);
        let p = Path::new("x.ckpt");
        for cut in [0, 7, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(from_bytes(&bytes[..cut], p), Err(Error::Load { .. })),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(from_bytes(&flipped, p), Err(Error::Load { .. })));
    }

    #[test]
    fn version_mismatch_fails() {
        let mut bytes = to_bytes(&model(), &serde_json::Value::Null);
        bytes[8] = 9;
        let n = bytes.len() - DIGEST_LEN;
        let digest = Sha256::digest(&bytes[..n]);
        bytes[n..].copy_from_slice(&digest);
        let err = from_bytes(&bytes, Path::new("v.ckpt")).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }
}
