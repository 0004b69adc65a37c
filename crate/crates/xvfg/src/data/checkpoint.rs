//! Checkpoint files: named f64 tensors with explicit little-endian layout
//! and a trailing CRC32, so identical state produces identical bytes on any
//! platform.
//!
//! Layout: magic "XVFG", version u32, entry count u32, then per entry
//! name length u32 + UTF-8 bytes, dtype u8 (1 = f64), rank u8 (4),
//! four u32 dims (N,C,H,W), and the row-major payload as little-endian f64.
//! The final four bytes are the CRC32 (IEEE) of everything before them.

use indexmap::IndexMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XVFG";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

pub fn checkpoint_bytes<'a>(
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let entries: Vec<(&str, &Tensor)> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    let mut seen = std::collections::HashSet::new();
    for (name, tensor) in &entries {
        if !seen.insert(*name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.push(4u8);
        let s = tensor.shape();
        for dim in s.dims() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = checkpoint_bytes(entries)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<IndexMap<String, Tensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_checkpoint(&bytes)
        .map_err(|e| match e {
            Error::CheckpointIntegrity(msg) => {
                Error::CheckpointIntegrity(format!("{}: {msg}", path.display()))
            }
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<IndexMap<String, Tensor>> {
    if bytes.len() < 16 {
        return Err(Error::CheckpointIntegrity("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::CheckpointIntegrity(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > body.len() {
            return Err(Error::CheckpointIntegrity("unexpected end of data".into()));
        }
        let s = &body[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointIntegrity("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}; expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut map = IndexMap::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!("unsupported dtype code {dtype}")));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        if rank != 4 {
            return Err(Error::Checkpoint(format!("unsupported rank {rank}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let raw = take(&mut pos, 8 * shape.numel())?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), Tensor::new(shape, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
    }
    if pos != body.len() {
        return Err(Error::CheckpointIntegrity(format!(
            "{} trailing bytes after the last entry",
            body.len() - pos
        )));
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("xvfg_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_entries() -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        vec![
            (
                "gen.w".to_string(),
                Tensor::rand_uniform(Shape::new(4, 3, 3, 3), -1.0, 1.0, &mut rng),
            ),
            (
                "gen.b".to_string(),
                Tensor::rand_uniform(Shape::new(1, 4, 1, 1), -1.0, 1.0, &mut rng),
            ),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let entries = sample_entries();
        let path = temp_path("roundtrip.xvfg");
        save_checkpoint(&path, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), entries.len());
        for ((name, tensor), (lname, ltensor)) in entries.iter().zip(loaded.iter()) {
            assert_eq!(name, lname);
            assert!(tensor.bits_eq(ltensor));
        }
        let second =
            checkpoint_bytes(loaded.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn flipped_payload_byte_fails_crc() {
        let entries = sample_entries();
        let path = temp_path("corrupt.xvfg");
        save_checkpoint(&path, entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::CheckpointIntegrity(_)), "{err}");
        assert!(err.to_string().contains("CRC"));
    }

    #[test]
    fn empty_checkpoint_is_valid_and_minimal() {
        let path = temp_path("empty.xvfg");
        save_checkpoint(&path, std::iter::empty()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.is_empty());
        // magic + version + count + crc
        assert_eq!(std::fs::read(&path).unwrap().len(), 16);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let entries = sample_entries();
        let mut bytes =
            checkpoint_bytes(entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        bytes[0] = b'Y';
        // fix up the CRC so only the magic is wrong
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn duplicate_names_are_rejected_on_save() {
        let t = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let err = checkpoint_bytes([("a", &t), ("a", &t)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let entries = sample_entries();
        let mut bytes =
            checkpoint_bytes(entries.iter().map(|(n, t)| (n.as_str(), t))).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let body_len = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&crc.to_le_bytes());
        let err = parse_checkpoint(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
