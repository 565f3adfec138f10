//! `VITC` checkpoints: magic, u32 header length, a JSON header holding the
//! configuration and a tensor manifest, then little-endian f64 payload in
//! manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, ViTConfig, ViTError, ViTParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VITC";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ViTConfig,
    tensors: Vec<ManifestEntry>,
}

pub fn save_checkpoint(cfg: &ViTConfig, params: &ViTParams) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let mut offset = 0;
    let tensors = ViTParams::layout(cfg)
        .into_iter()
        .map(|(name, (r, c))| {
            let entry = ManifestEntry {
                name,
                shape: [r, c],
                offset,
            };
            offset += r * c * 8;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: *cfg, tensors })
        .map_err(|e| ViTError::ManifestMismatch(e.to_string()))?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| ViTError::ManifestMismatch("header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<(ViTConfig, ViTParams)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ViTError::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(ViTError::ManifestMismatch("header length truncated".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| ViTError::ManifestMismatch("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| ViTError::ManifestMismatch(format!("unreadable header: {e}")))?;
    let cfg = header.config;
    cfg.validate()?;

    let layout = ViTParams::layout(&cfg);
    if layout.len() != header.tensors.len() {
        return Err(ViTError::ManifestMismatch(format!(
            "manifest lists {} tensors, config implies {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let mut expected_offset = 0;
    for ((name, shape), entry) in layout.iter().zip(&header.tensors) {
        if &entry.name != name {
            return Err(ViTError::ManifestMismatch(format!(
                "expected tensor {name}, found {}",
                entry.name
            )));
        }
        let found = (entry.shape[0], entry.shape[1]);
        if found != *shape {
            return Err(ViTError::ShapeMismatch {
                name: name.clone(),
                expected: *shape,
                found,
            });
        }
        if entry.offset != expected_offset {
            return Err(ViTError::ManifestMismatch(format!(
                "tensor {name} at offset {}, expected {expected_offset}",
                entry.offset
            )));
        }
        expected_offset += shape.0 * shape.1 * 8;
    }
    let payload = &bytes[header_end..];
    if payload.len() != expected_offset {
        return Err(ViTError::ManifestMismatch(format!(
            "payload has {} bytes, manifest needs {expected_offset}",
            payload.len()
        )));
    }

    let mut params = ViTParams::zeros(&cfg);
    let mut cursor = 0;
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = f64::from_le_bytes(payload[cursor..cursor + 8].try_into().expect("8 bytes"));
            cursor += 8;
        }
    }
    Ok((cfg, params))
}

pub fn save_checkpoint_file(cfg: &ViTConfig, params: &ViTParams, path: &Path) -> Result<()> {
    fs::write(path, save_checkpoint(cfg, params)?)?;
    Ok(())
}

pub fn load_checkpoint_file(path: &Path) -> Result<(ViTConfig, ViTParams)> {
    load_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_of(bytes: &[u8]) -> (usize, serde_json::Value) {
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        (len, serde_json::from_slice(&bytes[8..8 + len]).unwrap())
    }

    fn with_header(bytes: &[u8], header: &serde_json::Value) -> Vec<u8> {
        let (len, _) = header_of(bytes);
        let h = serde_json::to_vec(header).unwrap();
        let mut out = b"VITC".to_vec();
        out.extend_from_slice(&(h.len() as u32).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&bytes[8 + len..]);
        out
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ViTConfig::toy();
        let params = ViTParams::init(&cfg, 21);
        let bytes = save_checkpoint(&cfg, &params).unwrap();
        let (c2, p2) = load_checkpoint(&bytes).unwrap();
        assert_eq!(c2, cfg);
        for (a, b) in params.tensors().iter().zip(p2.tensors()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn wrong_shape_names_the_tensor() {
        let cfg = ViTConfig::toy();
        let bytes = save_checkpoint(&cfg, &ViTParams::init(&cfg, 1)).unwrap();
        let (_, mut header) = header_of(&bytes);
        header["tensors"][5]["shape"] = serde_json::json!([3, 3]);
        let err = load_checkpoint(&with_header(&bytes, &header)).unwrap_err();
        match err {
            ViTError::ShapeMismatch { name, .. } => assert_eq!(name, "layers.0.heads.0.u_q"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_manifest_mismatch() {
        let cfg = ViTConfig::toy();
        let bytes = save_checkpoint(&cfg, &ViTParams::init(&cfg, 1)).unwrap();
        assert!(matches!(
            load_checkpoint(&bytes[..bytes.len() - 8]),
            Err(ViTError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn bad_magic_and_renamed_tensor() {
        let cfg = ViTConfig::toy();
        let mut bytes = save_checkpoint(&cfg, &ViTParams::init(&cfg, 1)).unwrap();
        let (_, mut header) = header_of(&bytes);
        header["tensors"][0]["name"] = serde_json::json!("embedding");
        assert!(matches!(
            load_checkpoint(&with_header(&bytes, &header)),
            Err(ViTError::ManifestMismatch(_))
        ));
        bytes[3] = b'X';
        assert!(matches!(load_checkpoint(&bytes), Err(ViTError::BadMagic)));
    }
}
