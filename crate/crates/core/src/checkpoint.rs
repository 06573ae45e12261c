//! Checkpoint container: a JSON header describing the parameter table
//! followed by raw little-endian f32 payloads in header order.
//!
//! Layout on disk:
//!
//! ```text
//! [u32 LE header length n] [n bytes of JSON header] [f32 LE data, blob after blob]
//! ```
//!
//! The header pins everything needed to refuse a wrong file early: a format
//! version, the model kind, the hash of the configuration that trained it,
//! the diffusion schedule, the training step, and the name/shape table.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::hex;
use crate::diffusion::ScheduleConfig;
use crate::nn::ParamStore;
use crate::{Error, Result, Scalar};

pub const FORMAT_VERSION: u32 = 1;

/// Which stage a checkpoint belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Planner,
    Motion,
    PoseCtrl,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Planner => "planner",
            ModelKind::Motion => "motion",
            ModelKind::PoseCtrl => "pose_ctrl",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    /// Content hash of the full pipeline configuration this model was
    /// trained under.
    pub config_hash: String,
    pub schedule: ScheduleConfig,
    /// Optimizer steps completed.
    pub step: usize,
    pub blobs: Vec<BlobEntry>,
}

/// Writes `store` to `path`. Blob order is the store's registration order.
pub fn save<T: Scalar>(
    path: &Path,
    kind: ModelKind,
    config_hash: &str,
    schedule: ScheduleConfig,
    step: usize,
    store: &ParamStore<T>,
) -> Result<()> {
    let blobs = store.to_blobs();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind,
        config_hash: config_hash.to_string(),
        schedule,
        step,
        blobs: blobs
            .iter()
            .map(|(name, shape, _)| BlobEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::contract(format!("checkpoint header serialization: {e}")))?;
    let header_len = u32::try_from(header_json.len())
        .map_err(|_| Error::contract("checkpoint header exceeds u32 length"))?;

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(&header_len.to_le_bytes()).map_err(io)?;
    w.write_all(&header_json).map_err(io)?;
    for (_, _, data) in &blobs {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads header and payload; does not touch any store.
pub fn load(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Vec<usize>, Vec<f32>)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);

    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::format(path, 0, "truncated header length"))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;

    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)
        .map_err(|_| Error::format(path, 4, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| Error::format(path, 4, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointMismatch {
            what: "format version".into(),
            expected: FORMAT_VERSION.to_string(),
            found: header.format_version.to_string(),
        });
    }

    let mut offset = 4 + header_len as u64;
    let mut blobs = Vec::with_capacity(header.blobs.len());
    for entry in &header.blobs {
        let count: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::format(path, offset, format!("truncated payload for '{}'", entry.name))
        })?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += (count * 4) as u64;
        blobs.push((entry.name.clone(), entry.shape.clone(), data));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, offset, "trailing bytes after payload"));
    }
    Ok((header, blobs))
}

/// Loads a checkpoint into `store`, insisting it is the expected kind and
/// (unless `expected_config_hash` is `None`) was trained under the expected
/// configuration.
pub fn load_into<T: Scalar>(
    path: &Path,
    expected_kind: ModelKind,
    expected_config_hash: Option<&str>,
    store: &mut ParamStore<T>,
) -> Result<CheckpointHeader> {
    let (header, blobs) = load(path)?;
    if header.kind != expected_kind {
        return Err(Error::CheckpointMismatch {
            what: "model kind".into(),
            expected: expected_kind.to_string(),
            found: header.kind.to_string(),
        });
    }
    if let Some(want) = expected_config_hash {
        if header.config_hash != want {
            return Err(Error::CheckpointMismatch {
                what: "config hash".into(),
                expected: want.to_string(),
                found: header.config_hash.clone(),
            });
        }
    }
    store.load_blobs(&blobs)?;
    Ok(header)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut h = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = r.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(names: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
        let mut ps = ParamStore::new();
        let mut r = crate::rng::seeded(seed);
        for (name, shape) in names {
            ps.insert(name, crate::rng::normal_arr(&mut r, shape));
        }
        ps
    }

    #[test]
    fn save_load_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = store_with(&[("a.w", &[3, 4]), ("b.w", &[2])], 7);
        save(&path, ModelKind::Motion, "deadbeef", ScheduleConfig::default(), 42, &ps).unwrap();

        let mut back = store_with(&[("a.w", &[3, 4]), ("b.w", &[2])], 8);
        let header = load_into(&path, ModelKind::Motion, Some("deadbeef"), &mut back).unwrap();
        assert_eq!(header.step, 42);
        // Values pass through f32, so compare at f32 resolution.
        let (_, delta) = ps.max_abs_diff(&back);
        assert!(delta < 1e-6, "round trip delta {delta}");
    }

    #[test]
    fn wrong_kind_and_wrong_hash_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = store_with(&[("a.w", &[2, 2])], 1);
        save(&path, ModelKind::Planner, "cafe", ScheduleConfig::default(), 0, &ps).unwrap();

        let mut back = store_with(&[("a.w", &[2, 2])], 2);
        let kind_err = load_into(&path, ModelKind::Motion, None, &mut back).unwrap_err();
        assert!(matches!(kind_err, Error::CheckpointMismatch { .. }), "{kind_err}");
        let hash_err = load_into(&path, ModelKind::Planner, Some("beef"), &mut back).unwrap_err();
        assert!(matches!(hash_err, Error::CheckpointMismatch { .. }), "{hash_err}");
        // And the permissive path still works.
        load_into(&path, ModelKind::Planner, None, &mut back).unwrap();
    }

    #[test]
    fn mismatched_table_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = store_with(&[("a.w", &[2, 2])], 1);
        save(&path, ModelKind::Planner, "cafe", ScheduleConfig::default(), 0, &ps).unwrap();

        let mut wrong_shape = store_with(&[("a.w", &[4])], 2);
        assert!(load_into(&path, ModelKind::Planner, None, &mut wrong_shape).is_err());
        let mut wrong_name = store_with(&[("a.b", &[2, 2])], 2);
        assert!(load_into(&path, ModelKind::Planner, None, &mut wrong_name).is_err());
    }

    #[test]
    fn truncated_file_is_reported_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ps = store_with(&[("a.w", &[8, 8])], 1);
        save(&path, ModelKind::Planner, "cafe", ScheduleConfig::default(), 0, &ps).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = load(&path).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("x1.ckpt"), dir.path().join("x2.ckpt"));
        let ps = store_with(&[("a.w", &[5, 5]), ("z", &[3])], 3);
        save(&p1, ModelKind::PoseCtrl, "00", ScheduleConfig::default(), 9, &ps).unwrap();
        save(&p2, ModelKind::PoseCtrl, "00", ScheduleConfig::default(), 9, &ps).unwrap();
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
