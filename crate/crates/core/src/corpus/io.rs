//! Episode and dataset serialization.
//!
//! Episode directory layout:
//!   manifest.json  — canonical key order, format_version 1
//!   frames.bin     — raw u8, row-major [L][H][W][3]
//!   poses.bin      — little-endian f32, [L][N_h][2]
//!   objects.json   — per-frame object states and the frame rate
//!
//! Standalone pose artifacts use the same poses.bin layout plus a
//! validity.bin byte mask [L][N_h].

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::corpus::skeleton::{PoseSequence, N_KEYPOINTS};
use crate::corpus::{
    generate_episode, Action, CorpusConfig, DatasetIndex, Episode, GraspType, Instruction,
    SceneState,
};
use crate::rng;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EpisodeManifest {
    episode_id: String,
    instruction: [u32; 4],
    l: usize,
    h: usize,
    w: usize,
    n_h: usize,
    grasp_phase: [usize; 2],
    grasp_type: GraspType,
    seed: u64,
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct ObjectsFile {
    fps: f64,
    #[serde(flatten)]
    scene: SceneState,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_len(path: &Path, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::format(
            path,
            got.min(want) as u64,
            format!("expected {want} bytes, found {got}"),
        ));
    }
    Ok(())
}

/// Write an episode into `dir` (created if missing).
pub fn write_episode(e: &Episode, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let (l, h, w, _) = e.frames.dim();
    let manifest = EpisodeManifest {
        episode_id: e.episode_id.clone(),
        instruction: e.instruction.tokens(),
        l,
        h,
        w,
        n_h: N_KEYPOINTS,
        grasp_phase: e.grasp_phase,
        grasp_type: e.grasp_type,
        seed: e.seed,
        format_version: FORMAT_VERSION,
    };
    let manifest_json = serde_json::to_vec_pretty(&manifest)
        .map_err(|err| Error::format(dir.join("manifest.json"), 0, err.to_string()))?;
    write_file(&dir.join("manifest.json"), &manifest_json)?;

    let frame_bytes = e.frames.as_slice().expect("frames are contiguous");
    write_file(&dir.join("frames.bin"), frame_bytes)?;

    let mut pose_bytes = Vec::with_capacity(l * N_KEYPOINTS * 2 * 4);
    for v in e.poses.coords.iter() {
        pose_bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("poses.bin"), &pose_bytes)?;

    let objects = ObjectsFile { fps: e.fps, scene: e.objects.clone() };
    let objects_json = serde_json::to_vec_pretty(&objects)
        .map_err(|err| Error::format(dir.join("objects.json"), 0, err.to_string()))?;
    write_file(&dir.join("objects.json"), &objects_json)
}

/// Read an episode previously written by `write_episode`.
pub fn read_episode(dir: &Path) -> Result<Episode> {
    let manifest_path = dir.join("manifest.json");
    let manifest: EpisodeManifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| Error::format(&manifest_path, e.column() as u64, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            &manifest_path,
            0,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    if manifest.n_h != N_KEYPOINTS {
        return Err(Error::format(
            &manifest_path,
            0,
            format!("expected {N_KEYPOINTS} keypoints, manifest says {}", manifest.n_h),
        ));
    }
    let (l, h, w) = (manifest.l, manifest.h, manifest.w);

    let frames_path = dir.join("frames.bin");
    let frame_bytes = read_file(&frames_path)?;
    expect_len(&frames_path, frame_bytes.len(), l * h * w * 3)?;
    let frames = Array4::from_shape_vec((l, h, w, 3), frame_bytes)
        .map_err(|e| Error::format(&frames_path, 0, e.to_string()))?;

    let poses_path = dir.join("poses.bin");
    let pose_bytes = read_file(&poses_path)?;
    expect_len(&poses_path, pose_bytes.len(), l * N_KEYPOINTS * 2 * 4)?;
    let floats: Vec<f32> = pose_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let coords = Array3::from_shape_vec((l, N_KEYPOINTS, 2), floats)
        .map_err(|e| Error::format(&poses_path, 0, e.to_string()))?;

    let objects_path = dir.join("objects.json");
    let objects: ObjectsFile = serde_json::from_slice(&read_file(&objects_path)?)
        .map_err(|e| Error::format(&objects_path, e.column() as u64, e.to_string()))?;

    Ok(Episode {
        episode_id: manifest.episode_id,
        instruction: Instruction::from_tokens(manifest.instruction)?,
        frames,
        poses: PoseSequence::fully_valid(coords)?,
        objects: objects.scene,
        grasp_phase: manifest.grasp_phase,
        grasp_type: manifest.grasp_type,
        fps: objects.fps,
        seed: manifest.seed,
    })
}

/// Write a pose sequence as poses.bin + validity.bin into `dir`.
pub fn write_pose_files(p: &PoseSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(p.coords.len() * 4);
    for v in p.coords.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&dir.join("poses.bin"), &bytes)?;
    let mask: Vec<u8> = p.validity.iter().map(|&b| b as u8).collect();
    write_file(&dir.join("validity.bin"), &mask)
}

/// Read a pose sequence written by `write_pose_files`; the frame count is
/// implied by the file size.
pub fn read_pose_files(dir: &Path) -> Result<PoseSequence> {
    let poses_path = dir.join("poses.bin");
    let bytes = read_file(&poses_path)?;
    let frame_bytes = N_KEYPOINTS * 2 * 4;
    if bytes.is_empty() || bytes.len() % frame_bytes != 0 {
        return Err(Error::format(
            &poses_path,
            bytes.len() as u64,
            format!("length must be a positive multiple of {frame_bytes}"),
        ));
    }
    let l = bytes.len() / frame_bytes;
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let coords = Array3::from_shape_vec((l, N_KEYPOINTS, 2), floats)
        .map_err(|e| Error::format(&poses_path, 0, e.to_string()))?;

    let validity_path = dir.join("validity.bin");
    let mask = read_file(&validity_path)?;
    expect_len(&validity_path, mask.len(), l * N_KEYPOINTS)?;
    let validity = Array2::from_shape_vec((l, N_KEYPOINTS), mask.iter().map(|&b| b != 0).collect())
        .map_err(|e| Error::format(&validity_path, 0, e.to_string()))?;
    PoseSequence::new(coords, validity)
}

pub fn save_index(index: &DatasetIndex, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(index)
        .map_err(|e| Error::format(path, 0, e.to_string()))?;
    write_file(path, &json)
}

pub fn load_index(path: &Path) -> Result<DatasetIndex> {
    serde_json::from_slice(&read_file(path)?)
        .map_err(|e| Error::format(path, e.column() as u64, e.to_string()))
}

/// Generate `n` episodes under `out_dir` (one subdirectory each) using
/// per-episode seeds derived from `master_seed`. Episodes are generated in
/// parallel on up to `jobs` threads; results are identical for any thread
/// count. Returns (episode_id, relative path, action) for each episode.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    n: usize,
    master_seed: u64,
    out_dir: &Path,
    jobs: usize,
) -> Result<Vec<(String, String, Action)>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs = jobs.max(1).min(n);
    let mut results: Vec<Option<Result<(String, String, Action)>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks = results.chunks_mut(n.div_ceil(jobs));
        for (ci, chunk) in chunks.enumerate() {
            let start = ci * n.div_ceil(jobs);
            scope.spawn(move || {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let i = start + off;
                    let seed = rng::derive_index(master_seed, "episode", i as u64);
                    let out = generate_episode(cfg, seed).and_then(|e| {
                        let rel = e.episode_id.clone();
                        write_episode(&e, &out_dir.join(&rel))?;
                        Ok((e.episode_id.clone(), rel, e.instruction.action))
                    });
                    *slot = Some(out);
                }
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.expect("all episodes visited"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use tempfile::tempdir;

    #[test]
    fn episode_round_trips_bit_exactly() {
        let cfg = CorpusConfig::default();
        let e = generate_episode(&cfg, 7).unwrap();
        let dir = tempdir().unwrap();
        write_episode(&e, dir.path()).unwrap();
        let back = read_episode(dir.path()).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn truncated_frames_reports_format_error() {
        let cfg = CorpusConfig::default();
        let e = generate_episode(&cfg, 8).unwrap();
        let dir = tempdir().unwrap();
        write_episode(&e, dir.path()).unwrap();
        let frames = dir.path().join("frames.bin");
        let bytes = fs::read(&frames).unwrap();
        fs::write(&frames, &bytes[..bytes.len() - 10]).unwrap();
        match read_episode(dir.path()) {
            Err(Error::Format { file, reason, .. }) => {
                assert!(file.contains("frames.bin"));
                assert!(reason.contains("expected"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_key_order_is_insensitive_on_read() {
        let cfg = CorpusConfig::default();
        let e = generate_episode(&cfg, 9).unwrap();
        let dir = tempdir().unwrap();
        write_episode(&e, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        // Rebuild the object with keys in reverse order.
        let obj = v.as_object().unwrap();
        let mut reversed = serde_json::Map::new();
        for (k, val) in obj.iter().rev() {
            reversed.insert(k.clone(), val.clone());
        }
        fs::write(&path, serde_json::to_vec(&serde_json::Value::Object(reversed)).unwrap()).unwrap();
        let back = read_episode(dir.path()).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn manifest_keys_use_canonical_order_on_disk() {
        let cfg = CorpusConfig::default();
        let e = generate_episode(&cfg, 10).unwrap();
        let dir = tempdir().unwrap();
        write_episode(&e, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let expected = [
            "episode_id",
            "instruction",
            "\"l\"",
            "\"h\"",
            "\"w\"",
            "n_h",
            "grasp_phase",
            "grasp_type",
            "seed",
            "format_version",
        ];
        let mut last = 0;
        for key in expected {
            let pos = text[last..].find(key).unwrap_or_else(|| panic!("{key} out of order"));
            last += pos;
        }
    }

    #[test]
    fn pose_files_round_trip_with_validity() {
        let mut coords = Array3::<f32>::zeros((5, N_KEYPOINTS, 2));
        coords.fill(0.25);
        let mut validity = Array2::from_elem((5, N_KEYPOINTS), true);
        validity[[2, 7]] = false;
        let p = PoseSequence::new(coords, validity).unwrap();
        let dir = tempdir().unwrap();
        write_pose_files(&p, dir.path()).unwrap();
        let back = read_pose_files(dir.path()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn corpus_generation_is_parallel_deterministic() {
        let cfg = CorpusConfig::default();
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        let a = generate_corpus(&cfg, 6, 42, d1.path(), 1).unwrap();
        let b = generate_corpus(&cfg, 6, 42, d2.path(), 4).unwrap();
        assert_eq!(a, b);
        for (_, rel, _) in &a {
            let ea = read_episode(&d1.path().join(rel)).unwrap();
            let eb = read_episode(&d2.path().join(rel)).unwrap();
            assert_eq!(ea, eb);
        }
    }

    #[test]
    fn index_round_trips() {
        let entries = vec![
            ("x1".to_string(), "x1".to_string(), Action::Push),
            ("x2".to_string(), "x2".to_string(), Action::Pour),
        ];
        let idx = crate::corpus::build_split(entries, 0.02, 3, CorpusConfig::default()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("index.json");
        save_index(&idx, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
    }
}
