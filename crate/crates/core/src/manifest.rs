//! Run manifest: the persisted record of everything a pipeline run depends
//! on — seeds, config hash, checkpoint hashes, stage outputs — so a run can
//! be reproduced bit-for-bit and two runs can be compared.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// A checkpoint input to the run, pinned by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub sha256: String,
}

/// One pipeline stage: its derived seed and how long it took. Wall clock is
/// informational only and never participates in reproducibility checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub master_seed: u64,
    pub config_hash: String,
    /// Partial-refinement steps used by the middle stage.
    pub n_rv: usize,
    /// Stage name -> checkpoint used ("planner", "motion", "pose_ctrl").
    pub checkpoints: BTreeMap<String, CheckpointRef>,
    /// Stage name -> seed and timing ("coarse", "refine", "fine").
    pub stages: BTreeMap<String, StageRecord>,
    /// Output name -> content hash; these tags version every artifact the
    /// run wrote (videos, pose tracks, pose image stacks).
    pub artifacts: BTreeMap<String, String>,
    /// Metric name -> value, for whatever the run evaluated.
    pub metrics: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(master_seed: u64, config_hash: &str, n_rv: usize) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            master_seed,
            config_hash: config_hash.to_string(),
            n_rv,
            ..Default::default()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::contract(format!("manifest serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, 0, format!("bad manifest: {e}")))
    }

    /// Equality over everything that determines the run's outputs: seeds,
    /// hashes, metric values — but not wall-clock timings.
    pub fn reproducible_eq(&self, other: &RunManifest) -> bool {
        let strip = |m: &RunManifest| {
            let mut c = m.clone();
            for s in c.stages.values_mut() {
                s.wall_clock_secs = 0.0;
            }
            c
        };
        strip(self) == strip(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunManifest {
        let mut m = RunManifest::new(17, "abc123", 10);
        m.checkpoints.insert(
            "planner".into(),
            CheckpointRef { path: "ckpt/planner.ckpt".into(), sha256: "f00".into() },
        );
        m.stages.insert("coarse".into(), StageRecord { seed: 99, wall_clock_secs: 1.25 });
        m.artifacts.insert("video_fine".into(), "0011".into());
        m.metrics.insert("gpv_fine".into(), 0.125);
        m
    }

    #[test]
    fn round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        let m = sample();
        m.save(&path).unwrap();
        assert_eq!(RunManifest::load(&path).unwrap(), m);
    }

    #[test]
    fn comparison_ignores_timing_but_nothing_else() {
        let a = sample();
        let mut b = sample();
        b.stages.get_mut("coarse").unwrap().wall_clock_secs = 400.0;
        assert!(a.reproducible_eq(&b));

        let mut c = sample();
        c.stages.get_mut("coarse").unwrap().seed = 100;
        assert!(!a.reproducible_eq(&c));

        let mut d = sample();
        d.artifacts.insert("video_fine".into(), "0012".into());
        assert!(!a.reproducible_eq(&d));

        let mut e = sample();
        e.metrics.insert("gpv_fine".into(), 0.126);
        assert!(!a.reproducible_eq(&e));
    }
}
