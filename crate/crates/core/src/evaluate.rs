//! Per-episode scoring of pipeline outputs against their source episodes,
//! and the aggregation that turns rows into a report.
//!
//! Every score is computed from the generated frames alone (poses are
//! re-extracted, grasp phases re-detected from pixels), so the numbers mean
//! the same thing for ground-truth and generated videos.

use serde::{Deserialize, Serialize};

use crate::corpus::skeleton::{self, PoseSequence, WRIST};
use crate::corpus::{Episode, GRASP_TAU_FACTOR};
use crate::metrics::{self, HmdaMode, DEFAULT_MOTION_EPS};
use crate::motion;
use crate::planner::ConditioningBundle;
use crate::posectrl::{run_pipeline, PipelineArtifacts, PipelineModels};
use crate::{Result, Scalar};

/// One evaluated episode. Metrics that cannot be computed (undetectable
/// grasp phase, no retained motion pairs, ...) are `None`, never faked.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeScores {
    pub episode_id: String,
    /// Grasping pose variance of the coarse video's extracted poses.
    pub gpv_coarse: Option<f64>,
    /// Grasping pose variance of the fine video's extracted poses.
    pub gpv_fine: Option<f64>,
    /// Grasp-type classification error rate on the fine video.
    pub gtce: Option<f64>,
    /// Hand movement direction accuracy (degrees) of fine vs ground truth.
    pub hmda: Option<f64>,
    /// Did the instructed object move in the fine video?
    pub grounding: bool,
    /// Fraction of refined-pose keypoints the fine video reproduces.
    pub adherence: Option<f64>,
    /// Distance of the refined pose's final wrist from ground truth.
    pub wrist_endpoint_err: f64,
}

/// Runs the full pipeline on one episode's conditioning and scores the
/// outputs against that episode. Returns the artifacts too so callers can
/// reuse the generated videos (distribution distances, inspection).
pub fn score_episode<T: Scalar>(
    models: &PipelineModels<'_, T>,
    episode: &Episode,
    n_rv: usize,
    master_seed: u64,
) -> Result<(EpisodeScores, PipelineArtifacts)> {
    let cfg = models.cfg;
    let cond = ConditioningBundle::for_episode(episode);
    let art = run_pipeline(
        models,
        &cond,
        n_rv,
        master_seed,
        Default::default(),
        None,
    )?;

    let (h, w) = (cfg.corpus.image_size, cfg.corpus.image_size);
    let tau = GRASP_TAU_FACTOR * cfg.corpus.object_radius;
    let color = episode.instruction.color;

    let phase_gpv = |frames: &ndarray::Array4<u8>| -> Result<(Option<f64>, PoseSequence, metrics::GraspPhase)> {
        let p = metrics::extract_pose_sequence(frames)?;
        let track = metrics::track_instructed_object(frames, color, &p)?;
        let phase = metrics::detect_grasp_phase(&p, &track, tau)?;
        let g = metrics::gpv(&p, &phase);
        Ok((g, p, phase))
    };
    let (gpv_coarse, _, _) = phase_gpv(&art.coarse.frames)?;
    let (gpv_fine, fine_pose, fine_phase) = phase_gpv(&art.fine.frames)?;

    let gtce = metrics::gtce(
        &fine_pose,
        episode.grasp_type,
        &skeleton::all_templates(),
        &fine_phase,
    )
    .map(|g| g.error_rate);

    let hmda = metrics::hmda(&fine_pose, &episode.poses, DEFAULT_MOTION_EPS, HmdaMode::Wrist)?;

    let grounding = metrics::grounding_correct(&art.fine.frames, &episode.instruction);

    let adherence =
        metrics::pose_adherence(&art.refined, &fine_pose, cfg.eval.adherence_px, h, w)?;

    // Spatial-awareness proxy: where the refined trajectory ends relative to
    // the annotated ground truth. Invalid entries are interpolated first so
    // the endpoint is always defined.
    let refined_filled = motion::interpolate_invalid(&art.refined);
    let last = episode.poses.len() - 1;
    let gt_wrist = [
        episode.poses.coords[[last, WRIST, 0]] as f64,
        episode.poses.coords[[last, WRIST, 1]] as f64,
    ];
    let rlast = refined_filled.len() - 1;
    let rf_wrist = [
        refined_filled.coords[[rlast, WRIST, 0]] as f64,
        refined_filled.coords[[rlast, WRIST, 1]] as f64,
    ];
    let wrist_endpoint_err =
        (rf_wrist[0] - gt_wrist[0]).hypot(rf_wrist[1] - gt_wrist[1]);

    Ok((
        EpisodeScores {
            episode_id: episode.episode_id.clone(),
            gpv_coarse,
            gpv_fine,
            gtce,
            hmda,
            grounding,
            adherence,
            wrist_endpoint_err,
        },
        art,
    ))
}

/// Means over the rows, with per-metric counts of how many rows contributed.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_episodes: usize,
    /// Episodes where both GPV values exist and the fine one is lower.
    pub gpv_improved: usize,
    /// Episodes where both GPV values exist.
    pub gpv_pairs: usize,
    pub mean_gpv_coarse: Option<f64>,
    pub mean_gpv_fine: Option<f64>,
    pub mean_gtce: Option<f64>,
    pub mean_hmda: Option<f64>,
    pub grounding_rate: f64,
    pub mean_adherence: Option<f64>,
    pub mean_wrist_endpoint_err: f64,
}

fn mean_present<'a>(it: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = it.filter_map(|v| *v).collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Aggregate per-episode rows. GPV means are computed over paired rows only
/// (both coarse and fine present), so the two means always describe the
/// same episodes.
pub fn aggregate(rows: &[EpisodeScores]) -> Aggregate {
    let mut agg = Aggregate {
        n_episodes: rows.len(),
        ..Default::default()
    };
    if rows.is_empty() {
        return agg;
    }
    let paired: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| Some((r.gpv_coarse?, r.gpv_fine?)))
        .collect();
    agg.gpv_pairs = paired.len();
    agg.gpv_improved = paired.iter().filter(|(c, f)| f < c).count();
    if !paired.is_empty() {
        agg.mean_gpv_coarse =
            Some(paired.iter().map(|(c, _)| c).sum::<f64>() / paired.len() as f64);
        agg.mean_gpv_fine =
            Some(paired.iter().map(|(_, f)| f).sum::<f64>() / paired.len() as f64);
    }
    agg.mean_gtce = mean_present(rows.iter().map(|r| &r.gtce));
    agg.mean_hmda = mean_present(rows.iter().map(|r| &r.hmda));
    agg.grounding_rate =
        rows.iter().filter(|r| r.grounding).count() as f64 / rows.len() as f64;
    agg.mean_adherence = mean_present(rows.iter().map(|r| &r.adherence));
    agg.mean_wrist_endpoint_err =
        rows.iter().map(|r| r.wrist_endpoint_err).sum::<f64>() / rows.len() as f64;
    agg
}

/// The evaluation report as written to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub master_seed: u64,
    pub n_rv: usize,
    pub split: String,
    pub rows: Vec<EpisodeScores>,
    pub aggregate: Aggregate,
    /// Feature-space distribution distance of coarse videos vs ground truth.
    pub fvd_coarse: Option<f64>,
    /// Feature-space distribution distance of fine videos vs ground truth.
    pub fvd_fine: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, c: Option<f64>, f: Option<f64>) -> EpisodeScores {
        EpisodeScores {
            episode_id: id.into(),
            gpv_coarse: c,
            gpv_fine: f,
            gtce: Some(0.5),
            hmda: None,
            grounding: id.len() % 2 == 0,
            adherence: Some(0.9),
            wrist_endpoint_err: 0.1,
        }
    }

    #[test]
    fn aggregate_pairs_gpv_and_averages_the_rest() {
        let rows = vec![
            row("aa", Some(2.0), Some(1.0)),
            row("b", Some(3.0), None),
            row("cc", None, Some(4.0)),
            row("d", Some(1.0), Some(5.0)),
        ];
        let a = aggregate(&rows);
        assert_eq!(a.n_episodes, 4);
        assert_eq!(a.gpv_pairs, 2);
        assert_eq!(a.gpv_improved, 1);
        assert_eq!(a.mean_gpv_coarse, Some(1.5));
        assert_eq!(a.mean_gpv_fine, Some(3.0));
        assert_eq!(a.mean_gtce, Some(0.5));
        assert_eq!(a.mean_hmda, None);
        assert!((a.grounding_rate - 0.5).abs() < 1e-12);
        assert!((a.mean_wrist_endpoint_err - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_rows_produce_an_empty_aggregate() {
        let a = aggregate(&[]);
        assert_eq!(a.n_episodes, 0);
        assert_eq!(a.mean_gpv_coarse, None);
        assert_eq!(a.grounding_rate, 0.0);
    }

    #[test]
    fn report_round_trips_through_json_with_the_row_fields() {
        let report = EvalReport {
            config_hash: "abc".into(),
            master_seed: 7,
            n_rv: 10,
            split: "test".into(),
            rows: vec![row("ep", Some(1.0), Some(0.5))],
            aggregate: aggregate(&[row("ep", Some(1.0), Some(0.5))]),
            fvd_coarse: Some(3.0),
            fvd_fine: Some(1.0),
        };
        let json = serde_json::to_string_pretty(&report).unwrap();
        for field in [
            "episode_id",
            "gpv_coarse",
            "gpv_fine",
            "gtce",
            "hmda",
            "grounding",
            "adherence",
            "wrist_endpoint_err",
        ] {
            assert!(json.contains(field), "{field} missing from report JSON");
        }
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.rows.len(), 1);
        assert_eq!(back.aggregate.gpv_pairs, 1);
    }
}
