//! Pose-consistency metrics and hand-pose statistics.
//!
//! Everything here is a pure function of pose sequences, object tracks, or
//! pixel frames: grasp-phase detection, grasping-pose variance (GPV), grasp
//! type classification error (GTCE), hand movement direction accuracy
//! (HMDA), palm-orientation / inter-finger / curvature statistics, a
//! feature-space video distribution distance, and the color tracker used to
//! score instruction grounding.

use ndarray::{Array2, Array3, Array4};

use crate::corpus::render::recover_keypoints;
use crate::corpus::skeleton::{
    PoseSequence, FINGER_ROOTS, FINGER_TIPS, MIDDLE_FINGER_MCP, N_JOINT_ANGLES, N_KEYPOINTS, WRIST,
};
use crate::corpus::{uniform_sample_indices, GraspType, Instruction, ObjectColor};
use crate::rng;
use crate::{Error, Result};

/// Grasp detection threshold as a multiple of the object radius, shared
/// with the corpus generator's feasibility checks.
pub const DEFAULT_GRASP_TAU_FACTOR: f64 = crate::corpus::GRASP_TAU_FACTOR;
/// Displacements shorter than this (normalized units) carry no usable
/// direction and are skipped by HMDA.
pub const DEFAULT_MOTION_EPS: f64 = 1e-3;

const SEG_EPS: f64 = 1e-9;

/// Per-frame joint-angle parameters derived from a pose sequence.
#[derive(Clone, Debug)]
pub struct JointAngles {
    /// [frames][N_JOINT_ANGLES] bending angles in radians, each in [0, π].
    pub bend: Array2<f64>,
    /// Marks entries whose keypoints were all valid and non-degenerate.
    pub present: Array2<bool>,
    /// Palm orientation per frame, degrees in [0, 360); None when the
    /// wrist or middle knuckle is unavailable.
    pub phi_deg: Vec<Option<f64>>,
}

fn unit(v: [f64; 2]) -> Option<[f64; 2]> {
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if n < SEG_EPS {
        None
    } else {
        Some([v[0] / n, v[1] / n])
    }
}

fn angle_between(u: [f64; 2], v: [f64; 2]) -> f64 {
    (u[0] * v[0] + u[1] * v[1]).clamp(-1.0, 1.0).acos()
}

/// Joint angles of a single frame given exact keypoint positions.
///
/// Returns the ten bending angles ([finger][joint], thumb first) and the
/// palm orientation in degrees. The palm orientation is the angle of the
/// palm normal — the hand's heading direction rotated a quarter turn — from
/// the +x axis of the frame plane, normalized to [0, 360).
pub fn angles_from_keypoints(
    kps: &[[f64; 2]; N_KEYPOINTS],
    valid: &[bool; N_KEYPOINTS],
) -> ([Option<f64>; N_JOINT_ANGLES], Option<f64>) {
    let mut bend = [None; N_JOINT_ANGLES];
    for finger in 0..5 {
        let root = FINGER_ROOTS[finger];
        for joint in 0..2 {
            let (i0, i1, i2) = (root + joint, root + joint + 1, root + joint + 2);
            if !(valid[i0] && valid[i1] && valid[i2]) {
                continue;
            }
            let u = unit([kps[i1][0] - kps[i0][0], kps[i1][1] - kps[i0][1]]);
            let v = unit([kps[i2][0] - kps[i1][0], kps[i2][1] - kps[i1][1]]);
            if let (Some(u), Some(v)) = (u, v) {
                bend[2 * finger + joint] = Some(angle_between(u, v));
            }
        }
    }
    let phi = if valid[WRIST] && valid[MIDDLE_FINGER_MCP] {
        let w = kps[WRIST];
        let m = kps[MIDDLE_FINGER_MCP];
        unit([m[0] - w[0], m[1] - w[1]])
            .map(|h| (h[1].atan2(h[0]).to_degrees() - 90.0).rem_euclid(360.0))
    } else {
        None
    };
    (bend, phi)
}

/// Bending angles and palm orientation for every frame of a pose sequence.
pub fn joint_angles(p: &PoseSequence) -> JointAngles {
    let l = p.len();
    let mut bend = Array2::<f64>::zeros((l, N_JOINT_ANGLES));
    let mut present = Array2::<bool>::from_elem((l, N_JOINT_ANGLES), false);
    let mut phi_deg = Vec::with_capacity(l);
    for f in 0..l {
        let mut kps = [[0.0; 2]; N_KEYPOINTS];
        let mut valid = [false; N_KEYPOINTS];
        for k in 0..N_KEYPOINTS {
            kps[k] = [p.coords[[f, k, 0]] as f64, p.coords[[f, k, 1]] as f64];
            valid[k] = p.validity[[f, k]];
        }
        let (row, phi) = angles_from_keypoints(&kps, &valid);
        for (d, v) in row.iter().enumerate() {
            if let Some(a) = v {
                bend[[f, d]] = *a;
                present[[f, d]] = true;
            }
        }
        phi_deg.push(phi);
    }
    JointAngles { bend, present, phi_deg }
}

/// Angles between the thumb–index and index–middle finger direction vectors
/// (root to tip), radians; one pair per frame.
pub fn inter_finger_angles(p: &PoseSequence) -> Vec<[Option<f64>; 2]> {
    let l = p.len();
    let mut out = Vec::with_capacity(l);
    for f in 0..l {
        let dir = |fi: usize| -> Option<[f64; 2]> {
            let (root, tip) = (FINGER_ROOTS[fi], FINGER_TIPS[fi]);
            let a = p.keypoint(f, root)?;
            let b = p.keypoint(f, tip)?;
            unit([b[0] - a[0], b[1] - a[1]])
        };
        let (t, i, m) = (dir(0), dir(1), dir(2));
        let ti = match (t, i) {
            (Some(u), Some(v)) => Some(angle_between(u, v)),
            _ => None,
        };
        let im = match (i, m) {
            (Some(u), Some(v)) => Some(angle_between(u, v)),
            _ => None,
        };
        out.push([ti, im]);
    }
    out
}

/// Quarter-turn bin of a palm orientation: [0,90) → 0 up to [270,360) → 3,
/// after normalizing the input modulo 360.
pub fn palm_orientation_bin(phi_deg: f64) -> usize {
    let phi = phi_deg.rem_euclid(360.0);
    ((phi / 90.0).floor() as usize).min(3)
}

/// Frames in which the hand is interacting with the tracked object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraspPhase {
    /// Sorted frame indices.
    pub frames: Vec<usize>,
}

impl GraspPhase {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// First and last detected frame, when anything was detected.
    pub fn span(&self) -> Option<[usize; 2]> {
        Some([*self.frames.first()?, *self.frames.last()?])
    }
}

/// Detect the interaction phase: frames where the closest valid fingertip is
/// within `tau` of the object center.
pub fn detect_grasp_phase(
    p: &PoseSequence,
    object_track: &[[f64; 2]],
    tau: f64,
) -> Result<GraspPhase> {
    if object_track.len() != p.len() {
        return Err(Error::contract(format!(
            "object track has {} frames, pose sequence {}",
            object_track.len(),
            p.len()
        )));
    }
    let mut frames = Vec::new();
    for (f, obj) in object_track.iter().enumerate() {
        let mut best = f64::INFINITY;
        for &tip in &FINGER_TIPS {
            if let Some(q) = p.keypoint(f, tip) {
                let d = ((q[0] - obj[0]).powi(2) + (q[1] - obj[1]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        if best < tau {
            frames.push(f);
        }
    }
    Ok(GraspPhase { frames })
}

/// Grasping pose variance: population variance of each joint-angle dimension
/// over the grasp-phase frames, averaged across dimensions.
///
/// Dimensions with fewer than two observed values are dropped from the
/// average; the metric is missing when the phase is shorter than two frames
/// or nothing is observable.
pub fn gpv(p: &PoseSequence, phase: &GraspPhase) -> Option<f64> {
    if phase.len() < 2 {
        return None;
    }
    let angles = joint_angles(p);
    let mut vars = Vec::new();
    for dim in 0..N_JOINT_ANGLES {
        let xs: Vec<f64> = phase
            .frames
            .iter()
            .filter(|&&f| angles.present[[f, dim]])
            .map(|&f| angles.bend[[f, dim]])
            .collect();
        if xs.len() < 2 {
            continue;
        }
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        vars.push(var);
    }
    if vars.is_empty() {
        None
    } else {
        Some(vars.iter().sum::<f64>() / vars.len() as f64)
    }
}

/// Outcome of grasp-type classification over the sampled phase frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gtce {
    /// Fraction of sampled frames classified as a different grasp type.
    pub error_rate: f64,
    /// Set when fewer than 8 phase frames were available and all were used.
    pub short: bool,
}

/// Grasp type classification error: nearest-template classification (in
/// joint-angle space, Euclidean over observed dimensions) of 8 uniformly
/// sampled grasp-phase frames against the annotated type.
pub fn gtce(
    generated: &PoseSequence,
    truth: GraspType,
    templates: &[(GraspType, [f64; N_JOINT_ANGLES])],
    phase: &GraspPhase,
) -> Option<Gtce> {
    if phase.is_empty() || templates.is_empty() {
        return None;
    }
    let picks: Vec<usize> = if phase.len() >= 8 {
        uniform_sample_indices(phase.len(), 8)
            .expect("phase length checked")
            .into_iter()
            .map(|i| phase.frames[i])
            .collect()
    } else {
        phase.frames.clone()
    };
    let short = phase.len() < 8;
    let angles = joint_angles(generated);
    let mut errors = 0usize;
    for &f in &picks {
        let mut best: Option<(f64, GraspType)> = None;
        let mut any_dim = false;
        for (kind, t) in templates {
            let mut d2 = 0.0;
            let mut n = 0usize;
            for dim in 0..N_JOINT_ANGLES {
                if angles.present[[f, dim]] {
                    let e = angles.bend[[f, dim]] - t[dim];
                    d2 += e * e;
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            any_dim = true;
            if best.is_none() || d2 < best.unwrap().0 {
                best = Some((d2, *kind));
            }
        }
        match best {
            Some((_, kind)) if any_dim => {
                if kind != truth {
                    errors += 1;
                }
            }
            // A frame with no observable angles cannot support the
            // annotated type; count it as a misclassification.
            _ => errors += 1,
        }
    }
    Some(Gtce { error_rate: errors as f64 / picks.len() as f64, short })
}

/// Which keypoints define the per-frame movement vector for HMDA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HmdaMode {
    /// Track the wrist only; robust to finger jitter.
    Wrist,
    /// Track every keypoint and average over all retained pairs.
    PerKeypoint,
}

/// Hand movement direction accuracy, degrees.
///
/// For each consecutive-frame pair, the displacement of the tracked
/// keypoint(s) is compared between the two sequences; pairs with an invalid
/// keypoint or a displacement shorter than `eps_motion` in either sequence
/// are skipped. Missing when no pair is retained.
pub fn hmda(
    gen: &PoseSequence,
    gt: &PoseSequence,
    eps_motion: f64,
    mode: HmdaMode,
) -> Result<Option<f64>> {
    if gen.len() != gt.len() {
        return Err(Error::contract(format!(
            "sequence lengths differ: {} vs {} (resample first)",
            gen.len(),
            gt.len()
        )));
    }
    let keys: Vec<usize> = match mode {
        HmdaMode::Wrist => vec![WRIST],
        HmdaMode::PerKeypoint => (0..N_KEYPOINTS).collect(),
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in 0..gen.len() - 1 {
        for &k in &keys {
            let disp = |p: &PoseSequence| -> Option<[f64; 2]> {
                let a = p.keypoint(t, k)?;
                let b = p.keypoint(t + 1, k)?;
                let v = [b[0] - a[0], b[1] - a[1]];
                if (v[0] * v[0] + v[1] * v[1]).sqrt() < eps_motion {
                    None
                } else {
                    Some(v)
                }
            };
            if let (Some(u), Some(v)) = (disp(gen), disp(gt)) {
                let nu = (u[0] * u[0] + u[1] * u[1]).sqrt();
                let nv = (v[0] * v[0] + v[1] * v[1]).sqrt();
                let c = ((u[0] * v[0] + u[1] * v[1]) / (nu * nv)).clamp(-1.0, 1.0);
                sum += c.acos().to_degrees();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { None } else { Some(sum / n as f64) })
}

/// Extract a pose sequence from rendered frames via the reserved keypoint
/// marker colors; missed keypoints are marked invalid.
pub fn extract_pose_sequence(frames: &Array4<u8>) -> Result<PoseSequence> {
    let (l, h, w, c) = frames.dim();
    if c != 3 || h < 2 || w < 2 {
        return Err(Error::contract("frames must be [L][H][W][3] with H, W >= 2"));
    }
    let mut coords = Array3::<f32>::zeros((l, N_KEYPOINTS, 2));
    let mut validity = Array2::<bool>::from_elem((l, N_KEYPOINTS), false);
    for f in 0..l {
        let frame = frames.index_axis(ndarray::Axis(0), f);
        let found = recover_keypoints(&frame);
        for (k, q) in found.iter().enumerate() {
            if let Some(q) = q {
                coords[[f, k, 0]] = (q[0] / (w - 1) as f64).clamp(0.0, 1.0) as f32;
                coords[[f, k, 1]] = (q[1] / (h - 1) as f64).clamp(0.0, 1.0) as f32;
                validity[[f, k]] = true;
            }
        }
    }
    PoseSequence::new(coords, validity)
}

/// Fraction of the reference sequence's valid keypoints that the observed
/// sequence recovers within `tol_px` pixels (valid at the same frame and
/// keypoint, Euclidean pixel distance at the given raster size). `None` when
/// the reference has no valid keypoints.
pub fn pose_adherence(
    reference: &PoseSequence,
    observed: &PoseSequence,
    tol_px: f64,
    h: usize,
    w: usize,
) -> Result<Option<f64>> {
    if reference.len() != observed.len() {
        return Err(Error::contract(format!(
            "sequence lengths differ: {} vs {}",
            reference.len(),
            observed.len()
        )));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for f in 0..reference.len() {
        for k in 0..N_KEYPOINTS {
            let Some(r) = reference.keypoint(f, k) else {
                continue;
            };
            total += 1;
            if let Some(o) = observed.keypoint(f, k) {
                let dx = (r[0] - o[0]) * (w - 1) as f64;
                let dy = (r[1] - o[1]) * (h - 1) as f64;
                if dx.hypot(dy) <= tol_px {
                    hit += 1;
                }
            }
        }
    }
    Ok(if total == 0 {
        None
    } else {
        Some(hit as f64 / total as f64)
    })
}

// ---------------------------------------------------------------------------
// Feature-space video distribution distance
// ---------------------------------------------------------------------------

/// Feature dimensionality of the random-projection video embedding.
pub const FEATURE_DIM: usize = 16;
/// Seed of the fixed projection; shared by every caller so distances are
/// comparable across runs.
pub const FEATURE_PROJECTION_SEED: u64 = 0x00f0_0d5e;

/// Squared Fréchet (2-Wasserstein) distance between two Gaussians given as
/// mean vectors and covariance matrices.
pub fn frechet_gaussian(
    mu_a: &[f64],
    cov_a: &Array2<f64>,
    mu_b: &[f64],
    cov_b: &Array2<f64>,
) -> f64 {
    let d = mu_a.len();
    assert_eq!(mu_b.len(), d);
    assert_eq!(cov_a.dim(), (d, d));
    assert_eq!(cov_b.dim(), (d, d));
    let to_na = |m: &Array2<f64>| {
        nalgebra::DMatrix::from_fn(d, d, |r, c| m[[r, c]])
    };
    let a = to_na(cov_a);
    let b = to_na(cov_b);
    // tr((Σa Σb)^1/2) computed symmetrically as tr((√Σa Σb √Σa)^1/2).
    let sqrt_psd = |m: &nalgebra::DMatrix<f64>| {
        let eig = m.clone().symmetric_eigen();
        let vals = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
        &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
    };
    let ra = sqrt_psd(&a);
    let inner = sqrt_psd(&(&ra * &b * &ra));
    let mean_term: f64 = mu_a
        .iter()
        .zip(mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let dist = mean_term + a.trace() + b.trace() - 2.0 * inner.trace();
    dist.max(0.0)
}

fn video_features(v: &Array4<u8>, projection: &Array2<f64>) -> Vec<f64> {
    let flat: Vec<f64> = v.iter().map(|&x| x as f64 / 255.0 - 0.5).collect();
    (0..FEATURE_DIM)
        .map(|r| {
            flat.iter()
                .enumerate()
                .map(|(i, x)| projection[[r, i]] * x)
                .sum()
        })
        .collect()
}

fn fit_gaussian(features: &[Vec<f64>]) -> (Vec<f64>, Array2<f64>) {
    let n = features.len() as f64;
    let d = FEATURE_DIM;
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut cov = Array2::<f64>::zeros((d, d));
    for f in features {
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += (f[i] - mu[i]) * (f[j] - mu[j]) / n;
            }
        }
    }
    (mu, cov)
}

/// Distribution distance between two sets of videos: each video is embedded
/// with a fixed seeded random projection of its spatiotemporal volume, a
/// Gaussian is fitted to each set (population moments), and the squared
/// Fréchet distance between the Gaussians is returned.
pub fn feature_video_distance(set_a: &[Array4<u8>], set_b: &[Array4<u8>]) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = set_a[0].dim();
    for v in set_a.iter().chain(set_b.iter()) {
        if v.dim() != dim {
            return Err(Error::contract(format!(
                "all videos must share one shape; got {:?} and {:?}",
                dim,
                v.dim()
            )));
        }
    }
    let volume = dim.0 * dim.1 * dim.2 * dim.3;
    let mut r = rng::seeded(FEATURE_PROJECTION_SEED);
    let scale = 1.0 / (volume as f64).sqrt();
    let projection =
        Array2::from_shape_fn((FEATURE_DIM, volume), |_| rng::normal::<f64>(&mut r) * scale);

    let feats_a: Vec<Vec<f64>> = set_a.iter().map(|v| video_features(v, &projection)).collect();
    let feats_b: Vec<Vec<f64>> = set_b.iter().map(|v| video_features(v, &projection)).collect();
    let (mu_a, cov_a) = fit_gaussian(&feats_a);
    let (mu_b, cov_b) = fit_gaussian(&feats_b);
    Ok(frechet_gaussian(&mu_a, &cov_a, &mu_b, &cov_b))
}

// ---------------------------------------------------------------------------
// Instruction grounding via color tracking
// ---------------------------------------------------------------------------

/// A color-centroid displacement below this is considered "did not move".
pub const GROUNDING_MIN_MOVE: f64 = 0.08;
/// Pixels farther than this (L∞) from every reserved color are ignored.
const TRACK_MATCH_TOL: i16 = 60;

/// Identify which object color moved the most between the first and last
/// frame, with its displacement in normalized units.
///
/// Pixels are assigned to the nearest reserved color (background, hand,
/// object palette, keypoint markers); only the four object colors are
/// tracked, so hand and marker pixels cannot masquerade as objects. Pixels
/// of one color are grouped into 4-connected blobs, and a color's
/// displacement is the distance from its most-travelled last-frame blob to
/// the nearest first-frame blob — so a second, parked object of the same
/// color (scenes may repeat a color with a different shape) cannot wash out
/// the moving one the way a single pooled centroid would.
pub fn moved_object_color(frames: &Array4<u8>) -> Option<(ObjectColor, f64)> {
    let l = frames.dim().0;
    if l < 2 {
        return None;
    }
    let first = object_blob_centroids(frames, 0);
    let last = object_blob_centroids(frames, l - 1);
    let mut best: Option<(ObjectColor, f64)> = None;
    for (i, color) in ObjectColor::ALL.iter().enumerate() {
        if first[i].is_empty() || last[i].is_empty() {
            continue;
        }
        // A blob that stayed put sits next to its own first-frame twin; a
        // blob that moved is far from every first-frame blob of its color.
        let moved = last[i]
            .iter()
            .map(|b| {
                first[i]
                    .iter()
                    .map(|a| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max);
        if best.is_none() || moved > best.unwrap().1 {
            best = Some((*color, moved));
        }
    }
    best.filter(|(_, d)| *d >= GROUNDING_MIN_MOVE)
}

/// Per object color, the centroids of that color's 4-connected pixel blobs
/// in frame `f`, in normalized coordinates.
///
/// Pixels are assigned to the nearest reserved color (background, hand,
/// object palette, keypoint markers); only the four object colors produce
/// blobs, so hand and marker pixels cannot masquerade as objects.
fn object_blob_centroids(frames: &Array4<u8>, f: usize) -> [Vec<[f64; 2]>; 4] {
    let (_, h, w, _) = frames.dim();
    let mut reserved: Vec<[u8; 3]> = crate::corpus::render::scene_palette().to_vec();
    let n_scene = reserved.len();
    reserved.extend(crate::corpus::render::marker_colors());

    let mut slot_of = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let px = [frames[[f, y, x, 0]], frames[[f, y, x, 1]], frames[[f, y, x, 2]]];
            let mut best = (i16::MAX, usize::MAX);
            for (ci, c) in reserved.iter().enumerate() {
                let d = (0..3)
                    .map(|a| (px[a] as i16 - c[a] as i16).abs())
                    .max()
                    .unwrap();
                if d < best.0 {
                    best = (d, ci);
                }
            }
            // Scene palette layout: background, hand, then object colors.
            if best.0 <= TRACK_MATCH_TOL && (2..n_scene).contains(&best.1) {
                slot_of[y * w + x] = best.1 - 2;
            }
        }
    }
    let mut out: [Vec<[f64; 2]>; 4] = Default::default();
    let mut seen = vec![false; h * w];
    for start in 0..h * w {
        let s = slot_of[start];
        if s == usize::MAX || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0.0f64);
        while let Some(j) = stack.pop() {
            let (yj, xj) = (j / w, j % w);
            sx += xj as f64 / (w - 1) as f64;
            sy += yj as f64 / (h - 1) as f64;
            n += 1.0;
            let mut push = |jj: usize| {
                if !seen[jj] && slot_of[jj] == s {
                    seen[jj] = true;
                    stack.push(jj);
                }
            };
            if xj > 0 {
                push(j - 1);
            }
            if xj + 1 < w {
                push(j + 1);
            }
            if yj > 0 {
                push(j - w);
            }
            if yj + 1 < h {
                push(j + w);
            }
        }
        out[s].push([sx / n, sy / n]);
    }
    out
}

/// True when the color tracker says the instructed object is the one that
/// moved.
pub fn grounding_correct(frames: &Array4<u8>, instruction: &Instruction) -> bool {
    matches!(moved_object_color(frames), Some((c, _)) if c == instruction.color)
}

/// Per-frame position of the instructed-color object, for grasp detection on
/// videos that have no scene annotation: in each frame, the centroid of the
/// blob of that color closest to the hand's valid fingertips. Frames with no
/// such blob or no visible fingertip get a far-away placeholder, which can
/// never fall inside a grasp threshold.
pub fn track_instructed_object(
    frames: &Array4<u8>,
    color: ObjectColor,
    p: &PoseSequence,
) -> Result<Vec<[f64; 2]>> {
    let l = frames.dim().0;
    if l != p.len() {
        return Err(Error::contract(format!(
            "video has {l} frames, pose sequence {}",
            p.len()
        )));
    }
    let slot = ObjectColor::ALL
        .iter()
        .position(|c| *c == color)
        .expect("color is in the palette");
    let mut track = Vec::with_capacity(l);
    for f in 0..l {
        let blobs = &object_blob_centroids(frames, f)[slot];
        let tips: Vec<[f64; 2]> = FINGER_TIPS
            .iter()
            .filter_map(|&k| p.keypoint(f, k))
            .collect();
        let nearest = blobs
            .iter()
            .filter(|_| !tips.is_empty())
            .min_by(|a, b| {
                let da = tips.iter().map(|t| (t[0] - a[0]).hypot(t[1] - a[1])).fold(f64::INFINITY, f64::min);
                let db = tips.iter().map(|t| (t[0] - b[0]).hypot(t[1] - b[1])).fold(f64::INFINITY, f64::min);
                da.partial_cmp(&db).expect("finite distances")
            });
        track.push(nearest.copied().unwrap_or([f64::INFINITY; 2]));
    }
    Ok(track)
}

// ---------------------------------------------------------------------------
// Distribution statistics report
// ---------------------------------------------------------------------------

/// Fixed-width histogram over degrees.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Histogram {
    /// Bin edges; counts[i] covers [edges[i], edges[i+1]).
    pub edges_deg: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn new(lo: f64, hi: f64, bins: usize) -> Self {
        let step = (hi - lo) / bins as f64;
        Self {
            edges_deg: (0..=bins).map(|i| lo + step * i as f64).collect(),
            counts: vec![0; bins],
        }
    }

    fn add(&mut self, value_deg: f64) {
        let bins = self.counts.len();
        let lo = self.edges_deg[0];
        let hi = *self.edges_deg.last().unwrap();
        let step = (hi - lo) / bins as f64;
        let idx = (((value_deg - lo) / step).floor() as isize).clamp(0, bins as isize - 1);
        self.counts[idx as usize] += 1;
    }

    /// Index of the most populated bin.
    pub fn mode_bin(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// One episode's contribution to the statistics report.
#[derive(Clone, Debug)]
pub struct StatsItem {
    pub poses: PoseSequence,
    /// Inclusive annotated grasp interval.
    pub grasp: [usize; 2],
}

/// Dataset-level hand-pose distribution report.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StatsReport {
    pub n_episodes: usize,
    /// Palm-orientation samples drawn from annotated grasp frames.
    pub n_orientation_samples: usize,
    pub orientation_bin_count: [usize; 4],
    pub orientation_bin_proportion: [f64; 4],
    /// Reference palm-orientation percentages measured on a large real-world
    /// recording collection, shipped so reports can show the synthetic
    /// proportions next to a realistic baseline.
    pub reference_bin_percent: [f64; 4],
    /// Thumb–index and index–middle angle distributions, all frames.
    pub inter_finger_hist: [Histogram; 2],
    /// Middle-joint curvature distributions for thumb, index, middle.
    pub curvature_hist: [Histogram; 3],
}

/// Reference orientation-bin percentages for the report's baseline column.
pub const REFERENCE_BIN_PERCENT: [f64; 4] = [33.82, 47.7, 9.59, 8.89];

/// Aggregate palm-orientation, inter-finger-angle, and curvature statistics
/// over a set of episodes.
pub fn stats_report(items: &[StatsItem]) -> Result<StatsReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bin_count = [0usize; 4];
    let mut inter = [Histogram::new(0.0, 180.0, 18), Histogram::new(0.0, 180.0, 18)];
    let mut curv = [
        Histogram::new(0.0, 180.0, 18),
        Histogram::new(0.0, 180.0, 18),
        Histogram::new(0.0, 180.0, 18),
    ];
    let mut n_orientation = 0usize;
    for item in items {
        let angles = joint_angles(&item.poses);
        let [g0, g1] = item.grasp;
        for f in g0..=g1.min(item.poses.len() - 1) {
            if let Some(phi) = angles.phi_deg[f] {
                bin_count[palm_orientation_bin(phi)] += 1;
                n_orientation += 1;
            }
        }
        for f in 0..item.poses.len() {
            // Curvature: the middle-joint bend of thumb, index, middle.
            for (slot, finger) in [0usize, 1, 2].into_iter().enumerate() {
                let dim = 2 * finger;
                if angles.present[[f, dim]] {
                    curv[slot].add(angles.bend[[f, dim]].to_degrees());
                }
            }
        }
        for row in inter_finger_angles(&item.poses) {
            for (slot, v) in row.iter().enumerate() {
                if let Some(a) = v {
                    inter[slot].add(a.to_degrees());
                }
            }
        }
    }
    let total: usize = bin_count.iter().sum();
    let proportion = if total == 0 {
        [0.0; 4]
    } else {
        let mut p = [0.0; 4];
        for (i, c) in bin_count.iter().enumerate() {
            p[i] = *c as f64 / total as f64;
        }
        p
    };
    Ok(StatsReport {
        n_episodes: items.len(),
        n_orientation_samples: n_orientation,
        orientation_bin_count: bin_count,
        orientation_bin_proportion: proportion,
        reference_bin_percent: REFERENCE_BIN_PERCENT,
        inter_finger_hist: inter,
        curvature_hist: curv,
    })
}

/// Render the report's distributions as simple bar-chart PNGs in `dir`.
pub fn save_report_plots(report: &StatsReport, dir: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bar_chart = |counts: &[u64], path: &std::path::Path| -> Result<()> {
        let (w, h) = (360u32, 220u32);
        let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([250, 250, 250]));
        let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let n = counts.len() as u32;
        let plot_h = h - 30;
        let bar_w = (w - 20) / n;
        for (i, &c) in counts.iter().enumerate() {
            let bh = ((c as f64 / max) * (plot_h as f64 - 10.0)).round() as u32;
            let x0 = 10 + i as u32 * bar_w;
            for x in x0..x0 + bar_w.saturating_sub(2) {
                for y in plot_h - bh..plot_h {
                    img.put_pixel(x, y, image::Rgb([70, 110, 200]));
                }
            }
        }
        for x in 0..w {
            img.put_pixel(x, plot_h, image::Rgb([60, 60, 60]));
        }
        img.save(path).map_err(|e| {
            Error::format(path, 0, format!("png encode failed: {e}"))
        })
    };
    let orient: Vec<u64> = report.orientation_bin_count.iter().map(|&c| c as u64).collect();
    bar_chart(&orient, &dir.join("orientation_bins.png"))?;
    bar_chart(&report.inter_finger_hist[0].counts, &dir.join("inter_finger_thumb_index.png"))?;
    bar_chart(&report.inter_finger_hist[1].counts, &dir.join("inter_finger_index_middle.png"))?;
    for (name, hist) in ["thumb", "index", "middle"].iter().zip(&report.curvature_hist) {
        bar_chart(&hist.counts, &dir.join(format!("curvature_{name}.png")))?;
    }
    Ok(())
}
