//! Hand skeleton: 21 keypoints in the MediaPipe hand topology, rigid 2-D
//! forward kinematics, and the grasp-type joint-angle templates.
//!
//! The skeleton lives in normalized frame coordinates (x right, y down, both
//! in [0,1]). A pose is (wrist position, heading angle, per-finger bend
//! angles); bone lengths are fixed so that every pair of keypoints stays at
//! least one pixel apart at the default 32×32 render resolution.

use ndarray::{Array2, Array3};

use crate::corpus::GraspType;
use crate::{Error, Result};

pub const N_KEYPOINTS: usize = 21;

pub const WRIST: usize = 0;
pub const THUMB_CMC: usize = 1;
pub const THUMB_MCP: usize = 2;
pub const THUMB_IP: usize = 3;
pub const THUMB_TIP: usize = 4;
pub const INDEX_FINGER_MCP: usize = 5;
pub const INDEX_FINGER_PIP: usize = 6;
pub const INDEX_FINGER_DIP: usize = 7;
pub const INDEX_FINGER_TIP: usize = 8;
pub const MIDDLE_FINGER_MCP: usize = 9;
pub const MIDDLE_FINGER_PIP: usize = 10;
pub const MIDDLE_FINGER_DIP: usize = 11;
pub const MIDDLE_FINGER_TIP: usize = 12;
pub const RING_FINGER_MCP: usize = 13;
pub const RING_FINGER_PIP: usize = 14;
pub const RING_FINGER_DIP: usize = 15;
pub const RING_FINGER_TIP: usize = 16;
pub const PINKY_MCP: usize = 17;
pub const PINKY_PIP: usize = 18;
pub const PINKY_DIP: usize = 19;
pub const PINKY_TIP: usize = 20;

/// Parent of each keypoint; the wrist is its own parent (root).
pub const PARENT: [usize; N_KEYPOINTS] = [
    0, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19,
];

/// First keypoint of each finger chain (thumb, index, middle, ring, pinky).
pub const FINGER_ROOTS: [usize; 5] = [
    THUMB_CMC,
    INDEX_FINGER_MCP,
    MIDDLE_FINGER_MCP,
    RING_FINGER_MCP,
    PINKY_MCP,
];

pub const FINGER_TIPS: [usize; 5] = [
    THUMB_TIP,
    INDEX_FINGER_TIP,
    MIDDLE_FINGER_TIP,
    RING_FINGER_TIP,
    PINKY_TIP,
];

/// Splay of each finger relative to the heading direction, degrees.
const FAN_DEG: [f64; 5] = [-65.0, -30.0, 0.0, 30.0, 62.0];
/// Wrist-to-knuckle bone length per finger, normalized units.
const ROOT_LEN: [f64; 5] = [0.075, 0.090, 0.095, 0.090, 0.078];
/// Lengths of the three distal segments of every finger.
const SEG_LEN: [f64; 3] = [0.055, 0.050, 0.050];
/// Bend direction: the thumb folds toward the fingers, fingers toward the thumb.
const CURL_SIGN: [f64; 5] = [1.0, -1.0, -1.0, -1.0, -1.0];

/// Number of bend angles (two per finger: at the middle and distal joints).
pub const N_JOINT_ANGLES: usize = 10;

/// Joint-angle template (radians) that defines each grasp type. Entries are
/// [finger][joint] flattened in finger order, matching `joint_angles`.
///
/// Curl depths are capped so that every finger's chain stays in its own
/// angular sector at every intermediate blend — in 2-D there is no depth
/// axis to disambiguate crossing fingers, and keypoint markers must never
/// share a pixel.
pub fn grasp_template(g: GraspType) -> [f64; N_JOINT_ANGLES] {
    match g {
        // Thumb and index close toward each other, the rest fold away.
        GraspType::Pinch => [0.40, 0.25, 0.35, 0.20, 0.75, 0.50, 0.75, 0.50, 0.75, 0.50],
        // All four fingers curl evenly over the object, thumb braces lightly.
        GraspType::Wrap => [0.18, 0.10, 0.55, 0.35, 0.55, 0.35, 0.55, 0.35, 0.55, 0.35],
        // Nearly straight hand, used for pushing contact.
        GraspType::Flat => [0.10, 0.05, 0.10, 0.05, 0.10, 0.05, 0.10, 0.05, 0.10, 0.05],
    }
}

/// All templates in enum order, for nearest-template classification.
pub fn all_templates() -> Vec<(GraspType, [f64; N_JOINT_ANGLES])> {
    [GraspType::Pinch, GraspType::Wrap, GraspType::Flat]
        .into_iter()
        .map(|g| (g, grasp_template(g)))
        .collect()
}

/// Rotate `v` by `theta` radians (positive = x-toward-y, i.e. clockwise on
/// screen with y pointing down).
pub fn rotate(v: [f64; 2], theta: f64) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// A fully specified hand configuration.
#[derive(Clone, Copy, Debug)]
pub struct HandPose {
    pub wrist: [f64; 2],
    /// Direction the fingers point, radians.
    pub heading: f64,
    /// Bend angles, [finger][joint] flattened; all in [0, π).
    pub curl: [f64; N_JOINT_ANGLES],
}

impl HandPose {
    pub fn new(wrist: [f64; 2], heading: f64, curl: [f64; N_JOINT_ANGLES]) -> Self {
        Self { wrist, heading, curl }
    }

    /// Template curls scaled by `blend` in [0,1] (0 = open hand).
    pub fn blended(wrist: [f64; 2], heading: f64, g: GraspType, blend: f64) -> Self {
        let mut curl = grasp_template(g);
        for a in curl.iter_mut() {
            *a *= blend;
        }
        Self { wrist, heading, curl }
    }

    /// Forward kinematics: world position of all 21 keypoints.
    pub fn keypoints(&self) -> [[f64; 2]; N_KEYPOINTS] {
        let mut out = [[0.0; 2]; N_KEYPOINTS];
        out[WRIST] = self.wrist;
        for f in 0..5 {
            let fan = self.heading + FAN_DEG[f].to_radians();
            let sign = CURL_SIGN[f];
            // Segment directions: the knuckle segment follows the fan line;
            // each bend angle rotates the remaining segments.
            let dirs = [
                fan,
                fan,
                fan + sign * self.curl[2 * f],
                fan + sign * (self.curl[2 * f] + self.curl[2 * f + 1]),
            ];
            let lens = [ROOT_LEN[f], SEG_LEN[0], SEG_LEN[1], SEG_LEN[2]];
            let mut pos = self.wrist;
            for (seg, k) in (FINGER_ROOTS[f]..FINGER_ROOTS[f] + 4).enumerate() {
                let (s, c) = dirs[seg].sin_cos();
                pos = [pos[0] + lens[seg] * c, pos[1] + lens[seg] * s];
                out[k] = pos;
            }
        }
        out
    }
}

/// Attachment point for a grasped object, in the hand's local frame (wrist
/// at origin, heading along +x).
///
/// It is the fingertip centroid at full template curl, pulled halfway back
/// onto the heading axis: close enough to the tips for contact detection,
/// but keeping the hand's off-axis reach small so a hand opening at any grid
/// cell stays inside the frame.
pub fn grip_center(g: GraspType) -> [f64; 2] {
    let pose = HandPose::blended([0.0, 0.0], 0.0, g, 1.0);
    let kps = pose.keypoints();
    let mut c = [0.0, 0.0];
    for &t in &FINGER_TIPS {
        c[0] += kps[t][0];
        c[1] += kps[t][1];
    }
    [c[0] / 5.0, c[1] / 10.0]
}

/// Axis-aligned box of valid wrist positions such that every keypoint stays
/// inside [margin, 1-margin], for a fixed heading and curl state.
pub fn wrist_bounds(heading: f64, g: GraspType, blend: f64, margin: f64) -> ([f64; 2], [f64; 2]) {
    let kps = HandPose::blended([0.0, 0.0], heading, g, blend).keypoints();
    let (mut lo, mut hi) = ([margin, margin], [1.0 - margin, 1.0 - margin]);
    for kp in kps {
        for a in 0..2 {
            lo[a] = lo[a].max(margin - kp[a]);
            hi[a] = hi[a].min(1.0 - margin - kp[a]);
        }
    }
    (lo, hi)
}

/// Hand keypoint tracks over time plus a per-keypoint visibility mask.
///
/// Coordinates are normalized to [0,1]; `validity` marks keypoints that were
/// actually observed (extraction from pixels can miss some).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    /// [frames][keypoint][xy]
    pub coords: Array3<f32>,
    /// [frames][keypoint]
    pub validity: Array2<bool>,
}

impl PoseSequence {
    pub fn new(coords: Array3<f32>, validity: Array2<bool>) -> Result<Self> {
        let (l, n, d) = coords.dim();
        if d != 2 || n != N_KEYPOINTS {
            return Err(Error::contract(format!(
                "pose sequence must be [L][{N_KEYPOINTS}][2], got [{l}][{n}][{d}]"
            )));
        }
        if l < 2 {
            return Err(Error::contract(format!(
                "pose sequence needs at least 2 frames, got {l}"
            )));
        }
        if validity.dim() != (l, n) {
            return Err(Error::contract("validity mask shape must match coords"));
        }
        for f in 0..l {
            for k in 0..n {
                if validity[[f, k]] {
                    for a in 0..2 {
                        let v = coords[[f, k, a]];
                        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                            return Err(Error::contract(format!(
                                "keypoint {k} frame {f} coordinate {v} outside [0,1]"
                            )));
                        }
                    }
                }
            }
        }
        Ok(Self { coords, validity })
    }

    /// All keypoints marked valid.
    pub fn fully_valid(coords: Array3<f32>) -> Result<Self> {
        let (l, n, _) = coords.dim();
        Self::new(coords, Array2::from_elem((l, n), true))
    }

    pub fn len(&self) -> usize {
        self.coords.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keypoint position as f64, or None when marked invalid.
    pub fn keypoint(&self, frame: usize, k: usize) -> Option<[f64; 2]> {
        if self.validity[[frame, k]] {
            Some([
                self.coords[[frame, k, 0]] as f64,
                self.coords[[frame, k, 1]] as f64,
            ])
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn bones_are_rigid_for_any_pose() {
        let mut r = rng::seeded(41);
        for _ in 0..50 {
            let heading = r.gen::<f64>() * std::f64::consts::TAU;
            let blend = r.gen::<f64>();
            let g = [GraspType::Pinch, GraspType::Wrap, GraspType::Flat][r.gen_range(0..3)];
            let kps = HandPose::blended([0.5, 0.5], heading, g, blend).keypoints();
            for k in 1..N_KEYPOINTS {
                let p = kps[PARENT[k]];
                let c = kps[k];
                let len = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt();
                let f = FINGER_ROOTS.iter().position(|&r0| (r0..r0 + 4).contains(&k)).unwrap();
                let expected = if PARENT[k] == WRIST {
                    ROOT_LEN[f]
                } else {
                    SEG_LEN[k - FINGER_ROOTS[f] - 1]
                };
                assert!((len - expected).abs() < 1e-9, "bone {k}: {len} vs {expected}");
            }
        }
    }

    #[test]
    fn fingertip_pixels_stay_distinct_across_pose_space() {
        // Every keypoint pair must land on distinct pixels at 32×32 for any
        // heading, template, and curl blend.
        let scale = 31.0;
        for phi_deg in (0..360).step_by(3) {
            for g in [GraspType::Pinch, GraspType::Wrap, GraspType::Flat] {
                for blend in (0..=10).map(|b| b as f64 / 10.0) {
                    let heading = (phi_deg as f64).to_radians();
                    let kps = HandPose::blended([0.5, 0.5], heading, g, blend).keypoints();
                    let px: Vec<(i64, i64)> = kps
                        .iter()
                        .map(|k| ((k[0] * scale).round() as i64, (k[1] * scale).round() as i64))
                        .collect();
                    for i in 0..N_KEYPOINTS {
                        for j in i + 1..N_KEYPOINTS {
                            assert!(
                                px[i] != px[j],
                                "keypoints {i} and {j} collide at {:?} (phi={phi_deg} {g:?} blend={blend})",
                                px[i]
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn templates_are_well_separated() {
        let ts = all_templates();
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                let d2: f64 = ts[i]
                    .1
                    .iter()
                    .zip(ts[j].1.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d2.sqrt() > 0.4, "{:?} vs {:?}: {}", ts[i].0, ts[j].0, d2.sqrt());
            }
        }
    }

    #[test]
    fn grip_center_sits_among_fingertips() {
        for g in [GraspType::Pinch, GraspType::Wrap, GraspType::Flat] {
            let c = grip_center(g);
            let kps = HandPose::blended([0.0, 0.0], 0.0, g, 1.0).keypoints();
            let min_tip = FINGER_TIPS
                .iter()
                .map(|&t| ((kps[t][0] - c[0]).powi(2) + (kps[t][1] - c[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            // The nearest fingertip must be close enough for contact detection
            // at the default object radius.
            assert!(min_tip < 0.09, "{g:?}: nearest tip {min_tip}");
        }
    }

    #[test]
    fn pose_sequence_validates_bounds() {
        let mut coords = Array3::<f32>::zeros((2, N_KEYPOINTS, 2));
        coords[[0, 0, 0]] = 1.5;
        assert!(PoseSequence::fully_valid(coords.clone()).is_err());
        coords[[0, 0, 0]] = 0.5;
        assert!(PoseSequence::fully_valid(coords).is_ok());
    }
}
