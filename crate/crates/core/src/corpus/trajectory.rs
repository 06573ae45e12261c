//! Dense motion plan for one episode: wrist path, heading, finger curl, and
//! object attachment over the trajectory timeline.
//!
//! Time is a continuous phase τ ∈ [0,1] split into fixed windows:
//! travel to a pre-grasp point, close the fingers, final approach, the
//! manipulation segment (object rigidly attached), opening, and a forward
//! retreat. The grasp annotation [g0,g1] covers exactly the manipulation
//! window, where joint angles are frame-constant by construction.

use crate::corpus::skeleton::{grip_center, rotate, wrist_bounds, HandPose};
use crate::corpus::{Action, GraspType};
use crate::rng::Prng;
use rand::Rng;

/// Phase boundaries (fractions of the episode timeline).
pub const APPROACH_END: f64 = 0.22;
pub const CLOSE_END: f64 = 0.26;
pub const MANIP_START: f64 = 0.28;
pub const MANIP_END: f64 = 0.80;
pub const OPEN_END: f64 = 0.86;

/// Wrist stand-off behind the grasp point before the final approach.
/// The open hand's fingertips reach ~0.25 ahead of the wrist while the grip
/// point sits ~0.18 ahead, so the pre-grasp stance must back off farther
/// than the ~0.07 overreach plus the grasp detection radius, or the open
/// hand would already count as grasping.
const PRE_GRASP_BACKOFF: f64 = 0.20;
/// Nominal travel distances for the initial approach and the retreat. The
/// retreat must carry the whole hand clear of the released object, not just
/// the fingertips, so it is longer than the palm's reach.
const START_DISTANCE: f64 = 0.24;
const RETREAT_DISTANCE: f64 = 0.38;
/// Sideways bow of the carry path for pick-and-place and pour.
const CARRY_BULGE: f64 = 0.05;
/// Peak wrist rotation while pouring, radians.
const POUR_TILT: f64 = 28.0 * std::f64::consts::PI / 180.0;
/// Keypoints must stay at least this far from the frame edge.
const EDGE_MARGIN: f64 = 0.012;

/// Hand and attachment state at one dense trajectory frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameState {
    pub wrist: [f64; 2],
    pub heading: f64,
    /// Curl blend in [0,1]; the full template is applied at 1.
    pub blend: f64,
    /// Whether the instructed object is rigidly attached to the hand.
    pub attached: bool,
}

#[derive(Clone, Debug)]
pub struct TrajectoryPlan {
    pub states: Vec<FrameState>,
    /// Grip-center offset in the hand's local frame.
    pub grip_local: [f64; 2],
}

fn smooth01(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

fn lerp2(a: [f64; 2], b: [f64; 2], u: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u]
}

fn clamp_box(p: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(lo[0], hi[0]), p[1].clamp(lo[1], hi[1])]
}

/// Largest d in [0, d_max] such that base + d·dir stays inside [lo, hi].
fn max_advance(base: [f64; 2], dir: [f64; 2], lo: [f64; 2], hi: [f64; 2], d_max: f64) -> f64 {
    let mut d = d_max;
    for a in 0..2 {
        if dir[a] > 1e-12 {
            d = d.min((hi[a] - base[a]) / dir[a]);
        } else if dir[a] < -1e-12 {
            d = d.min((lo[a] - base[a]) / dir[a]);
        }
    }
    d.clamp(0.0, d_max)
}

fn intersect(a: ([f64; 2], [f64; 2]), b: ([f64; 2], [f64; 2])) -> ([f64; 2], [f64; 2]) {
    (
        [a.0[0].max(b.0[0]), a.0[1].max(b.0[1])],
        [a.1[0].min(b.1[0]), a.1[1].min(b.1[1])],
    )
}

/// Build the dense per-frame plan for one episode.
///
/// `heading` is fixed for the whole episode except for the pour tilt;
/// `object_pos` is the instructed object's rest position and `target_pos`
/// the cell center it is carried to.
pub fn plan_trajectory(
    action: Action,
    grasp: GraspType,
    heading: f64,
    object_pos: [f64; 2],
    target_pos: [f64; 2],
    trajectory_frames: usize,
    rng: &mut Prng,
) -> TrajectoryPlan {
    let h = [heading.cos(), heading.sin()];
    let perp = rotate(h, std::f64::consts::FRAC_PI_2);
    let grip_local = grip_center(grasp);
    let grip_world = rotate(grip_local, heading);

    let grasp_wrist = [object_pos[0] - grip_world[0], object_pos[1] - grip_world[1]];
    let target_wrist = [target_pos[0] - grip_world[0], target_pos[1] - grip_world[1]];

    // Valid wrist boxes for the open and closed hand; the closed-hand box is
    // also evaluated at the pour tilt extreme so the tilt cannot escape.
    let open_box = wrist_bounds(heading, grasp, 0.0, EDGE_MARGIN);
    let mut closed_box = wrist_bounds(heading, grasp, 1.0, EDGE_MARGIN);
    if action == Action::Pour {
        closed_box = intersect(closed_box, wrist_bounds(heading + POUR_TILT, grasp, 1.0, EDGE_MARGIN));
    }
    let both_box = intersect(open_box, closed_box);

    // Pre-grasp: back off along the heading, shortened if the frame edge is
    // in the way (the hand is closed there and during the final approach).
    let back = max_advance(grasp_wrist, [-h[0], -h[1]], both_box.0, both_box.1, PRE_GRASP_BACKOFF);
    let pre_grasp = [grasp_wrist[0] - back * h[0], grasp_wrist[1] - back * h[1]];

    // Start: further back with a little lateral variety, clamped to where the
    // open hand fits.
    let d_start: f64 = START_DISTANCE + rng.gen::<f64>() * 0.08;
    let side = (rng.gen::<f64>() - 0.5) * 0.10;
    let start = clamp_box(
        [
            pre_grasp[0] - d_start * h[0] + side * perp[0],
            pre_grasp[1] - d_start * h[1] + side * perp[1],
        ],
        open_box.0,
        open_box.1,
    );

    // Retreat: either push on forward past the released object or withdraw
    // the way the hand came, whichever direction has more room before the
    // frame edge. Ending near the object would leave the palm parked on top
    // of it in the closing frames.
    let fwd = max_advance(target_wrist, h, open_box.0, open_box.1, RETREAT_DISTANCE);
    let bwd = max_advance(target_wrist, [-h[0], -h[1]], open_box.0, open_box.1, RETREAT_DISTANCE);
    let (retreat, retreat_sign) = if fwd >= bwd { (fwd, 1.0) } else { (bwd, -1.0) };

    // Carry bow, shrunk until the bowed midpoint stays in the closed-hand box.
    let mut bulge = match action {
        Action::Push => 0.0,
        _ => CARRY_BULGE,
    };
    let mid = lerp2(grasp_wrist, target_wrist, 0.5);
    let to_center = [0.5 - mid[0], 0.5 - mid[1]];
    let side_sign = if to_center[0] * perp[0] + to_center[1] * perp[1] >= 0.0 { 1.0 } else { -1.0 };
    let bulge_dir = [side_sign * perp[0], side_sign * perp[1]];
    bulge = max_advance(mid, bulge_dir, closed_box.0, closed_box.1, bulge);

    let tf = trajectory_frames;
    let mut states = Vec::with_capacity(tf);
    for i in 0..tf {
        let tau = i as f64 / (tf - 1) as f64;
        let (wrist, blend, attached) = if tau < APPROACH_END {
            let u = smooth01(tau / APPROACH_END);
            (lerp2(start, pre_grasp, u), 0.0, false)
        } else if tau < CLOSE_END {
            let u = smooth01((tau - APPROACH_END) / (CLOSE_END - APPROACH_END));
            (pre_grasp, u, false)
        } else if tau < MANIP_START {
            let u = smooth01((tau - CLOSE_END) / (MANIP_START - CLOSE_END));
            (lerp2(pre_grasp, grasp_wrist, u), 1.0, false)
        } else if tau <= MANIP_END {
            let u = smooth01((tau - MANIP_START) / (MANIP_END - MANIP_START));
            let mut w = lerp2(grasp_wrist, target_wrist, u);
            let b = bulge * (std::f64::consts::PI * u).sin();
            w = [w[0] + b * bulge_dir[0], w[1] + b * bulge_dir[1]];
            (w, 1.0, true)
        } else if tau <= OPEN_END {
            let u = smooth01((tau - MANIP_END) / (OPEN_END - MANIP_END));
            (target_wrist, 1.0 - u, false)
        } else {
            let u = smooth01((tau - OPEN_END) / (1.0 - OPEN_END));
            let d = retreat_sign * retreat * u;
            (
                [target_wrist[0] + d * h[0], target_wrist[1] + d * h[1]],
                0.0,
                false,
            )
        };
        // Pour: tilt the whole hand up and back down mid-carry.
        let heading_i = if action == Action::Pour && (0.50..=0.74).contains(&tau) {
            let u = (tau - 0.50) / 0.24;
            heading + POUR_TILT * (std::f64::consts::PI * u).sin()
        } else {
            heading
        };
        states.push(FrameState { wrist, heading: heading_i, blend, attached });
    }
    TrajectoryPlan { states, grip_local }
}

/// World-space object position while attached, given the hand state.
pub fn attached_object_pos(state: &FrameState, grip_local: [f64; 2]) -> [f64; 2] {
    let g = rotate(grip_local, state.heading);
    [state.wrist[0] + g[0], state.wrist[1] + g[1]]
}

/// Keypoints for a dense frame state of an episode with grasp type `g`.
pub fn state_keypoints(state: &FrameState, g: GraspType) -> [[f64; 2]; crate::corpus::skeleton::N_KEYPOINTS] {
    HandPose::blended(state.wrist, state.heading, g, state.blend).keypoints()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn check_plan(action: Action, grasp: GraspType, heading_deg: f64, obj: [f64; 2], tgt: [f64; 2]) {
        let mut r = rng::seeded(99);
        let plan = plan_trajectory(
            action,
            grasp,
            heading_deg.to_radians(),
            obj,
            tgt,
            61,
            &mut r,
        );
        assert_eq!(plan.states.len(), 61);
        for (i, s) in plan.states.iter().enumerate() {
            for kp in state_keypoints(s, grasp) {
                for a in 0..2 {
                    assert!(
                        (0.005..=0.995).contains(&kp[a]),
                        "frame {i} keypoint {kp:?} out of bounds ({action:?} {heading_deg}°)"
                    );
                }
            }
        }
        // Object lands exactly on the target at the end of the carry.
        let last_attached = plan
            .states
            .iter()
            .rposition(|s| s.attached)
            .expect("has attached frames");
        let p = attached_object_pos(&plan.states[last_attached], plan.grip_local);
        assert!((p[0] - tgt[0]).abs() < 1e-9 && (p[1] - tgt[1]).abs() < 1e-9);
        // Attachment is continuous: the first attached frame may fall just
        // after the manipulation window opens, so the object can have moved
        // by at most a sub-pixel sliver from its rest position.
        let first_attached = plan.states.iter().position(|s| s.attached).unwrap();
        let p0 = attached_object_pos(&plan.states[first_attached], plan.grip_local);
        let gap = ((p0[0] - obj[0]).powi(2) + (p0[1] - obj[1]).powi(2)).sqrt();
        assert!(gap < 5e-4, "attachment discontinuity {gap}");
    }

    #[test]
    fn plans_stay_in_frame_for_hard_layouts() {
        let cells = [0.26, 0.5, 0.74];
        for action in [Action::PickPlace, Action::Push, Action::Pour] {
            let grasp = match action {
                Action::Push => GraspType::Flat,
                Action::Pour => GraspType::Wrap,
                Action::PickPlace => GraspType::Pinch,
            };
            for heading in [0.0, 45.0, 90.0, 135.0, 180.0, 225.0, 270.0, 315.0] {
                for &ox in &cells {
                    for &tx in &cells {
                        check_plan(action, grasp, heading, [ox, cells[0]], [tx, cells[2]]);
                        check_plan(action, grasp, heading, [ox, cells[2]], [tx, cells[0]]);
                    }
                }
            }
        }
    }

    #[test]
    fn grasp_window_angles_are_frame_constant() {
        let mut r = rng::seeded(3);
        let plan = plan_trajectory(
            Action::PickPlace,
            GraspType::Wrap,
            1.1,
            [0.26, 0.5],
            [0.74, 0.5],
            61,
            &mut r,
        );
        for s in &plan.states {
            let tau_attached = s.attached;
            if tau_attached {
                assert_eq!(s.blend, 1.0);
            }
        }
    }
}
