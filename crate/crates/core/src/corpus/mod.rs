//! Procedurally generated synthetic hand-object-interaction corpus.
//!
//! Each episode is a short top-down tabletop scene: colored objects sit on a
//! 3×3 grid, a 21-keypoint skeletal hand enters, grasps the instructed
//! object, carries (or pushes / pours) it to a target cell, and withdraws.
//! Episodes are rendered to small RGB frames with per-keypoint reserved-color
//! markers so ground-truth poses are recoverable from pixels alone, and are
//! a pure function of (config, seed).

mod io;
pub mod render;
pub mod skeleton;
mod trajectory;

pub use io::{
    generate_corpus, load_index, read_episode, read_pose_files, save_index, write_episode,
    write_pose_files,
};
pub use render::{recover_keypoints, render_frame, DrawObject};
pub use skeleton::{PoseSequence, N_JOINT_ANGLES, N_KEYPOINTS};

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, Prng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    PickPlace,
    Push,
    Pour,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::PickPlace, Action::Push, Action::Pour];

    pub fn name(self) -> &'static str {
        match self {
            Action::PickPlace => "pick_place",
            Action::Push => "push",
            Action::Pour => "pour",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectColor {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ObjectColor {
    pub const ALL: [ObjectColor; 4] = [
        ObjectColor::Red,
        ObjectColor::Green,
        ObjectColor::Blue,
        ObjectColor::Yellow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectColor::Red => "red",
            ObjectColor::Green => "green",
            ObjectColor::Blue => "blue",
            ObjectColor::Yellow => "yellow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Circle,
    Square,
    Triangle,
}

impl ObjectShape {
    pub const ALL: [ObjectShape; 3] = [ObjectShape::Circle, ObjectShape::Square, ObjectShape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ObjectShape::Circle => "circle",
            ObjectShape::Square => "square",
            ObjectShape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspType {
    Pinch,
    Wrap,
    Flat,
}

impl GraspType {
    pub fn name(self) -> &'static str {
        match self {
            GraspType::Pinch => "pinch",
            GraspType::Wrap => "wrap",
            GraspType::Flat => "flat",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Fixed-vocabulary token encoding: 3 actions, 4 colors, 3 shapes, 9 cells,
/// and a null token used for classifier-free condition dropout.
pub const VOCAB_SIZE: usize = 20;
pub const NULL_TOKEN: u32 = 19;
pub const INSTRUCTION_TOKENS: usize = 4;

const COLOR_BASE: u32 = 3;
const SHAPE_BASE: u32 = 7;
const CELL_BASE: u32 = 10;

/// Human-readable vocabulary, indexed by token id.
pub fn vocab() -> Vec<String> {
    let mut v: Vec<String> = Action::ALL.iter().map(|a| a.name().to_string()).collect();
    v.extend(ObjectColor::ALL.iter().map(|c| c.name().to_string()));
    v.extend(ObjectShape::ALL.iter().map(|s| s.name().to_string()));
    for r in 0..3 {
        for c in 0..3 {
            v.push(format!("cell_r{r}c{c}"));
        }
    }
    v.push("<null>".to_string());
    debug_assert_eq!(v.len(), VOCAB_SIZE);
    v
}

/// A task command: move the uniquely identified object to a grid cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub action: Action,
    pub color: ObjectColor,
    pub shape: ObjectShape,
    /// (row, col) on the 3×3 grid.
    pub target_cell: [u8; 2],
}

impl Instruction {
    pub fn tokens(&self) -> [u32; INSTRUCTION_TOKENS] {
        let a = Action::ALL.iter().position(|x| *x == self.action).unwrap() as u32;
        let c = ObjectColor::ALL.iter().position(|x| *x == self.color).unwrap() as u32;
        let s = ObjectShape::ALL.iter().position(|x| *x == self.shape).unwrap() as u32;
        [
            a,
            COLOR_BASE + c,
            SHAPE_BASE + s,
            CELL_BASE + self.target_cell[0] as u32 * 3 + self.target_cell[1] as u32,
        ]
    }

    pub fn from_tokens(t: [u32; INSTRUCTION_TOKENS]) -> Result<Self> {
        if t[0] >= COLOR_BASE
            || !(COLOR_BASE..SHAPE_BASE).contains(&t[1])
            || !(SHAPE_BASE..CELL_BASE).contains(&t[2])
            || !(CELL_BASE..NULL_TOKEN).contains(&t[3])
        {
            return Err(Error::contract(format!("invalid instruction tokens {t:?}")));
        }
        let cell = t[3] - CELL_BASE;
        Ok(Self {
            action: Action::ALL[t[0] as usize],
            color: ObjectColor::ALL[(t[1] - COLOR_BASE) as usize],
            shape: ObjectShape::ALL[(t[2] - SHAPE_BASE) as usize],
            target_cell: [(cell / 3) as u8, (cell % 3) as u8],
        })
    }
}

/// Grid cell centers along each axis.
pub const GRID_CELLS: [f64; 3] = [0.26, 0.5, 0.74];

pub fn cell_center(cell: [u8; 2]) -> [f64; 2] {
    [GRID_CELLS[cell[1] as usize], GRID_CELLS[cell[0] as usize]]
}

/// Generator parameters; all sampling is driven by these plus a seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Square frame edge in pixels.
    pub image_size: usize,
    /// Frames kept per episode (uniformly sampled from the dense trajectory).
    pub frames: usize,
    /// Dense trajectory resolution.
    pub trajectory_frames: usize,
    pub fps: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub object_radius: f64,
    /// Sampling weights for the palm-orientation quadrants [0°,90°), … .
    pub orientation_bin_weights: [f64; 4],
    /// Sampling weights for (pick_place, push, pour).
    pub action_weights: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            frames: 16,
            trajectory_frames: 61,
            fps: 8.0,
            min_objects: 2,
            max_objects: 5,
            object_radius: 0.065,
            orientation_bin_weights: [0.25; 4],
            action_weights: [1.0 / 3.0; 3],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::contract("image_size must be at least 16"));
        }
        if self.frames < 8 {
            return Err(Error::contract("frames must be at least 8"));
        }
        if self.trajectory_frames < self.frames {
            return Err(Error::contract("trajectory_frames must be >= frames"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::contract("fps must be positive"));
        }
        let duration = self.trajectory_frames as f64 / self.fps;
        if duration >= 8.0 {
            return Err(Error::contract(format!(
                "episode duration {duration:.2}s must stay under 8s"
            )));
        }
        if self.min_objects < 2 || self.max_objects > 5 || self.min_objects > self.max_objects {
            return Err(Error::contract("object count range must satisfy 2 <= min <= max <= 5"));
        }
        if !(self.object_radius > 0.0) {
            return Err(Error::contract("object_radius must be positive"));
        }
        let wsum: f64 = self.orientation_bin_weights.iter().sum();
        if self.orientation_bin_weights.iter().any(|w| *w < 0.0) || wsum <= 0.0 {
            return Err(Error::contract("orientation_bin_weights must be non-negative, sum > 0"));
        }
        let asum: f64 = self.action_weights.iter().sum();
        if self.action_weights.iter().any(|w| *w < 0.0) || asum <= 0.0 {
            return Err(Error::contract("action_weights must be non-negative, sum > 0"));
        }
        Ok(())
    }
}

/// A static scene object plus where it started.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: ObjectColor,
    pub shape: ObjectShape,
    pub cell: [u8; 2],
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFrameState {
    pub pos: [f32; 2],
    pub attached: bool,
}

/// Per-frame states of every object, aligned with the episode's frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    /// [frame][object]
    pub frames: Vec<Vec<ObjectFrameState>>,
}

impl SceneState {
    /// Index of the object named by the instruction; scenes guarantee that
    /// exactly one object matches the (color, shape) pair.
    pub fn instructed_index(&self, instr: &Instruction) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| o.color == instr.color && o.shape == instr.shape)
    }
}

/// One fully rendered, fully annotated synthetic episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub episode_id: String,
    pub instruction: Instruction,
    /// [L][H][W][3]
    pub frames: Array4<u8>,
    pub poses: PoseSequence,
    pub objects: SceneState,
    /// Inclusive frame interval with the object rigidly held.
    pub grasp_phase: [usize; 2],
    pub grasp_type: GraspType,
    pub fps: f64,
    pub seed: u64,
}

fn weighted_choice(rng: &mut Prng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        x -= w;
        if x <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Evenly spread `l` frame indices over `0..total_frames`, endpoints pinned.
pub fn uniform_sample_indices(total_frames: usize, l: usize) -> Result<Vec<usize>> {
    if l < 2 || total_frames < l {
        return Err(Error::InsufficientFrames { available: total_frames, requested: l });
    }
    let out: Vec<usize> = (0..l)
        .map(|i| ((i * (total_frames - 1)) as f64 / (l - 1) as f64).round() as usize)
        .collect();
    debug_assert!(out.windows(2).all(|w| w[0] < w[1]));
    Ok(out)
}

/// Grasp detection threshold as a multiple of the object radius, shared by
/// the generator's feasibility checks and the metric-side detector.
pub const GRASP_TAU_FACTOR: f64 = 1.5;

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let qx = a[0] + t * ab[0] - p[0];
    let qy = a[1] + t * ab[1] - p[1];
    (qx * qx + qy * qy).sqrt()
}

/// Generate one episode deterministically from (config, seed).
///
/// Sampling is rejection-based: a drawn layout is kept only when the hand
/// genuinely stands off from the object outside the annotated grasp window
/// (frame-edge clamping can otherwise eat the approach or retreat standoff)
/// and the final frame shows the released object clear of the hand. The 3×3
/// grid maps onto itself under 90° rotation, so rejection is equally likely
/// in every palm-orientation quadrant and cannot bias the bin proportions.
pub fn generate_episode(cfg: &CorpusConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut r = rng::seeded(seed);

    let action = Action::ALL[weighted_choice(&mut r, &cfg.action_weights)];
    let grasp_type = match action {
        Action::Push => GraspType::Flat,
        Action::Pour => GraspType::Wrap,
        Action::PickPlace => {
            if r.gen::<bool>() {
                GraspType::Pinch
            } else {
                GraspType::Wrap
            }
        }
    };

    let attempts = 64;
    for _ in 0..attempts {
        if let Some(ep) = attempt_episode(cfg, seed, action, grasp_type, &mut r)? {
            return Ok(ep);
        }
    }
    Err(Error::PlacementInfeasible { attempts })
}

/// One sampling attempt for [`generate_episode`]; `None` rejects the layout.
fn attempt_episode(
    cfg: &CorpusConfig,
    seed: u64,
    action: Action,
    grasp_type: GraspType,
    r: &mut Prng,
) -> Result<Option<Episode>> {
    // Palm orientation: quadrant by weight, then uniform with a margin so the
    // sampled bin is recoverable despite float rounding.
    let bin = weighted_choice(r, &cfg.orientation_bin_weights);
    let phi_deg = r.gen_range(bin as f64 * 90.0 + 0.5..(bin + 1) as f64 * 90.0 - 0.5);
    // The palm normal points 90° counter-rotated from the finger direction,
    // so the fingers head along φ+90°.
    let heading = (phi_deg + 90.0).to_radians();

    // Scene: distinct (color, shape) pairs on distinct cells, plus one free
    // target cell; rejected if the requested radius cannot fit.
    let n_obj = r.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut combos: Vec<(ObjectColor, ObjectShape)> = ObjectColor::ALL
        .iter()
        .flat_map(|&c| ObjectShape::ALL.iter().map(move |&s| (c, s)))
        .collect();
    combos.shuffle(r);

    let mut cells: Vec<[u8; 2]> = (0..9u8).map(|i| [i / 3, i % 3]).collect();
    let min_gap = 2.0 * cfg.object_radius + 1.0 / (cfg.image_size - 1) as f64;
    let mut placed: Option<(Vec<[u8; 2]>, [u8; 2])> = None;
    for _ in 0..8 {
        cells.shuffle(r);
        let object_cells = &cells[..n_obj];
        let ok = object_cells.iter().enumerate().all(|(i, &a)| {
            object_cells.iter().skip(i + 1).all(|&b| {
                let pa = cell_center(a);
                let pb = cell_center(b);
                ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt() >= min_gap
            })
        });
        if ok {
            placed = Some((object_cells.to_vec(), cells[n_obj]));
            break;
        }
    }
    let Some((object_cells, target_cell)) = placed else {
        return Ok(None);
    };

    let objects: Vec<SceneObject> = (0..n_obj)
        .map(|i| SceneObject {
            color: combos[i].0,
            shape: combos[i].1,
            cell: object_cells[i],
            radius: cfg.object_radius,
        })
        .collect();
    let instructed = r.gen_range(0..n_obj);
    let instruction = Instruction {
        action,
        color: objects[instructed].color,
        shape: objects[instructed].shape,
        target_cell,
    };

    let plan = trajectory::plan_trajectory(
        action,
        grasp_type,
        heading,
        cell_center(objects[instructed].cell),
        cell_center(target_cell),
        cfg.trajectory_frames,
        r,
    );
    let indices = uniform_sample_indices(cfg.trajectory_frames, cfg.frames)?;

    // Instructed-object position over the dense timeline.
    let rest = cell_center(objects[instructed].cell);
    let target = cell_center(target_cell);
    let mut seen_attached = false;
    let dense_obj: Vec<([f64; 2], bool)> = plan
        .states
        .iter()
        .map(|s| {
            if s.attached {
                seen_attached = true;
                (trajectory::attached_object_pos(s, plan.grip_local), true)
            } else if seen_attached {
                (target, false)
            } else {
                (rest, false)
            }
        })
        .collect();

    // Cheap pass before any rendering: keypoints, frame bounds, and the
    // annotated grasp window over the sampled frames.
    let mut kps_by_frame = Vec::with_capacity(cfg.frames);
    let mut grasp_frames = Vec::new();
    for (fi, &di) in indices.iter().enumerate() {
        let state = &plan.states[di];
        let kps = trajectory::state_keypoints(state, grasp_type);
        for (k, kp) in kps.iter().enumerate() {
            for a in 0..2 {
                if !(0.0..=1.0).contains(&kp[a]) {
                    return Err(Error::contract(format!(
                        "episode {seed:#x}: keypoint {k} left the frame at dense step {di}"
                    )));
                }
            }
        }
        if state.attached {
            grasp_frames.push(fi);
        }
        kps_by_frame.push(kps);
    }
    let g0 = *grasp_frames.first().ok_or_else(|| {
        Error::contract("no grasp-phase frame sampled; increase frames or trajectory_frames")
    })?;
    let g1 = *grasp_frames.last().unwrap();

    // Proximity detection must rediscover [g0, g1] with at most one frame of
    // slack on each side: fingertips inside the detection radius throughout
    // the window, and clear of it (with margin, so the f32-roundtripped
    // metric lands on the same side) everywhere except the adjacent frames.
    let tau = GRASP_TAU_FACTOR * cfg.object_radius;
    for (fi, kps) in kps_by_frame.iter().enumerate() {
        let obj = dense_obj[indices[fi]].0;
        let d = skeleton::FINGER_TIPS
            .iter()
            .map(|&t| ((kps[t][0] - obj[0]).powi(2) + (kps[t][1] - obj[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        if (g0..=g1).contains(&fi) {
            if d >= tau {
                return Ok(None);
            }
        } else if (fi + 1 < g0 || fi > g1 + 1) && d < tau * 1.08 {
            return Ok(None);
        }
    }

    // The instructed object must be visually separate from every hand bone
    // in the first and last frame, or the color tracker loses it.
    let clear = cfg.object_radius + 0.052;
    for fi in [0, cfg.frames - 1] {
        let obj = dense_obj[indices[fi]].0;
        let kps = &kps_by_frame[fi];
        for k in 1..N_KEYPOINTS {
            if point_segment_distance(obj, kps[skeleton::PARENT[k]], kps[k]) < clear {
                return Ok(None);
            }
        }
    }

    let (h, w) = (cfg.image_size, cfg.image_size);
    let mut frames = Array4::<u8>::zeros((cfg.frames, h, w, 3));
    let mut coords = Array3::<f32>::zeros((cfg.frames, N_KEYPOINTS, 2));
    let mut obj_frames: Vec<Vec<ObjectFrameState>> = Vec::with_capacity(cfg.frames);

    for (fi, &di) in indices.iter().enumerate() {
        let kps = &kps_by_frame[fi];
        for (k, kp) in kps.iter().enumerate() {
            for a in 0..2 {
                coords[[fi, k, a]] = kp[a] as f32;
            }
        }
        let mut draw = Vec::with_capacity(n_obj);
        let mut states_row = Vec::with_capacity(n_obj);
        for (oi, o) in objects.iter().enumerate() {
            let (pos, attached) = if oi == instructed {
                dense_obj[di]
            } else {
                (cell_center(o.cell), false)
            };
            draw.push(DrawObject { shape: o.shape, color: o.color, pos, radius: o.radius });
            states_row.push(ObjectFrameState {
                pos: [pos[0] as f32, pos[1] as f32],
                attached,
            });
        }
        // Draw static objects first so the carried object overlaps them.
        let moving = draw.remove(instructed);
        let mut order = draw;
        order.push(moving);
        frames
            .index_axis_mut(ndarray::Axis(0), fi)
            .assign(&render_frame(h, w, &order, kps));
        obj_frames.push(states_row);
    }

    Ok(Some(Episode {
        episode_id: format!("ep-{seed:016x}"),
        instruction,
        frames,
        poses: PoseSequence::fully_valid(coords)?,
        objects: SceneState { objects, frames: obj_frames },
        grasp_phase: [g0, g1],
        grasp_type,
        fps: cfg.fps,
        seed,
    }))
}

/// Listing of a corpus directory with split assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub episode_id: String,
    /// Episode directory, relative to the index file.
    pub path: String,
    pub action: Action,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub episodes: Vec<IndexEntry>,
    pub vocab: Vec<String>,
    pub generator_config: CorpusConfig,
}

impl DatasetIndex {
    pub fn split(&self, s: Split) -> Vec<&IndexEntry> {
        self.episodes.iter().filter(|e| e.split == s).collect()
    }
}

/// Assign train/test splits: per action category, `ceil(fraction·count)`
/// test episodes with a minimum of one.
pub fn build_split(
    mut entries: Vec<(String, String, Action)>,
    fraction: f64,
    seed: u64,
    generator_config: CorpusConfig,
) -> Result<DatasetIndex> {
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("split fraction {fraction} outside [0,1]")));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut episodes: Vec<IndexEntry> = entries
        .into_iter()
        .map(|(episode_id, path, action)| IndexEntry {
            episode_id,
            path,
            action,
            split: Split::Train,
        })
        .collect();
    let mut r = rng::seeded(rng::derive(seed, "split"));
    for action in Action::ALL {
        let mut idx: Vec<usize> = episodes
            .iter()
            .enumerate()
            .filter(|(_, e)| e.action == action)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut r);
        let n_test = ((fraction * idx.len() as f64).ceil() as usize).max(1);
        for &i in idx.iter().take(n_test.min(idx.len())) {
            episodes[i].split = Split::Test;
        }
    }
    Ok(DatasetIndex { episodes, vocab: vocab(), generator_config })
}
