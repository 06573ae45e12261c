//! Stage III: pose-conditioned video regeneration.
//!
//! Refined pose sequences are rasterized to single-channel conditioning
//! images, a small per-frame encoder turns (pose image, current latent,
//! timestep) into feature maps, and zero-initialized 1×1 projections add
//! those features into the frozen planner's encoder path at each of its
//! three resolutions. Because every injection projection starts at zero,
//! an untrained adapter leaves the planner's outputs untouched — attaching
//! it changes nothing until training moves the projections.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, IxDyn};
use sha2::{Digest, Sha256};

use crate::config::{hex, PipelineConfig};
use crate::corpus::skeleton::{PoseSequence, N_KEYPOINTS, PARENT};
use crate::corpus::{self, DatasetIndex, Split};
use crate::diffusion::{self, DiffusionSchedule};
use crate::graph::{Graph, Var};
use crate::manifest::{RunManifest, StageRecord};
use crate::motion::{self, MotionRefiner, RefinementConfig};
use crate::nn::{bind, bind_constant, collect_grads, Adam, Conv, Film, Linear, ParamStore};
use crate::planner::{
    encode_frames, ConditioningBundle, FeatureInjector, GeneratedVideo, TrainRecord, VideoPlanner,
};
use crate::rng::{self, normal_arr};
use crate::{Arr, Error, Result, Scalar};

/// Drawing parameters for pose conditioning images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrawSpec {
    /// Keypoint disc radius in pixels.
    pub r_kp: f64,
    /// Bone stroke width in pixels.
    pub w_bone: f64,
}

impl DrawSpec {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        DrawSpec {
            r_kp: cfg.posectrl.r_kp,
            w_bone: cfg.posectrl.w_bone,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // The disc must cover the nearest pixel center (at most sqrt(2)/2
        // away) strongly enough to honor the >= 0.5-at-center contract.
        if self.r_kp < 0.75 || self.w_bone < 0.0 {
            return Err(Error::contract(format!(
                "draw spec r_kp {} must be >= 0.75 and w_bone {} >= 0",
                self.r_kp, self.w_bone
            )));
        }
        Ok(())
    }
}

/// Rasterizes a pose sequence to `[L, 1, H, W]` values in `[0, 1]`:
/// anti-aliased discs at valid keypoints, anti-aliased segments along bones
/// whose two endpoints are both valid, black background.
pub fn render_pose_images<T: Scalar>(
    p: &PoseSequence,
    spec: DrawSpec,
    h: usize,
    w: usize,
) -> Result<Arr<T>> {
    spec.validate()?;
    if h < 2 || w < 2 {
        return Err(Error::contract("pose image size must be at least 2x2"));
    }
    let l = p.coords.dim().0;
    let mut out = Arr::<T>::zeros(IxDyn(&[l, 1, h, w]));
    let px = |v: f32, dim: usize| f64::from(v) * (dim - 1) as f64;
    for f in 0..l {
        let mut stamp = |cx: f64, cy: f64, reach: f64, cover: &dyn Fn(f64, f64) -> f64| {
            let x0 = (cx - reach).floor().max(0.0) as usize;
            let x1 = (cx + reach).ceil().min((w - 1) as f64) as usize;
            let y0 = (cy - reach).floor().max(0.0) as usize;
            let y1 = (cy + reach).ceil().min((h - 1) as f64) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let v = cover(x as f64, y as f64).clamp(0.0, 1.0);
                    if v > out[[f, 0, y, x]].to_f64_c() {
                        out[[f, 0, y, x]] = T::from_f64_c(v);
                    }
                }
            }
        };
        for k in 0..N_KEYPOINTS {
            if !p.validity[[f, k]] {
                continue;
            }
            let (cx, cy) = (px(p.coords[[f, k, 0]], w), px(p.coords[[f, k, 1]], h));
            stamp(cx, cy, spec.r_kp + 1.0, &|x, y| {
                spec.r_kp + 0.5 - ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()
            });
        }
        if spec.w_bone > 0.0 {
            for k in 1..N_KEYPOINTS {
                let j = PARENT[k];
                if !p.validity[[f, k]] || !p.validity[[f, j]] {
                    continue;
                }
                let a = [px(p.coords[[f, j, 0]], w), px(p.coords[[f, j, 1]], h)];
                let b = [px(p.coords[[f, k, 0]], w), px(p.coords[[f, k, 1]], h)];
                let (cx, cy) = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0);
                let half = ((b[0] - a[0]).hypot(b[1] - a[1])) / 2.0 + spec.w_bone;
                stamp(cx, cy, half + 1.0, &|x, y| {
                    spec.w_bone / 2.0 + 0.5 - point_segment_distance([x, y], a, b)
                });
            }
        }
    }
    Ok(out)
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    let c = [a[0] + t * ab[0], a[1] + t * ab[1]];
    (p[0] - c[0]).hypot(p[1] - c[1])
}

/// Adapter dimensions; trunk widths mirror the planner's encoder so each
/// injection is a 1×1 projection at the matching resolution.
#[derive(Clone, Debug)]
pub struct PoseAdapter {
    pub l: usize,
    pub h: usize,
    pub w: usize,
    ch_full: usize,
    ch_half: usize,
    ch_quarter: usize,
    ctx_dim: usize,
}

impl PoseAdapter {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let planner = VideoPlanner::new(cfg)?;
        Ok(PoseAdapter {
            l: planner.l,
            h: planner.h,
            w: planner.w,
            ch_full: planner.ch_full,
            ch_half: planner.ch_half,
            ch_quarter: planner.ch_quarter,
            ctx_dim: planner.ctx_dim,
        })
    }

    fn c0(&self) -> Conv {
        Conv::new("posectrl.c0", 4, self.ch_full, 3, 1)
    }
    fn c1(&self) -> Conv {
        Conv::new("posectrl.c1", self.ch_full, self.ch_half, 3, 2)
    }
    fn c2(&self) -> Conv {
        Conv::new("posectrl.c2", self.ch_half, self.ch_quarter, 3, 2)
    }
    fn temb(&self) -> Linear {
        Linear::new("posectrl.temb", self.ctx_dim, self.ctx_dim)
    }
    fn film(&self) -> Film {
        Film::new("posectrl.film", self.ctx_dim, self.ch_half)
    }
    fn j0(&self) -> Conv {
        Conv::new("posectrl.j0", self.ch_full, self.ch_full, 1, 1).zeroed()
    }
    fn j1(&self) -> Conv {
        Conv::new("posectrl.j1", self.ch_half, self.ch_half, 1, 1).zeroed()
    }
    fn j2(&self) -> Conv {
        Conv::new("posectrl.j2", self.ch_quarter, self.ch_quarter, 1, 1).zeroed()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut ps = ParamStore::new();
        let mut r = rng::seeded(rng::derive(seed, "posectrl.init"));
        self.c0().init(&mut ps, &mut r);
        self.c1().init(&mut ps, &mut r);
        self.c2().init(&mut ps, &mut r);
        self.temb().init(&mut ps, &mut r);
        self.film().init(&mut ps, &mut r);
        self.j0().init(&mut ps, &mut r);
        self.j1().init(&mut ps, &mut r);
        self.j2().init(&mut ps, &mut r);
        ps
    }

    /// True while every injection projection is still exactly zero.
    pub fn is_inert<T: Scalar>(&self, ps: &ParamStore<T>) -> bool {
        ["posectrl.j0", "posectrl.j1", "posectrl.j2"]
            .iter()
            .flat_map(|n| [format!("{n}.w"), format!("{n}.b")])
            .all(|name| ps.get(&name).value.iter().all(|v| *v == T::zero()))
    }
}

/// A pose adapter bound to parameters and a pose image stack, ready to
/// inject features during sampling or training.
pub struct AdapterInstance<'a, T: Scalar> {
    pub adapter: &'a PoseAdapter,
    pub params: &'a ParamStore<T>,
    /// `[L, 1, H, W]` conditioning images.
    pub pose_images: &'a Arr<T>,
}

impl<'a, T: Scalar> AdapterInstance<'a, T> {
    pub fn new(adapter: &'a PoseAdapter, params: &'a ParamStore<T>, pose_images: &'a Arr<T>) -> Result<Self> {
        let want = [adapter.l, 1, adapter.h, adapter.w];
        if pose_images.shape() != want {
            return Err(Error::contract(format!(
                "pose images {:?} do not match configured {:?}",
                pose_images.shape(),
                want
            )));
        }
        Ok(AdapterInstance { adapter, params, pose_images })
    }

    fn build(&self, g: &mut Graph<T>, bd: &crate::nn::Bound, z_t: Var, t: usize) -> [Var; 3] {
        let a = self.adapter;
        let imgs = g.constant(self.pose_images.clone());
        let x = g.concat(1, &[imgs, z_t]);
        let t0 = a.c0().apply(g, bd, x);
        let t0 = g.silu(t0);
        let mut t1 = a.c1().apply(g, bd, t0);
        t1 = g.silu(t1);
        let sin = g.constant(crate::nn::sinusoidal::<T>(t as f64, a.ctx_dim, 10_000.0));
        let te = a.temb().apply(g, bd, sin);
        let te = g.silu(te);
        t1 = a.film().apply(g, bd, t1, te);
        let t2 = a.c2().apply(g, bd, t1);
        let t2 = g.silu(t2);
        [
            a.j0().apply(g, bd, t0),
            a.j1().apply(g, bd, t1),
            a.j2().apply(g, bd, t2),
        ]
    }
}

impl<'a, T: Scalar> FeatureInjector<T> for AdapterInstance<'a, T> {
    fn inject(&self, g: &mut Graph<T>, z_t: Var, t: usize) -> Result<[Var; 3]> {
        let bd = bind_constant(g, self.params);
        Ok(self.build(g, &bd, z_t, t))
    }
}

/// Stage-III generation: the shared sampler with the adapter attached.
#[allow(clippy::too_many_arguments)]
pub fn generate_fine<T: Scalar>(
    planner: &VideoPlanner,
    planner_ps: &ParamStore<T>,
    adapter: &PoseAdapter,
    adapter_ps: &ParamStore<T>,
    sched: &DiffusionSchedule<T>,
    cond: &ConditioningBundle,
    pose_images: &Arr<T>,
    steps: usize,
    w_text: f64,
    w_img: f64,
    seed: u64,
) -> Result<GeneratedVideo> {
    let inst = AdapterInstance::new(adapter, adapter_ps, pose_images)?;
    planner.sample(planner_ps, sched, cond, steps, w_text, w_img, seed, Some(&inst))
}

/// Trains the adapter through the frozen planner with the noise-prediction
/// objective; pose images come from ground-truth poses. Returns the trained
/// adapter parameters. The planner parameters are asserted unchanged.
pub fn train_posectrl<T: Scalar>(
    index: &DatasetIndex,
    root: &Path,
    cfg: &PipelineConfig,
    planner_ps: &ParamStore<T>,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<(ParamStore<T>, Vec<TrainRecord>)> {
    let planner = VideoPlanner::new(cfg)?;
    let adapter = PoseAdapter::new(cfg)?;
    let sched = DiffusionSchedule::<T>::new(cfg.schedule)?;
    let spec = DrawSpec::from_config(cfg);
    let entries = index.split(Split::Train);
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    struct Example<T: Scalar> {
        latents: Arr<T>,
        pose_images: Arr<T>,
        cond: ConditioningBundle,
    }
    let examples: Vec<Example<T>> = entries
        .iter()
        .map(|entry| {
            let e = corpus::read_episode(&root.join(&entry.path))?;
            Ok(Example {
                latents: encode_frames::<T>(&e.frames),
                pose_images: render_pose_images::<T>(&e.poses, spec, planner.h, planner.w)?,
                cond: ConditioningBundle::for_episode(&e),
            })
        })
        .collect::<Result<_>>()?;

    let before = planner_ps.to_blobs();
    let mut ps = adapter.init_params::<T>(seed);
    let mut opt = Adam::new(cfg.posectrl.lr);
    let ccfg = &cfg.posectrl;
    let drop_p = cfg.planner.cond_drop;
    let mut records = Vec::with_capacity(ccfg.train_steps);
    for step in 0..ccfg.train_steps {
        let mut r = rng::seeded(rng::derive_index(seed, "posectrl.train", step as u64));
        let mut batch_ids = Vec::with_capacity(ccfg.batch);
        let mut grads_sum: HashMap<String, Arr<T>> = HashMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..ccfg.batch {
            use rand::Rng;
            let idx = r.gen_range(0..examples.len());
            batch_ids.push(idx as u64);
            let t = r.gen_range(1..=sched.t_max());
            let noise: Arr<T> = normal_arr(&mut r, examples[idx].latents.shape());
            let drop_text = r.gen::<f64>() < drop_p;
            let drop_img = r.gen::<f64>() < drop_p;
            let cond = examples[idx].cond.with_nulls(drop_text, drop_img);

            let z_t = diffusion::forward_diffuse(&examples[idx].latents, t, &noise, &sched)?;
            let mut g = Graph::new();
            let bd_planner = bind_constant(&mut g, planner_ps);
            let bd_adapter = bind(&mut g, &ps);
            let z = g.constant(z_t);
            let inst = AdapterInstance::new(&adapter, &ps, &examples[idx].pose_images)?;
            let inj = inst.build(&mut g, &bd_adapter, z, t);
            let (env, ctx, temb) = planner.conditioning_vars(&mut g, &bd_planner, &cond, t)?;
            let eps_hat = planner.denoise(&mut g, &bd_planner, z, env, ctx, temb, Some(&inj));
            let target = g.constant(noise);
            let loss = g.mse(eps_hat, target);
            loss_sum += g.value(loss)[[0]].to_f64_c();
            g.backward(loss);
            for (name, grad) in collect_grads(&mut g, &bd_adapter) {
                match grads_sum.get_mut(&name) {
                    Some(acc) => *acc += &grad,
                    None => {
                        grads_sum.insert(name, grad);
                    }
                }
            }
        }
        let loss = loss_sum / ccfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::TrainDiverged {
                step,
                lr: ccfg.lr,
                batch: batch_ids,
                loss,
            });
        }
        ps.zero_grads();
        ps.accumulate(&grads_sum, T::from_f64_c(1.0 / ccfg.batch as f64));
        opt.step(&mut ps);
        records.push(TrainRecord {
            step,
            loss,
            lr: ccfg.lr,
        });
    }

    // The planner must not have moved at all.
    for ((name, _, before_data), (_, _, after_data)) in
        before.iter().zip(planner_ps.to_blobs().iter())
    {
        for (a, b) in before_data.iter().zip(after_data.iter()) {
            if a.to_bits() != b.to_bits() {
                return Err(Error::FrozenParamChanged {
                    name: name.clone(),
                    delta: f64::from((a - b).abs()),
                });
            }
        }
    }

    if let Some(path) = log_path {
        crate::planner::write_loss_csv(path, &records)?;
    }
    Ok((ps, records))
}

// ---- full pipeline ----

/// Everything one end-to-end run produces.
pub struct PipelineArtifacts {
    pub coarse: GeneratedVideo,
    /// Poses extracted from the coarse video, at video length.
    pub extracted: PoseSequence,
    /// Refined poses, back at video length.
    pub refined: PoseSequence,
    pub fine: GeneratedVideo,
    pub manifest: RunManifest,
}

/// All three trained models plus the shared configuration.
pub struct PipelineModels<'a, T: Scalar> {
    pub cfg: &'a PipelineConfig,
    pub planner_ps: &'a ParamStore<T>,
    pub mdm_ps: &'a ParamStore<T>,
    pub adapter_ps: &'a ParamStore<T>,
}

fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex(&h.finalize())
}

fn frames_bytes(v: &Array4<u8>) -> &[u8] {
    v.as_slice().expect("frames are contiguous")
}

fn pose_bytes(p: &PoseSequence) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(p.coords.len() * 4 + p.validity.len());
    for v in p.coords.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend(p.validity.iter().map(|&b| b as u8));
    bytes
}

/// Runs Stage I -> pose extraction -> Stage II refinement -> Stage III
/// regeneration for one environment/instruction pair, and assembles the
/// manifest that makes the run reproducible. `checkpoints` is recorded
/// verbatim in the manifest. With `out_dir` set, all intermediates are
/// persisted there.
pub fn run_pipeline<T: Scalar>(
    models: &PipelineModels<'_, T>,
    cond: &ConditioningBundle,
    n_rv: usize,
    master_seed: u64,
    checkpoints: std::collections::BTreeMap<String, crate::manifest::CheckpointRef>,
    out_dir: Option<&Path>,
) -> Result<PipelineArtifacts> {
    let cfg = models.cfg;
    let planner = VideoPlanner::new(cfg)?;
    let refiner = MotionRefiner::new(cfg)?;
    let adapter = PoseAdapter::new(cfg)?;
    let sched = DiffusionSchedule::<T>::new(cfg.schedule)?;
    let spec = DrawSpec::from_config(cfg);
    let mut manifest = RunManifest::new(master_seed, &cfg.content_hash()?, n_rv);
    manifest.checkpoints = checkpoints;

    let coarse_seed = rng::derive(master_seed, "pipeline.coarse");
    let t0 = Instant::now();
    let coarse = planner
        .generate_coarse(
            models.planner_ps,
            &sched,
            cond,
            cfg.planner.sample_steps,
            cfg.planner.w_text,
            cfg.planner.w_img,
            coarse_seed,
        )
        .map_err(|e| stage_error("coarse", e))?;
    manifest.stages.insert(
        "coarse".into(),
        StageRecord { seed: coarse_seed, wall_clock_secs: t0.elapsed().as_secs_f64() },
    );

    let refine_seed = rng::derive(master_seed, "pipeline.refine");
    let t1 = Instant::now();
    let extracted = motion::extract_pose(&coarse.frames).map_err(|e| stage_error("refine", e))?;
    let p_c = motion::resample_pose(&extracted, refiner.l_p).map_err(|e| stage_error("refine", e))?;
    let rcfg = RefinementConfig { n_rv, sample_steps: cfg.motion.sample_steps };
    let refined_lp = refiner
        .refine_pose(&p_c, cond, models.mdm_ps, &sched, rcfg, refine_seed)
        .map_err(|e| stage_error("refine", e))?;
    let refined = motion::resample_pose(&refined_lp, planner.l).map_err(|e| stage_error("refine", e))?;
    manifest.stages.insert(
        "refine".into(),
        StageRecord { seed: refine_seed, wall_clock_secs: t1.elapsed().as_secs_f64() },
    );

    let fine_seed = rng::derive(master_seed, "pipeline.fine");
    let t2 = Instant::now();
    let pose_images = render_pose_images::<T>(&refined, spec, planner.h, planner.w)
        .map_err(|e| stage_error("fine", e))?;
    let fine = generate_fine(
        &planner,
        models.planner_ps,
        &adapter,
        models.adapter_ps,
        &sched,
        cond,
        &pose_images,
        cfg.planner.sample_steps,
        cfg.planner.w_text,
        cfg.planner.w_img,
        fine_seed,
    )
    .map_err(|e| stage_error("fine", e))?;
    manifest.stages.insert(
        "fine".into(),
        StageRecord { seed: fine_seed, wall_clock_secs: t2.elapsed().as_secs_f64() },
    );

    manifest
        .artifacts
        .insert("video_coarse".into(), sha256_bytes(frames_bytes(&coarse.frames)));
    manifest
        .artifacts
        .insert("video_fine".into(), sha256_bytes(frames_bytes(&fine.frames)));
    manifest
        .artifacts
        .insert("pose_extracted".into(), sha256_bytes(&pose_bytes(&extracted)));
    manifest
        .artifacts
        .insert("pose_refined".into(), sha256_bytes(&pose_bytes(&refined)));
    let poseimg_bytes: Vec<u8> = pose_images
        .iter()
        .flat_map(|v| (v.to_f64_c() as f32).to_le_bytes())
        .collect();
    manifest
        .artifacts
        .insert("pose_images".into(), sha256_bytes(&poseimg_bytes));

    // Cheap self-metrics: how well the fine video honors its own pose
    // condition, and whether the instructed object is the one that moved.
    let fine_pose = motion::extract_pose(&fine.frames)?;
    if let Some(adh) = crate::metrics::pose_adherence(
        &refined,
        &fine_pose,
        cfg.eval.adherence_px,
        planner.h,
        planner.w,
    )? {
        manifest.metrics.insert("pose_adherence".into(), adh);
    }
    if !cond.null_text {
        if let Ok(instr) = crate::corpus::Instruction::from_tokens(cond.text_tokens) {
            let ok = crate::metrics::grounding_correct(&fine.frames, &instr);
            manifest
                .metrics
                .insert("grounding_correct".into(), if ok { 1.0 } else { 0.0 });
        }
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        std::fs::write(dir.join("frames_coarse.bin"), frames_bytes(&coarse.frames))
            .map_err(|e| Error::io(dir.join("frames_coarse.bin"), e))?;
        std::fs::write(dir.join("frames_fine.bin"), frames_bytes(&fine.frames))
            .map_err(|e| Error::io(dir.join("frames_fine.bin"), e))?;
        corpus::write_pose_files(&extracted, &dir.join("pose_extracted"))?;
        corpus::write_pose_files(&refined, &dir.join("pose_refined"))?;
        std::fs::write(dir.join("poseimg.bin"), &poseimg_bytes)
            .map_err(|e| Error::io(dir.join("poseimg.bin"), e))?;
        manifest.save(&dir.join("run.json"))?;
    }

    Ok(PipelineArtifacts { coarse, extracted, refined, fine, manifest })
}

fn stage_error(stage: &str, e: Error) -> Error {
    Error::contract(format!("pipeline stage '{stage}': {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn spec() -> DrawSpec {
        DrawSpec { r_kp: 1.0, w_bone: 1.0 }
    }

    fn single_point_pose(x: f32, y: f32) -> PoseSequence {
        let mut coords = Array3::<f32>::zeros((2, N_KEYPOINTS, 2));
        let mut validity = Array2::from_elem((2, N_KEYPOINTS), false);
        coords[[0, 0, 0]] = x;
        coords[[0, 0, 1]] = y;
        validity[[0, 0]] = true;
        PoseSequence::new(coords, validity).unwrap()
    }

    #[test]
    fn empty_validity_renders_black() {
        let coords = Array3::<f32>::zeros((2, N_KEYPOINTS, 2));
        let validity = Array2::from_elem((2, N_KEYPOINTS), false);
        let p = PoseSequence::new(coords, validity).unwrap();
        let img = render_pose_images::<f32>(&p, spec(), 32, 32).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_keypoint_renders_centered_blob() {
        let p = single_point_pose(0.5, 0.5);
        let img = render_pose_images::<f32>(&p, spec(), 33, 33).unwrap();
        // 0.5 * 32 = pixel 16 exactly.
        assert!(img[[0, 0, 16, 16]] >= 0.5);
        let best = (0..33)
            .flat_map(|y| (0..33).map(move |x| (y, x)))
            .max_by(|a, b| {
                img[[0, 0, a.0, a.1]]
                    .partial_cmp(&img[[0, 0, b.0, b.1]])
                    .unwrap()
            })
            .unwrap();
        assert_eq!(best, (16, 16));
        // Frame without the keypoint stays black.
        assert!(img.index_axis(ndarray::Axis(0), 1).iter().all(|&v| v == 0.0));
        assert!(img.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rendering_is_translation_equivariant_for_integer_offsets() {
        // 33x33 puts pixel centers at k/32; these coordinates are exactly
        // representable, so equal coverage must be bit-equal.
        let h = 33;
        let base = single_point_pose(10.0 / 32.0, 12.0 / 32.0);
        let shifted = single_point_pose(14.0 / 32.0, 17.0 / 32.0);
        let a = render_pose_images::<f32>(&base, spec(), h, h).unwrap();
        let b = render_pose_images::<f32>(&shifted, spec(), h, h).unwrap();
        // Compare the interior windows around each center.
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let ay = (12 + dy) as usize;
                let ax = (10 + dx) as usize;
                let by = (17 + dy) as usize;
                let bx = (14 + dx) as usize;
                assert_eq!(a[[0, 0, ay, ax]], b[[0, 0, by, bx]], "offset {dy},{dx}");
            }
        }
    }

    #[test]
    fn adapter_starts_inert_and_injections_are_zero() {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.image_size = 16;
        cfg.corpus.frames = 3;
        cfg.planner.base_channels = 8;
        cfg.planner.ctx_dim = 16;
        let adapter = PoseAdapter::new(&cfg).unwrap();
        let ps = adapter.init_params::<f32>(3);
        assert!(adapter.is_inert(&ps));

        let mut r = rng::seeded(5);
        let imgs: Arr<f32> = {
            let mut a = normal_arr::<f32>(&mut r, &[3, 1, 16, 16]);
            a.mapv_inplace(f32::abs);
            a
        };
        let inst = AdapterInstance::new(&adapter, &ps, &imgs).unwrap();
        let mut g = Graph::<f32>::new();
        let z = {
            let zv = normal_arr::<f32>(&mut r, &[3, 3, 16, 16]);
            g.constant(zv)
        };
        let inj = inst.inject(&mut g, z, 7).unwrap();
        for v in inj {
            assert!(g.value(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pose_image_shape_mismatch_is_rejected() {
        let cfg = {
            let mut c = PipelineConfig::default();
            c.corpus.image_size = 16;
            c.corpus.frames = 3;
            c.planner.base_channels = 8;
            c.planner.ctx_dim = 16;
            c
        };
        let adapter = PoseAdapter::new(&cfg).unwrap();
        let ps = adapter.init_params::<f32>(3);
        let imgs = Arr::<f32>::zeros(IxDyn(&[3, 1, 32, 32]));
        assert!(AdapterInstance::new(&adapter, &ps, &imgs).is_err());
    }

    #[test]
    fn draw_spec_bounds_are_enforced() {
        assert!(DrawSpec { r_kp: 0.5, w_bone: 1.0 }.validate().is_err());
        assert!(DrawSpec { r_kp: 1.0, w_bone: -0.1 }.validate().is_err());
        assert!(DrawSpec { r_kp: 1.0, w_bone: 0.0 }.validate().is_ok());
    }
}
