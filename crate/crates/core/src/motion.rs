//! Stage II: the hand-motion refiner.
//!
//! A small transformer over pose-sequence tokens, trained to predict the
//! clean sequence directly (not the noise). Sampling therefore alternates
//! "predict clean" and "re-noise to the next chain position" with fresh
//! noise each step. The same loop, entered part-way down the chain with an
//! extracted coarse pose sequence standing in for the clean estimate, gives
//! partial refinement: small step budgets stay anchored to the input, large
//! ones approach free sampling.

use std::collections::HashMap;

use ndarray::{Array2, Array3, Axis, IxDyn};

use crate::config::PipelineConfig;
use crate::corpus::skeleton::{PoseSequence, N_KEYPOINTS};
use crate::corpus::{self, DatasetIndex, Split, INSTRUCTION_TOKENS, NULL_TOKEN, VOCAB_SIZE};
use crate::diffusion::{self, DiffusionSchedule};
use crate::graph::{Graph, Var};
use crate::nn::{bind, collect_grads, Adam, Attention, Bound, Conv, LayerNorm, Linear, ParamStore};
use crate::planner::{ConditioningBundle, TrainRecord};
use crate::rng::{self, normal_arr};
use crate::{Arr, Error, Result, Scalar};

/// Flattened pose dimension per frame: 21 keypoints × (x, y).
pub const POSE_DIM: usize = N_KEYPOINTS * 2;
const HEADS: usize = 4;

/// Partial-refinement settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementConfig {
    /// Number of denoising steps to apply; 0 leaves the input untouched,
    /// the full sampler step count ignores the input entirely.
    pub n_rv: usize,
    /// Length of the sampler's step schedule.
    pub sample_steps: usize,
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rv > self.sample_steps {
            return Err(Error::contract(format!(
                "refinement steps {} exceed the {}-step schedule",
                self.n_rv, self.sample_steps
            )));
        }
        Ok(())
    }
}

/// Motion-refiner dimensions; all state lives in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MotionRefiner {
    pub width: usize,
    pub blocks: usize,
    /// Temporal length the model is sampled at.
    pub l_p: usize,
    /// Environment image edge (for the image-condition encoder).
    pub img: usize,
}

impl MotionRefiner {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let m = &cfg.motion;
        if m.width % HEADS != 0 || m.width % 2 != 0 {
            return Err(Error::contract(format!(
                "motion width {} must be even and divisible by {HEADS} heads",
                m.width
            )));
        }
        if m.heads != HEADS {
            return Err(Error::contract(format!(
                "motion refiner is built for {HEADS} heads, config says {}",
                m.heads
            )));
        }
        if cfg.corpus.image_size % 4 != 0 {
            return Err(Error::contract("image size must be a multiple of 4"));
        }
        Ok(MotionRefiner {
            width: m.width,
            blocks: m.blocks,
            l_p: m.l_p,
            img: cfg.corpus.image_size,
        })
    }

    fn in_proj(&self) -> Linear {
        Linear::new("mdm.in", POSE_DIM, self.width)
    }
    fn temb(&self) -> Linear {
        Linear::new("mdm.temb", self.width, self.width)
    }
    fn env1(&self) -> Conv {
        Conv::new("mdm.env1", 3, 8, 3, 2)
    }
    fn env2(&self) -> Conv {
        Conv::new("mdm.env2", 8, 8, 3, 2)
    }
    fn env_proj(&self) -> Linear {
        Linear::new("mdm.env_proj", 8 * (self.img / 4) * (self.img / 4), self.width)
    }
    fn block_norm1(&self, i: usize) -> LayerNorm {
        LayerNorm::new(format!("mdm.b{i}.n1"), self.width)
    }
    fn block_attn(&self, i: usize) -> Attention {
        Attention::new(format!("mdm.b{i}.attn"), self.width, self.width, HEADS)
    }
    fn block_norm2(&self, i: usize) -> LayerNorm {
        LayerNorm::new(format!("mdm.b{i}.n2"), self.width)
    }
    fn block_ff1(&self, i: usize) -> Linear {
        Linear::new(format!("mdm.b{i}.ff1"), self.width, 2 * self.width)
    }
    fn block_ff2(&self, i: usize) -> Linear {
        Linear::new(format!("mdm.b{i}.ff2"), 2 * self.width, self.width)
    }
    fn out_norm(&self) -> LayerNorm {
        LayerNorm::new("mdm.out_norm", self.width)
    }
    fn out_proj(&self) -> Linear {
        Linear::new("mdm.out", self.width, POSE_DIM)
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut ps = ParamStore::new();
        let mut r = rng::seeded(rng::derive(seed, "mdm.init"));
        let emb_std = (1.0 / self.width as f64).sqrt();
        let mut text = normal_arr::<T>(&mut r, &[VOCAB_SIZE, self.width]);
        text.mapv_inplace(|v| v * T::from_f64_c(emb_std));
        ps.insert("mdm.text_embed", text);
        let mut null_img = normal_arr::<T>(&mut r, &[1, self.width]);
        null_img.mapv_inplace(|v| v * T::from_f64_c(emb_std));
        ps.insert("mdm.null_img", null_img);
        self.in_proj().init(&mut ps, &mut r);
        self.temb().init(&mut ps, &mut r);
        self.env1().init(&mut ps, &mut r);
        self.env2().init(&mut ps, &mut r);
        self.env_proj().init(&mut ps, &mut r);
        for i in 0..self.blocks {
            self.block_norm1(i).init(&mut ps);
            self.block_attn(i).init(&mut ps, &mut r);
            self.block_norm2(i).init(&mut ps);
            self.block_ff1(i).init(&mut ps, &mut r);
            self.block_ff2(i).init(&mut ps, &mut r);
        }
        self.out_norm().init(&mut ps);
        self.out_proj().init(&mut ps, &mut r);
        ps
    }

    /// Condition token: step embedding + text embedding + image embedding,
    /// summed into one `[1, width]` vector.
    fn condition_token<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        cond: &ConditioningBundle,
        t: usize,
    ) -> Result<Var> {
        cond.validate(self.img, self.img)?;
        let sin = g.constant(crate::nn::sinusoidal::<T>(t as f64, self.width, 10_000.0));
        let te = self.temb().apply(g, bd, sin);
        let te = g.silu(te);

        let ids: Vec<usize> = if cond.null_text {
            vec![NULL_TOKEN as usize; INSTRUCTION_TOKENS]
        } else {
            cond.text_tokens.iter().map(|&v| v as usize).collect()
        };
        let table = bd.var("mdm.text_embed");
        let rows = g.gather_rows(table, ids); // [4, width]
        let rows = g.reshape(rows, &[1, INSTRUCTION_TOKENS, self.width]);
        // Sum the four token embeddings into one vector.
        let mut text = g.narrow(rows, 1, 0, 1);
        for k in 1..INSTRUCTION_TOKENS {
            let part = g.narrow(rows, 1, k, 1);
            text = g.add(text, part);
        }
        let text = g.reshape(text, &[1, self.width]);

        let img = if cond.null_image {
            bd.var("mdm.null_img")
        } else {
            let e0 = g.constant(crate::planner::encode_frame::<T>(&cond.env_image));
            let e1 = self.env1().apply(g, bd, e0);
            let e1 = g.silu(e1);
            let e2 = self.env2().apply(g, bd, e1);
            let e2 = g.silu(e2);
            let flat = g.reshape(e2, &[1, 8 * (self.img / 4) * (self.img / 4)]);
            self.env_proj().apply(g, bd, flat)
        };

        let sum = g.add(te, text);
        Ok(g.add(sum, img))
    }

    /// Predicts the clean pose sequence from a noised one.
    ///
    /// `p_t`: `[L_p, POSE_DIM]` -> `[L_p, POSE_DIM]`. Works for any length,
    /// not just the configured one; position features are computed on the
    /// fly.
    pub fn predict_clean_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        p_t: Var,
        cond: &ConditioningBundle,
        t: usize,
    ) -> Result<Var> {
        let l = g.value(p_t).shape()[0];
        let ct = self.condition_token(g, bd, cond, t)?;
        let x = self.in_proj().apply(g, bd, p_t); // [L, width]

        // Fixed sinusoidal frame positions.
        let mut pos = Arr::<T>::zeros(IxDyn(&[l, self.width]));
        for f in 0..l {
            let row = crate::nn::sinusoidal::<T>(f as f64, self.width, 10_000.0);
            pos.index_axis_mut(Axis(0), f)
                .assign(&row.index_axis(Axis(0), 0));
        }
        let pos = g.constant(pos);
        let x = g.add(x, pos);

        // Prepend the condition token.
        let x = g.concat(0, &[ct, x]); // [1+L, width]
        let mut seq = g.reshape(x, &[1, 1 + l, self.width]);
        for i in 0..self.blocks {
            let n1 = self.block_norm1(i).apply(g, bd, seq);
            let a = self.block_attn(i).apply(g, bd, n1, n1);
            seq = g.add(seq, a);
            let n2 = self.block_norm2(i).apply(g, bd, seq);
            let n2 = g.reshape(n2, &[1 + l, self.width]);
            let f1 = self.block_ff1(i).apply(g, bd, n2);
            let f1 = g.silu(f1);
            let f2 = self.block_ff2(i).apply(g, bd, f1);
            let f2 = g.reshape(f2, &[1, 1 + l, self.width]);
            seq = g.add(seq, f2);
        }
        let body = g.narrow(seq, 1, 1, l); // drop the condition slot
        let body = g.reshape(body, &[l, self.width]);
        let body = self.out_norm().apply(g, bd, body);
        Ok(self.out_proj().apply(g, bd, body))
    }

    /// Clean-sequence prediction outside a training graph, clamped to the
    /// coordinate range.
    fn predict_clean<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        p_t: &Arr<T>,
        cond: &ConditioningBundle,
        t: usize,
    ) -> Result<Arr<T>> {
        let mut g = Graph::new();
        let bd = bind(&mut g, ps);
        let p = g.constant(p_t.clone());
        let out = self.predict_clean_graph(&mut g, &bd, p, cond, t)?;
        let mut v = g.value(out).clone();
        v.mapv_inplace(|x| x.max(T::zero()).min(T::one()));
        Ok(v)
    }

    /// Full-chain sampling: predict clean, re-noise to the next position
    /// with fresh noise, repeat down the whole schedule.
    pub fn sample_motion<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sched: &DiffusionSchedule<T>,
        cond: &ConditioningBundle,
        sample_steps: usize,
        seed: u64,
    ) -> Result<PoseSequence> {
        let ts = sched.sample_timesteps(sample_steps)?;
        let mut r = rng::seeded(rng::derive(seed, "mdm.sample"));
        let mut p: Arr<T> = normal_arr(&mut r, &[self.l_p, POSE_DIM]);
        for k in (0..ts.len()).rev() {
            let clean = self.predict_clean(ps, &p, cond, ts[k])?;
            if k == 0 {
                p = clean;
            } else {
                let noise: Arr<T> = normal_arr(&mut r, &[self.l_p, POSE_DIM]);
                p = diffusion::renoise(&clean, ts[k - 1], &noise, sched)?;
            }
        }
        arr_to_pose(&p, None)
    }

    /// Partial refinement: the input sequence is treated as the clean
    /// estimate already reached at chain position `n_rv`, re-noised there,
    /// and denoised the rest of the way. Invalid entries are filled by
    /// temporal interpolation first; the validity mask passes through.
    pub fn refine_pose<T: Scalar>(
        &self,
        p_c: &PoseSequence,
        cond: &ConditioningBundle,
        ps: &ParamStore<T>,
        sched: &DiffusionSchedule<T>,
        rcfg: RefinementConfig,
        seed: u64,
    ) -> Result<PoseSequence> {
        rcfg.validate()?;
        let l = p_c.coords.dim().0;
        if l != self.l_p {
            return Err(Error::contract(format!(
                "refiner expects {} frames, got {l}; resample first",
                self.l_p
            )));
        }
        if rcfg.n_rv == 0 {
            return Ok(p_c.clone());
        }
        let filled = interpolate_invalid(p_c);
        let ts = sched.sample_timesteps(rcfg.sample_steps)?;
        let mut r = rng::seeded(rng::derive(seed, "mdm.refine"));
        let mut p = pose_to_arr::<T>(&filled);
        let start = rcfg.n_rv - 1; // chain position n_rv, 1-based
        let noise: Arr<T> = normal_arr(&mut r, &[self.l_p, POSE_DIM]);
        p = diffusion::renoise(&p, ts[start], &noise, sched)?;
        for k in (0..=start).rev() {
            let clean = self.predict_clean(ps, &p, cond, ts[k])?;
            if k == 0 {
                p = clean;
            } else {
                let noise: Arr<T> = normal_arr(&mut r, &[self.l_p, POSE_DIM]);
                p = diffusion::renoise(&clean, ts[k - 1], &noise, sched)?;
            }
        }
        arr_to_pose(&p, Some(p_c.validity.clone()))
    }
}

// ---- pose <-> array ----

pub fn pose_to_arr<T: Scalar>(p: &PoseSequence) -> Arr<T> {
    let (l, n, _) = p.coords.dim();
    let mut out = Arr::zeros(IxDyn(&[l, n * 2]));
    for f in 0..l {
        for k in 0..n {
            out[[f, 2 * k]] = T::from_f64_c(f64::from(p.coords[[f, k, 0]]));
            out[[f, 2 * k + 1]] = T::from_f64_c(f64::from(p.coords[[f, k, 1]]));
        }
    }
    out
}

/// `[L, POSE_DIM]` array to a pose sequence, clamping coordinates into
/// `[0, 1]`. Without a mask everything is marked valid.
pub fn arr_to_pose<T: Scalar>(a: &Arr<T>, validity: Option<Array2<bool>>) -> Result<PoseSequence> {
    if a.ndim() != 2 || a.shape()[1] != POSE_DIM {
        return Err(Error::contract(format!(
            "pose array must be [L, {POSE_DIM}], got {:?}",
            a.shape()
        )));
    }
    let l = a.shape()[0];
    let mut coords = Array3::<f32>::zeros((l, N_KEYPOINTS, 2));
    for f in 0..l {
        for k in 0..N_KEYPOINTS {
            coords[[f, k, 0]] = a[[f, 2 * k]].to_f64_c().clamp(0.0, 1.0) as f32;
            coords[[f, k, 1]] = a[[f, 2 * k + 1]].to_f64_c().clamp(0.0, 1.0) as f32;
        }
    }
    let validity = validity.unwrap_or_else(|| Array2::from_elem((l, N_KEYPOINTS), true));
    PoseSequence::new(coords, validity)
}

/// Fills invalid entries by per-keypoint linear interpolation between the
/// nearest valid frames (nearest valid value at the ends, mid-frame 0.5 for
/// keypoints that are never valid). Output validity is all true.
pub fn interpolate_invalid(p: &PoseSequence) -> PoseSequence {
    let (l, n, _) = p.coords.dim();
    let mut coords = p.coords.clone();
    for k in 0..n {
        let valid_frames: Vec<usize> = (0..l).filter(|&f| p.validity[[f, k]]).collect();
        if valid_frames.is_empty() {
            for f in 0..l {
                coords[[f, k, 0]] = 0.5;
                coords[[f, k, 1]] = 0.5;
            }
            continue;
        }
        for f in 0..l {
            if p.validity[[f, k]] {
                continue;
            }
            let next = valid_frames.iter().copied().find(|&v| v > f);
            let prev = valid_frames.iter().copied().rev().find(|&v| v < f);
            let (c0, c1) = match (prev, next) {
                (Some(a), Some(b)) => {
                    let w = (f - a) as f32 / (b - a) as f32;
                    (
                        p.coords[[a, k, 0]] * (1.0 - w) + p.coords[[b, k, 0]] * w,
                        p.coords[[a, k, 1]] * (1.0 - w) + p.coords[[b, k, 1]] * w,
                    )
                }
                (Some(a), None) => (p.coords[[a, k, 0]], p.coords[[a, k, 1]]),
                (None, Some(b)) => (p.coords[[b, k, 0]], p.coords[[b, k, 1]]),
                (None, None) => unreachable!("non-empty valid_frames"),
            };
            coords[[f, k, 0]] = c0;
            coords[[f, k, 1]] = c1;
        }
    }
    let validity = Array2::from_elem((l, n), true);
    PoseSequence::new(coords, validity).expect("interpolation stays in range")
}

/// Linear temporal resampling to `l_target` frames; endpoints map exactly,
/// validity follows the nearest source frame.
pub fn resample_pose(p: &PoseSequence, l_target: usize) -> Result<PoseSequence> {
    let (l, n, _) = p.coords.dim();
    if l_target < 2 {
        return Err(Error::contract("resample target must be at least 2 frames"));
    }
    if l_target == l {
        return Ok(p.clone());
    }
    let mut coords = Array3::<f32>::zeros((l_target, n, 2));
    let mut validity = Array2::from_elem((l_target, n), false);
    for f in 0..l_target {
        let src = f as f64 * (l - 1) as f64 / (l_target - 1) as f64;
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(l - 1);
        let w = (src - lo as f64) as f32;
        let nearest = src.round() as usize;
        for k in 0..n {
            for a in 0..2 {
                coords[[f, k, a]] =
                    p.coords[[lo, k, a]] * (1.0 - w) + p.coords[[hi, k, a]] * w;
            }
            validity[[f, k]] = p.validity[[nearest, k]];
        }
    }
    PoseSequence::new(coords, validity)
}

/// Keypoint extraction from a generated video via the reserved-color
/// tracker.
pub fn extract_pose(frames: &ndarray::Array4<u8>) -> Result<PoseSequence> {
    crate::metrics::extract_pose_sequence(frames)
}

// ---- training ----

struct MotionExample<T: Scalar> {
    p0: Arr<T>,
    cond: ConditioningBundle,
}

/// Trains the refiner with the clean-sequence objective and condition
/// dropout. Ground-truth pose sequences are resampled to the configured
/// length. Deterministic in `seed`.
pub fn train_mdm<T: Scalar>(
    index: &DatasetIndex,
    root: &std::path::Path,
    cfg: &PipelineConfig,
    seed: u64,
    log_path: Option<&std::path::Path>,
) -> Result<(ParamStore<T>, Vec<TrainRecord>)> {
    let model = MotionRefiner::new(cfg)?;
    let sched = DiffusionSchedule::<T>::new(cfg.schedule)?;
    let entries = index.split(Split::Train);
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let examples: Vec<MotionExample<T>> = entries
        .iter()
        .map(|entry| {
            let e = corpus::read_episode(&root.join(&entry.path))?;
            let p = resample_pose(&e.poses, model.l_p)?;
            Ok(MotionExample {
                p0: pose_to_arr::<T>(&p),
                cond: ConditioningBundle::for_episode(&e),
            })
        })
        .collect::<Result<_>>()?;

    let mut ps = model.init_params::<T>(seed);
    let mut opt = Adam::new(cfg.motion.lr);
    let mcfg = &cfg.motion;
    let mut records = Vec::with_capacity(mcfg.train_steps);
    for step in 0..mcfg.train_steps {
        let mut r = rng::seeded(rng::derive_index(seed, "mdm.train", step as u64));
        let mut batch_ids = Vec::with_capacity(mcfg.batch);
        let mut grads_sum: HashMap<String, Arr<T>> = HashMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..mcfg.batch {
            use rand::Rng;
            let idx = r.gen_range(0..examples.len());
            batch_ids.push(idx as u64);
            let t = r.gen_range(1..=sched.t_max());
            let noise: Arr<T> = normal_arr(&mut r, examples[idx].p0.shape());
            let drop_text = r.gen::<f64>() < mcfg.cond_drop;
            let drop_img = r.gen::<f64>() < mcfg.cond_drop;
            let cond = examples[idx].cond.with_nulls(drop_text, drop_img);

            let p_t = diffusion::forward_diffuse(&examples[idx].p0, t, &noise, &sched)?;
            let mut g = Graph::new();
            let bd = bind(&mut g, &ps);
            let pt = g.constant(p_t);
            let pred = model.predict_clean_graph(&mut g, &bd, pt, &cond, t)?;
            let target = g.constant(examples[idx].p0.clone());
            let loss = g.mse(pred, target);
            loss_sum += g.value(loss)[[0]].to_f64_c();
            g.backward(loss);
            for (name, grad) in collect_grads(&mut g, &bd) {
                match grads_sum.get_mut(&name) {
                    Some(acc) => *acc += &grad,
                    None => {
                        grads_sum.insert(name, grad);
                    }
                }
            }
        }
        let loss = loss_sum / mcfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::TrainDiverged {
                step,
                lr: mcfg.lr,
                batch: batch_ids,
                loss,
            });
        }
        ps.zero_grads();
        ps.accumulate(&grads_sum, T::from_f64_c(1.0 / mcfg.batch as f64));
        opt.step(&mut ps);
        records.push(TrainRecord {
            step,
            loss,
            lr: mcfg.lr,
        });
    }
    if let Some(path) = log_path {
        crate::planner::write_loss_csv(path, &records)?;
    }
    Ok((ps, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3 as NdArray3;

    fn tiny_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.corpus.image_size = 16;
        cfg.motion.width = 32;
        cfg.motion.blocks = 2;
        cfg.motion.l_p = 6;
        cfg.schedule.steps = 40;
        cfg.motion.sample_steps = 8;
        cfg
    }

    fn cond(img: usize, seed: u64) -> ConditioningBundle {
        use rand::Rng;
        let mut r = rng::seeded(seed);
        let mut env = NdArray3::<u8>::zeros((img, img, 3));
        env.mapv_inplace(|_| r.gen());
        ConditioningBundle {
            text_tokens: [1, 5, 9, 14],
            env_image: env,
            fps_tag: 0,
            null_text: false,
            null_image: false,
        }
    }

    fn ramp_pose(l: usize) -> PoseSequence {
        let mut coords = Array3::<f32>::zeros((l, N_KEYPOINTS, 2));
        for f in 0..l {
            for k in 0..N_KEYPOINTS {
                coords[[f, k, 0]] = f as f32 / (l - 1) as f32;
                coords[[f, k, 1]] = k as f32 / (2 * N_KEYPOINTS) as f32;
            }
        }
        PoseSequence::new(coords, Array2::from_elem((l, N_KEYPOINTS), true)).unwrap()
    }

    #[test]
    fn predictor_output_shape_and_determinism() {
        let cfg = tiny_cfg();
        let model = MotionRefiner::new(&cfg).unwrap();
        let sched = DiffusionSchedule::<f32>::new(cfg.schedule).unwrap();
        let ps = model.init_params::<f32>(7);
        let c = cond(model.img, 3);
        let a = model.sample_motion(&ps, &sched, &c, 8, 5).unwrap();
        let b = model.sample_motion(&ps, &sched, &c, 8, 5).unwrap();
        let d = model.sample_motion(&ps, &sched, &c, 8, 6).unwrap();
        assert_eq!(a.coords, b.coords);
        assert_ne!(a.coords, d.coords);
        assert_eq!(a.coords.dim(), (model.l_p, N_KEYPOINTS, 2));
        // Untrained model output still lands in range (clamp contract).
        assert!(a.coords.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn refine_with_zero_steps_is_identity() {
        let cfg = tiny_cfg();
        let model = MotionRefiner::new(&cfg).unwrap();
        let sched = DiffusionSchedule::<f32>::new(cfg.schedule).unwrap();
        let ps = model.init_params::<f32>(7);
        let p = ramp_pose(model.l_p);
        let rcfg = RefinementConfig { n_rv: 0, sample_steps: 8 };
        let out = model
            .refine_pose::<f32>(&p, &cond(model.img, 3), &ps, &sched, rcfg, 9)
            .unwrap();
        assert_eq!(out.coords, p.coords);
        assert_eq!(out.validity, p.validity);
    }

    #[test]
    fn refine_rejects_oversized_step_budget_and_wrong_length() {
        let cfg = tiny_cfg();
        let model = MotionRefiner::new(&cfg).unwrap();
        let sched = DiffusionSchedule::<f32>::new(cfg.schedule).unwrap();
        let ps = model.init_params::<f32>(7);
        let p = ramp_pose(model.l_p);
        let bad = RefinementConfig { n_rv: 9, sample_steps: 8 };
        assert!(model
            .refine_pose::<f32>(&p, &cond(model.img, 3), &ps, &sched, bad, 9)
            .is_err());
        let wrong_len = ramp_pose(model.l_p + 2);
        let ok = RefinementConfig { n_rv: 2, sample_steps: 8 };
        assert!(model
            .refine_pose::<f32>(&wrong_len, &cond(model.img, 3), &ps, &sched, ok, 9)
            .is_err());
    }

    #[test]
    fn refinement_carries_the_validity_mask() {
        let cfg = tiny_cfg();
        let model = MotionRefiner::new(&cfg).unwrap();
        let sched = DiffusionSchedule::<f32>::new(cfg.schedule).unwrap();
        let ps = model.init_params::<f32>(7);
        let mut p = ramp_pose(model.l_p);
        p.validity[[2, 5]] = false;
        p.validity[[3, 20]] = false;
        let rcfg = RefinementConfig { n_rv: 3, sample_steps: 8 };
        let out = model
            .refine_pose::<f32>(&p, &cond(model.img, 3), &ps, &sched, rcfg, 9)
            .unwrap();
        assert_eq!(out.validity, p.validity);
        assert!(out.coords.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn interpolation_fills_gaps_linearly() {
        let mut p = ramp_pose(5);
        p.validity[[2, 0]] = false;
        p.coords[[2, 0, 0]] = 0.0;
        p.coords[[2, 0, 1]] = 0.0;
        let filled = interpolate_invalid(&p);
        // Frames 1 and 3 carry x = 0.25 and 0.75, so the gap gets 0.5.
        assert!((filled.coords[[2, 0, 0]] - 0.5).abs() < 1e-6);
        assert!(filled.validity.iter().all(|&v| v));

        // A keypoint with no valid frames falls to the frame center.
        let mut q = ramp_pose(4);
        for f in 0..4 {
            q.validity[[f, 7]] = false;
        }
        let filled = interpolate_invalid(&q);
        assert_eq!(filled.coords[[1, 7, 0]], 0.5);
    }

    #[test]
    fn resampling_preserves_linear_ramps_and_endpoints() {
        let p = ramp_pose(4);
        let up = resample_pose(&p, 13).unwrap();
        assert_eq!(up.coords.dim().0, 13);
        for f in 0..13 {
            let expect = f as f32 / 12.0;
            assert!((up.coords[[f, 0, 0]] - expect).abs() < 1e-6, "frame {f}");
        }
        assert_eq!(up.coords[[0, 3, 1]], p.coords[[0, 3, 1]]);
        assert_eq!(up.coords[[12, 3, 1]], p.coords[[3, 3, 1]]);
        let same = resample_pose(&p, 4).unwrap();
        assert_eq!(same.coords, p.coords);

        let down = resample_pose(&up, 4).unwrap();
        for f in 0..4 {
            assert!((down.coords[[f, 0, 0]] - p.coords[[f, 0, 0]]).abs() < 1e-6);
        }
    }

    #[test]
    fn resampling_maps_validity_to_nearest_frame() {
        let mut p = ramp_pose(4);
        p.validity[[1, 2]] = false;
        let up = resample_pose(&p, 7).unwrap();
        // Source positions: 0, 0.5, 1, 1.5, 2, 2.5, 3 -> nearest 0,1,1,2,2,3,3
        // (0.5 rounds up).
        assert!(up.validity[[0, 2]]);
        assert!(!up.validity[[1, 2]]);
        assert!(!up.validity[[2, 2]]);
        assert!(up.validity[[3, 2]]);
    }
}
