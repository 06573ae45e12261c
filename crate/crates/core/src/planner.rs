//! Stage I: the coarse video planner.
//!
//! A small conditional denoiser over per-frame latent grids. The default
//! latent codec is the identity map (pixels scaled to `[-1, 1]`), so at the
//! 32×32 working scale the "latent" is the image itself. Conditioning
//! enters three ways:
//!
//! * the environment image's latent is concatenated to every frame's input
//!   channels,
//! * instruction tokens and an environment embedding form the context
//!   sequence for cross-attention,
//! * the diffusion timestep (plus an fps bucket embedding) modulates
//!   mid-level features through a zero-initialized affine.
//!
//! Temporal structure is handled by a learned per-frame embedding and one
//! attention layer mixing the same spatial position across frames. The
//! sampler is shared with the pose-conditioned stage, which attaches
//! feature injections at the three encoder resolutions.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array3, Array4, Axis, IxDyn};

use crate::config::PipelineConfig;
use crate::corpus::{self, DatasetIndex, Episode, Split, INSTRUCTION_TOKENS, NULL_TOKEN, VOCAB_SIZE};
use crate::diffusion::{self, DiffusionSchedule};
use crate::graph::{Graph, Var};
use crate::nn::{bind, collect_grads, Adam, Attention, Bound, Conv, Film, LayerNorm, Linear, ParamStore};
use crate::rng::{self, normal_arr};
use crate::{Arr, Error, Result, Scalar};

/// Number of attention heads used by both planner attention layers.
const HEADS: usize = 4;
/// Single frame-rate bucket at desk scale; the embedding pathway exists so
/// more buckets are a table resize, not a model change.
pub const FPS_BUCKETS: usize = 1;

// ---- latent codec (identity representation) ----

/// `[L, H, W, 3]` bytes -> `[L, 3, H, W]` latents in `[-1, 1]`.
pub fn encode_frames<T: Scalar>(frames: &Array4<u8>) -> Arr<T> {
    let (l, h, w, c) = frames.dim();
    debug_assert_eq!(c, 3);
    let mut out = Arr::zeros(IxDyn(&[l, c, h, w]));
    for f in 0..l {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[f, ch, y, x]] =
                        T::from_f64_c(f64::from(frames[[f, y, x, ch]]) / 255.0 * 2.0 - 1.0);
                }
            }
        }
    }
    out
}

/// `[H, W, 3]` bytes -> `[1, 3, H, W]` latent.
pub fn encode_frame<T: Scalar>(frame: &Array3<u8>) -> Arr<T> {
    let (h, w, c) = frame.dim();
    debug_assert_eq!(c, 3);
    let mut out = Arr::zeros(IxDyn(&[1, c, h, w]));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[[0, ch, y, x]] =
                    T::from_f64_c(f64::from(frame[[y, x, ch]]) / 255.0 * 2.0 - 1.0);
            }
        }
    }
    out
}

/// `[L, 3, H, W]` latents -> `[L, H, W, 3]` bytes, clamping to `[-1, 1]`.
pub fn decode_latents<T: Scalar>(latents: &Arr<T>) -> Result<Array4<u8>> {
    if latents.ndim() != 4 || latents.shape()[1] != 3 {
        return Err(Error::contract(format!(
            "latents must be [L,3,H,W], got {:?}",
            latents.shape()
        )));
    }
    let (l, _, h, w) = (
        latents.shape()[0],
        latents.shape()[1],
        latents.shape()[2],
        latents.shape()[3],
    );
    let mut out = Array4::<u8>::zeros((l, h, w, 3));
    for f in 0..l {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = latents[[f, ch, y, x]].to_f64_c().clamp(-1.0, 1.0);
                    out[[f, y, x, ch]] = ((v + 1.0) / 2.0 * 255.0).round() as u8;
                }
            }
        }
    }
    Ok(out)
}

// ---- conditioning ----

/// Everything the planner is conditioned on for one video.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    pub text_tokens: [u32; INSTRUCTION_TOKENS],
    /// Environment image (`[H, W, 3]`), normally frame 0 of an episode.
    pub env_image: Array3<u8>,
    pub fps_tag: u32,
    /// Dropped-condition markers for classifier-free guidance.
    pub null_text: bool,
    pub null_image: bool,
}

impl ConditioningBundle {
    pub fn for_episode(e: &Episode) -> Self {
        let env_image = e.frames.index_axis(Axis(0), 0).to_owned();
        ConditioningBundle {
            text_tokens: e.instruction.tokens(),
            env_image,
            fps_tag: 0,
            null_text: false,
            null_image: false,
        }
    }

    /// Copy with both conditions dropped: the unconditional input.
    pub fn nulled(&self) -> Self {
        self.with_nulls(true, true)
    }

    pub fn with_nulls(&self, null_text: bool, null_image: bool) -> Self {
        let mut c = self.clone();
        c.null_text = null_text;
        c.null_image = null_image;
        c
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.text_tokens.iter().any(|&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::contract(format!(
                "instruction tokens {:?} outside vocabulary",
                self.text_tokens
            )));
        }
        if self.fps_tag as usize >= FPS_BUCKETS {
            return Err(Error::contract(format!("fps bucket {} out of range", self.fps_tag)));
        }
        let dims = self.env_image.dim();
        if dims != (h, w, 3) {
            return Err(Error::contract(format!(
                "environment image {:?} does not match configured {h}x{w}",
                dims
            )));
        }
        Ok(())
    }
}

// ---- model ----

/// Feature injection hook: builds three additive feature maps (full, half,
/// quarter resolution) inside the caller's graph for the current latent and
/// timestep. Implemented by the pose-conditioning adapter.
pub trait FeatureInjector<T: Scalar> {
    fn inject(&self, g: &mut Graph<T>, z_t: Var, t: usize) -> Result<[Var; 3]>;
}

/// A generated video with the sampling inputs that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedVideo {
    pub frames: Array4<u8>,
    pub seed: u64,
    pub steps: usize,
}

/// Planner dimensions and layer table. Cheap to construct; all state lives
/// in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VideoPlanner {
    /// Frames per video.
    pub l: usize,
    pub h: usize,
    pub w: usize,
    /// Channels at full / half / quarter resolution.
    pub ch_full: usize,
    pub ch_half: usize,
    pub ch_quarter: usize,
    /// Width of context tokens and the timestep embedding.
    pub ctx_dim: usize,
}

impl VideoPlanner {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let (h, w) = (cfg.corpus.image_size, cfg.corpus.image_size);
        let base = cfg.planner.base_channels;
        let ctx_dim = cfg.planner.ctx_dim;
        if h % 4 != 0 || w % 4 != 0 || h < 8 {
            return Err(Error::contract(format!(
                "image size {h}x{w} must be a multiple of 4 and at least 8"
            )));
        }
        if base % 2 != 0 || (2 * base) % HEADS != 0 || base < 2 {
            return Err(Error::contract(format!(
                "base_channels {base} must be even and 2x divisible by {HEADS} heads"
            )));
        }
        if ctx_dim % 2 != 0 || ctx_dim % HEADS != 0 {
            return Err(Error::contract(format!(
                "ctx_dim {ctx_dim} must be even and divisible by {HEADS} heads"
            )));
        }
        Ok(VideoPlanner {
            l: cfg.corpus.frames,
            h,
            w,
            ch_full: base / 2,
            ch_half: base,
            ch_quarter: 2 * base,
            ctx_dim,
        })
    }

    fn env1(&self) -> Conv {
        Conv::new("planner.env1", 3, self.ch_full, 3, 2)
    }
    fn env2(&self) -> Conv {
        Conv::new("planner.env2", self.ch_full, self.ch_full, 3, 2)
    }
    fn env_proj(&self) -> Linear {
        let flat = self.ch_full * (self.h / 4) * (self.w / 4);
        Linear::new("planner.env_proj", flat, self.ctx_dim)
    }
    fn temb(&self) -> Linear {
        Linear::new("planner.temb", self.ctx_dim, self.ctx_dim)
    }
    fn stem(&self) -> Conv {
        Conv::new("planner.stem", 6, self.ch_full, 3, 1)
    }
    fn down1(&self) -> Conv {
        Conv::new("planner.down1", self.ch_full, self.ch_half, 3, 2)
    }
    fn down2(&self) -> Conv {
        Conv::new("planner.down2", self.ch_half, self.ch_quarter, 3, 2)
    }
    fn film(&self) -> Film {
        Film::new("planner.film", self.ctx_dim, self.ch_quarter)
    }
    fn mid(&self) -> Conv {
        Conv::new("planner.mid", self.ch_quarter, self.ch_quarter, 3, 1)
    }
    fn tnorm(&self) -> LayerNorm {
        LayerNorm::new("planner.tnorm", self.ch_quarter)
    }
    fn tattn(&self) -> Attention {
        Attention::new("planner.tattn", self.ch_quarter, self.ch_quarter, HEADS)
    }
    fn xnorm(&self) -> LayerNorm {
        LayerNorm::new("planner.xnorm", self.ch_quarter)
    }
    fn xattn(&self) -> Attention {
        Attention::new("planner.xattn", self.ch_quarter, self.ctx_dim, HEADS)
    }
    fn up1(&self) -> Conv {
        Conv::new("planner.up1", self.ch_quarter + self.ch_half, self.ch_half, 1, 1)
    }
    fn up1b(&self) -> Conv {
        Conv::new("planner.up1b", self.ch_half, self.ch_full, 3, 1)
    }
    fn up2(&self) -> Conv {
        Conv::new("planner.up2", 2 * self.ch_full, self.ch_full, 1, 1)
    }
    fn out(&self) -> Conv {
        Conv::new("planner.out", self.ch_full, 3, 3, 1).zeroed()
    }

    /// Fresh parameters; deterministic in `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut ps = ParamStore::new();
        let mut r = rng::seeded(rng::derive(seed, "planner.init"));
        let emb_std = (1.0 / self.ctx_dim as f64).sqrt();
        ps.insert(
            "planner.text_embed",
            scaled_normal(&mut r, &[VOCAB_SIZE, self.ctx_dim], emb_std),
        );
        ps.insert("planner.fps_embed", Arr::zeros(IxDyn(&[FPS_BUCKETS, self.ctx_dim])));
        ps.insert(
            "planner.null_img",
            scaled_normal(&mut r, &[1, self.ctx_dim], emb_std),
        );
        ps.insert(
            "planner.frame_embed",
            scaled_normal(&mut r, &[self.l, self.ch_quarter], emb_std),
        );
        self.env1().init(&mut ps, &mut r);
        self.env2().init(&mut ps, &mut r);
        self.env_proj().init(&mut ps, &mut r);
        self.temb().init(&mut ps, &mut r);
        self.stem().init(&mut ps, &mut r);
        self.down1().init(&mut ps, &mut r);
        self.down2().init(&mut ps, &mut r);
        self.film().init(&mut ps, &mut r);
        self.mid().init(&mut ps, &mut r);
        self.tnorm().init(&mut ps);
        self.tattn().init(&mut ps, &mut r);
        self.xnorm().init(&mut ps);
        self.xattn().init(&mut ps, &mut r);
        self.up1().init(&mut ps, &mut r);
        self.up1b().init(&mut ps, &mut r);
        self.up2().init(&mut ps, &mut r);
        self.out().init(&mut ps, &mut r);
        ps
    }

    /// Builds the conditioning inputs for one forward pass: the replicated
    /// environment latent, the context token sequence, and the timestep
    /// embedding.
    pub fn conditioning_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        cond: &ConditioningBundle,
        t: usize,
    ) -> Result<(Var, Var, Var)> {
        cond.validate(self.h, self.w)?;

        // Environment channels: zeroed when the image condition is dropped.
        let env_lat = if cond.null_image {
            Arr::zeros(IxDyn(&[1, 3, self.h, self.w]))
        } else {
            encode_frame::<T>(&cond.env_image)
        };
        let mut env_rep = Arr::zeros(IxDyn(&[self.l, 3, self.h, self.w]));
        for f in 0..self.l {
            env_rep
                .index_axis_mut(Axis(0), f)
                .assign(&env_lat.index_axis(Axis(0), 0));
        }
        let env = g.constant(env_rep);

        // Environment context token.
        let img_token = if cond.null_image {
            bd.var("planner.null_img")
        } else {
            let e0 = g.constant(env_lat);
            let e1 = self.env1().apply(g, bd, e0);
            let e1 = g.silu(e1);
            let e2 = self.env2().apply(g, bd, e1);
            let e2 = g.silu(e2);
            let flat = g.reshape(e2, &[1, self.ch_full * (self.h / 4) * (self.w / 4)]);
            self.env_proj().apply(g, bd, flat)
        };

        // Instruction tokens (null markers when dropped).
        let ids: Vec<usize> = if cond.null_text {
            vec![NULL_TOKEN as usize; INSTRUCTION_TOKENS]
        } else {
            cond.text_tokens.iter().map(|&t| t as usize).collect()
        };
        let table = bd.var("planner.text_embed");
        let text = g.gather_rows(table, ids);
        let text = g.reshape(text, &[1, INSTRUCTION_TOKENS, self.ctx_dim]);
        let img_tok3 = g.reshape(img_token, &[1, 1, self.ctx_dim]);
        let ctx = g.concat(1, &[text, img_tok3]);

        // Timestep embedding plus the fps bucket embedding.
        let sin = g.constant(crate::nn::sinusoidal::<T>(t as f64, self.ctx_dim, 10_000.0));
        let te = self.temb().apply(g, bd, sin);
        let te = g.silu(te);
        let fps_table = bd.var("planner.fps_embed");
        let fps = g.gather_rows(fps_table, vec![cond.fps_tag as usize]);
        let temb = g.add(te, fps);

        Ok((env, ctx, temb))
    }

    /// One denoiser forward pass: predicts the noise in `z_t`.
    ///
    /// `inject`, when present, supplies additive feature maps at full, half,
    /// and quarter resolution (shapes `[L, ch_full, H, W]`,
    /// `[L, ch_half, H/2, W/2]`, `[L, ch_quarter, H/4, W/4]`).
    pub fn denoise<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bd: &Bound,
        z_t: Var,
        env: Var,
        ctx: Var,
        temb: Var,
        inject: Option<&[Var; 3]>,
    ) -> Var {
        let (l, cq) = (self.l, self.ch_quarter);
        let (hq, wq) = (self.h / 4, self.w / 4);
        let spatial = hq * wq;

        let x = g.concat(1, &[z_t, env]);
        let mut h_full = self.stem().apply(g, bd, x);
        h_full = g.silu(h_full);
        if let Some(inj) = inject {
            h_full = g.add(h_full, inj[0]);
        }
        let mut h_half = self.down1().apply(g, bd, h_full);
        h_half = g.silu(h_half);
        if let Some(inj) = inject {
            h_half = g.add(h_half, inj[1]);
        }
        let mut h_quarter = self.down2().apply(g, bd, h_half);
        h_quarter = g.silu(h_quarter);
        if let Some(inj) = inject {
            h_quarter = g.add(h_quarter, inj[2]);
        }

        // Per-frame identity, then timestep modulation.
        let fe = bd.var("planner.frame_embed");
        let fe = g.reshape(fe, &[l, cq, 1, 1]);
        let mut m = g.add_bcast(h_quarter, fe);
        m = self.film().apply(g, bd, m, temb);
        m = self.mid().apply(g, bd, m);
        m = g.silu(m);

        // Temporal attention: each spatial position attends across frames.
        let seq = g.reshape(m, &[l, cq, spatial]);
        let seq = g.permute(seq, &[2, 0, 1]); // [S, L, C]
        let tn = self.tnorm().apply(g, bd, seq);
        let ta = self.tattn().apply(g, bd, tn, tn);
        let seq = g.add(seq, ta);

        // Cross-attention from every (frame, position) token to the context.
        let tokens = g.permute(seq, &[1, 0, 2]); // [L, S, C]
        let tokens = g.reshape(tokens, &[1, l * spatial, cq]);
        let xn = self.xnorm().apply(g, bd, tokens);
        let xa = self.xattn().apply(g, bd, xn, ctx);
        let tokens = g.add(tokens, xa);

        let m = g.reshape(tokens, &[l, spatial, cq]);
        let m = g.permute(m, &[0, 2, 1]);
        let m = g.reshape(m, &[l, cq, hq, wq]);

        // Decode with skip connections.
        let u1 = g.upsample2(m);
        let u1 = g.concat(1, &[u1, h_half]);
        let mut d1 = self.up1().apply(g, bd, u1);
        d1 = g.silu(d1);
        d1 = self.up1b().apply(g, bd, d1);
        d1 = g.silu(d1);
        let u2 = g.upsample2(d1);
        let u2 = g.concat(1, &[u2, h_full]);
        let mut d2 = self.up2().apply(g, bd, u2);
        d2 = g.silu(d2);
        self.out().apply(g, bd, d2)
    }

    /// Runs the denoiser outside any training graph and returns the
    /// predicted noise array.
    fn predict_eps<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        z_t: &Arr<T>,
        cond: &ConditioningBundle,
        t: usize,
        injector: Option<&dyn FeatureInjector<T>>,
    ) -> Result<Arr<T>> {
        let mut g = Graph::new();
        let bd = bind(&mut g, ps);
        let z = g.constant(z_t.clone());
        let inj = match injector {
            Some(i) => Some(i.inject(&mut g, z, t)?),
            None => None,
        };
        let (env, ctx, temb) = self.conditioning_vars(&mut g, &bd, cond, t)?;
        let eps = self.denoise(&mut g, &bd, z, env, ctx, temb, inj.as_ref());
        Ok(g.value(eps).clone())
    }

    /// Guided noise prediction: unconditional baseline plus image guidance
    /// plus text guidance on top of the image-conditioned prediction.
    fn guided_eps<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        z_t: &Arr<T>,
        cond: &ConditioningBundle,
        t: usize,
        w_text: f64,
        w_img: f64,
        injector: Option<&dyn FeatureInjector<T>>,
    ) -> Result<Arr<T>> {
        if cond.null_text && cond.null_image {
            return self.predict_eps(ps, z_t, cond, t, injector);
        }
        let uncond = cond.nulled();
        let img_only = cond.with_nulls(true, cond.null_image);
        let e_u = self.predict_eps(ps, z_t, &uncond, t, injector)?;
        let e_i = self.predict_eps(ps, z_t, &img_only, t, injector)?;
        let e_f = self.predict_eps(ps, z_t, cond, t, injector)?;
        let wt = T::from_f64_c(w_text);
        let wi = T::from_f64_c(w_img);
        let mut out = e_u.clone();
        ndarray::Zip::from(&mut out)
            .and(&e_u)
            .and(&e_i)
            .and(&e_f)
            .for_each(|o, &u, &i, &f| {
                *o = u + wi * (i - u) + wt * (f - i);
            });
        Ok(out)
    }

    /// Deterministic guided sampling, shared by the coarse stage (no
    /// injector) and the pose-conditioned stage.
    pub fn sample<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sched: &DiffusionSchedule<T>,
        cond: &ConditioningBundle,
        steps: usize,
        w_text: f64,
        w_img: f64,
        seed: u64,
        injector: Option<&dyn FeatureInjector<T>>,
    ) -> Result<GeneratedVideo> {
        cond.validate(self.h, self.w)?;
        let ts = sched.sample_timesteps(steps)?;
        let mut r = rng::seeded(rng::derive(seed, "video.init"));
        let mut x: Arr<T> = normal_arr(&mut r, &[self.l, 3, self.h, self.w]);
        for k in (0..ts.len()).rev() {
            let t = ts[k];
            let t_prev = if k == 0 { 0 } else { ts[k - 1] };
            let eps = self.guided_eps(ps, &x, cond, t, w_text, w_img, injector)?;
            x = diffusion::ddim_step(
                &x,
                &eps,
                t,
                t_prev,
                sched,
                0.0,
                None,
                Some((T::from_f64_c(-1.0), T::one())),
            )?;
        }
        Ok(GeneratedVideo {
            frames: decode_latents(&x)?,
            seed,
            steps,
        })
    }

    /// Stage-I generation: instruction + environment image to coarse video.
    pub fn generate_coarse<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sched: &DiffusionSchedule<T>,
        cond: &ConditioningBundle,
        steps: usize,
        w_text: f64,
        w_img: f64,
        seed: u64,
    ) -> Result<GeneratedVideo> {
        self.sample(ps, sched, cond, steps, w_text, w_img, seed, None)
    }
}

fn scaled_normal<T: Scalar>(r: &mut rng::Prng, shape: &[usize], std: f64) -> Arr<T> {
    let mut a: Arr<T> = normal_arr(r, shape);
    a.mapv_inplace(|v| v * T::from_f64_c(std));
    a
}

// ---- training ----

/// One optimizer step's record, as written to the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes records as `step,loss,lr` CSV.
pub fn write_loss_csv(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "step,loss,lr").map_err(io)?;
    for r in records {
        writeln!(w, "{},{},{}", r.step, r.loss, r.lr).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Trailing moving average of the losses with the given window.
pub fn smoothed_losses(records: &[TrainRecord], window: usize) -> Vec<f64> {
    assert!(window > 0);
    records
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &records[lo..=i];
            slice.iter().map(|r| r.loss).sum::<f64>() / slice.len() as f64
        })
        .collect()
}

/// An episode prepared for planner training.
pub(crate) struct PlannerExample<T: Scalar> {
    pub latents: Arr<T>,
    pub cond: ConditioningBundle,
}

pub(crate) fn load_planner_examples<T: Scalar>(
    index: &DatasetIndex,
    root: &Path,
    split: Split,
) -> Result<Vec<PlannerExample<T>>> {
    let entries = index.split(split);
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    entries
        .iter()
        .map(|entry| {
            let e = corpus::read_episode(&root.join(&entry.path))?;
            Ok(PlannerExample {
                latents: encode_frames::<T>(&e.frames),
                cond: ConditioningBundle::for_episode(&e),
            })
        })
        .collect()
}

/// Trains the planner with the noise-prediction objective and independent
/// text/image condition dropout. Deterministic in `seed`.
pub fn train_planner<T: Scalar>(
    index: &DatasetIndex,
    root: &Path,
    cfg: &PipelineConfig,
    seed: u64,
    log_path: Option<&Path>,
) -> Result<(ParamStore<T>, Vec<TrainRecord>)> {
    let model = VideoPlanner::new(cfg)?;
    let sched = DiffusionSchedule::<T>::new(cfg.schedule)?;
    let examples = load_planner_examples::<T>(index, root, Split::Train)?;
    let mut ps = model.init_params::<T>(seed);
    if cfg.planner.freeze_temporal {
        ps.set_trainable("planner.tattn", false);
        ps.set_trainable("planner.tnorm", false);
    }
    let mut opt = Adam::new(cfg.planner.lr);
    let pcfg = &cfg.planner;
    let mut records = Vec::with_capacity(pcfg.train_steps);

    for step in 0..pcfg.train_steps {
        let mut r = rng::seeded(rng::derive_index(seed, "planner.train", step as u64));
        let mut batch_ids = Vec::with_capacity(pcfg.batch);
        let mut grads_sum: HashMap<String, Arr<T>> = HashMap::new();
        let mut loss_sum = 0.0f64;
        for _ in 0..pcfg.batch {
            use rand::Rng;
            let idx = r.gen_range(0..examples.len());
            batch_ids.push(idx as u64);
            let t = r.gen_range(1..=sched.t_max());
            let noise: Arr<T> = normal_arr(&mut r, examples[idx].latents.shape());
            let drop_text = r.gen::<f64>() < pcfg.cond_drop;
            let drop_img = r.gen::<f64>() < pcfg.cond_drop;
            let cond = examples[idx].cond.with_nulls(drop_text, drop_img);

            let z_t = diffusion::forward_diffuse(&examples[idx].latents, t, &noise, &sched)?;
            let mut g = Graph::new();
            let bd = bind(&mut g, &ps);
            let z = g.constant(z_t);
            let (env, ctx, temb) = model.conditioning_vars(&mut g, &bd, &cond, t)?;
            let eps_hat = model.denoise(&mut g, &bd, z, env, ctx, temb, None);
            let target = g.constant(noise);
            let loss = g.mse(eps_hat, target);
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
        let loss = loss_sum / pcfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::TrainDiverged {
                step,
                lr: pcfg.lr,
                batch: batch_ids,
                loss,
            });
        }
        ps.zero_grads();
        ps.accumulate(&grads_sum, T::from_f64_c(1.0 / pcfg.batch as f64));
        opt.step(&mut ps);
        records.push(TrainRecord {
            step,
            loss,
            lr: pcfg.lr,
        });
    }
    if let Some(path) = log_path {
        write_loss_csv(path, &records)?;
    }
    Ok((ps, records))
}
