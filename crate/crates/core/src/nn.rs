//! Parameter management and model building blocks.
//!
//! Layers are thin descriptors: `init` registers named parameters in a
//! [`ParamStore`], `apply` replays the layer onto a [`Graph`] against a
//! [`Bound`] view of that store. Keeping parameters owned by the store (not
//! the layers) gives checkpointing, freezing, and the optimizer a single
//! flat name -> array table to work with.

use crate::graph::{Graph, Var};
use crate::rng::{normal, Prng};
use crate::{Arr, Error, Result, Scalar};
use indexmap::IndexMap;
use ndarray::IxDyn;
use std::collections::HashMap;

pub struct Param<T: Scalar> {
    pub value: Arr<T>,
    pub grad: Arr<T>,
    m: Arr<T>,
    v: Arr<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    fn new(value: Arr<T>, trainable: bool) -> Self {
        let dim = value.raw_dim();
        Param {
            value,
            grad: Arr::zeros(dim.clone()),
            m: Arr::zeros(dim.clone()),
            v: Arr::zeros(dim),
            trainable,
        }
    }
}

/// Named parameter table with deterministic iteration order.
pub struct ParamStore<T: Scalar> {
    map: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Arr<T>) {
        assert!(
            self.map
                .insert(name.to_string(), Param::new(value, true))
                .is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &Param<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate(&mut self, grads: &HashMap<String, Arr<T>>, weight: T) {
        for (name, g) in grads {
            let p = self.get_mut(name);
            p.grad.scaled_add(weight, g);
        }
    }

    /// Parameter values as little-endian f32 blobs, in table order.
    pub fn to_blobs(&self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        self.map
            .iter()
            .map(|(name, p)| {
                (
                    name.clone(),
                    p.value.shape().to_vec(),
                    p.value.iter().map(|v| v.to_f64_c() as f32).collect(),
                )
            })
            .collect()
    }

    /// Overwrites values from blobs; shapes and names must match exactly.
    pub fn load_blobs(&mut self, blobs: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        if blobs.len() != self.map.len() {
            return Err(Error::CheckpointMismatch {
                what: "parameter count".into(),
                expected: self.map.len().to_string(),
                found: blobs.len().to_string(),
            });
        }
        for (name, shape, data) in blobs {
            let Some(p) = self.map.get_mut(name) else {
                return Err(Error::CheckpointMismatch {
                    what: "parameter name".into(),
                    expected: "a registered parameter".into(),
                    found: name.clone(),
                });
            };
            if p.value.shape() != shape.as_slice() {
                return Err(Error::CheckpointMismatch {
                    what: format!("shape of '{name}'"),
                    expected: format!("{:?}", p.value.shape()),
                    found: format!("{shape:?}"),
                });
            }
            let arr = Arr::from_shape_vec(
                IxDyn(shape),
                data.iter().map(|&v| T::from_f64_c(v as f64)).collect(),
            )
            .expect("blob shape checked");
            p.value = arr;
        }
        Ok(())
    }

    /// Largest absolute difference against another store with the same table.
    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> (String, f64) {
        let mut worst = (String::new(), 0.0f64);
        for (name, p) in &self.map {
            let q = other.get(name);
            for (a, b) in p.value.iter().zip(q.value.iter()) {
                let d = (a.to_f64_c() - b.to_f64_c()).abs();
                if d > worst.1 {
                    worst = (name.clone(), d);
                }
            }
        }
        worst
    }
}

/// Parameters bound into a graph for one forward pass.
pub struct Bound {
    map: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }
}

/// Binds every parameter: trainable ones as gradient leaves, frozen ones as
/// constants (no gradient is computed for or through their subtrees alone).
pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
    let mut map = HashMap::with_capacity(store.map.len());
    for (name, p) in store.iter() {
        let var = if p.trainable {
            g.leaf(p.value.clone())
        } else {
            g.constant(p.value.clone())
        };
        map.insert(name.clone(), var);
    }
    Bound { map }
}

/// Binds every parameter as a constant regardless of its trainable flag;
/// activations still carry gradients through these values, but none
/// accumulate on the parameters themselves.
pub fn bind_constant<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>) -> Bound {
    let mut map = HashMap::with_capacity(store.map.len());
    for (name, p) in store.iter() {
        map.insert(name.clone(), g.constant(p.value.clone()));
    }
    Bound { map }
}

/// Pulls accumulated leaf gradients out of the graph after `backward`.
pub fn collect_grads<T: Scalar>(g: &mut Graph<T>, bound: &Bound) -> HashMap<String, Arr<T>> {
    let mut out = HashMap::new();
    for (name, &var) in &bound.map {
        if let Some(grad) = g.take_grad(var) {
            out.insert(name.clone(), grad);
        }
    }
    out
}

// ---- layers ----

pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub zero_init: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            name: name.into(),
            in_dim,
            out_dim,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut Prng) {
        let w = if self.zero_init {
            Arr::zeros(IxDyn(&[self.in_dim, self.out_dim]))
        } else {
            let std = (1.0 / self.in_dim as f64).sqrt();
            init_normal(rng, &[self.in_dim, self.out_dim], std)
        };
        ps.insert(&format!("{}.w", self.name), w);
        ps.insert(&format!("{}.b", self.name), Arr::zeros(IxDyn(&[self.out_dim])));
    }

    /// `x`: `[N, in_dim]` -> `[N, out_dim]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Var {
        let w = bd.var(&format!("{}.w", self.name));
        let b = bd.var(&format!("{}.b", self.name));
        let y = g.matmul(x, w);
        g.add_bcast(y, b)
    }
}

pub struct Conv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub zero_init: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Conv {
            name: name.into(),
            in_ch,
            out_ch,
            k,
            stride,
            pad: k / 2,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut Prng) {
        let fan_in = self.in_ch * self.k * self.k;
        let w = if self.zero_init {
            Arr::zeros(IxDyn(&[self.out_ch, self.in_ch, self.k, self.k]))
        } else {
            let std = (1.0 / fan_in as f64).sqrt();
            init_normal(rng, &[self.out_ch, self.in_ch, self.k, self.k], std)
        };
        ps.insert(&format!("{}.w", self.name), w);
        ps.insert(&format!("{}.b", self.name), Arr::zeros(IxDyn(&[self.out_ch])));
    }

    /// `x`: `[N, in_ch, H, W]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Var {
        let w = bd.var(&format!("{}.w", self.name));
        let b = bd.var(&format!("{}.b", self.name));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        LayerNorm {
            name: name.into(),
            dim,
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>) {
        ps.insert(
            &format!("{}.g", self.name),
            Arr::from_elem(IxDyn(&[self.dim]), T::one()),
        );
        ps.insert(&format!("{}.b", self.name), Arr::zeros(IxDyn(&[self.dim])));
    }

    /// Normalizes the last axis and applies the learned affine.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var) -> Var {
        let gamma = bd.var(&format!("{}.g", self.name));
        let beta = bd.var(&format!("{}.b", self.name));
        let n = g.normalize_last(x, T::from_f64_c(1e-5));
        let s = g.mul_bcast(n, gamma);
        g.add_bcast(s, beta)
    }
}

/// Feature-wise affine modulation from a conditioning vector.
///
/// The projection starts at zero, so the layer is the identity before
/// training.
pub struct Film {
    pub name: String,
    pub cond_dim: usize,
    pub channels: usize,
}

impl Film {
    pub fn new(name: impl Into<String>, cond_dim: usize, channels: usize) -> Self {
        Film {
            name: name.into(),
            cond_dim,
            channels,
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut Prng) {
        Linear::new(format!("{}.proj", self.name), self.cond_dim, 2 * self.channels)
            .zeroed()
            .init(ps, rng);
    }

    /// `x`: `[N, C, H, W]`, `cond`: `[1, cond_dim]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, x: Var, cond: Var) -> Var {
        let proj = Linear::new(format!("{}.proj", self.name), self.cond_dim, 2 * self.channels);
        let sc = proj.apply(g, bd, cond);
        let s = g.narrow(sc, 1, 0, self.channels);
        let sh = g.narrow(sc, 1, self.channels, self.channels);
        let s = g.reshape(s, &[1, self.channels, 1, 1]);
        let sh = g.reshape(sh, &[1, self.channels, 1, 1]);
        let s1 = g.add_scalar(s, T::one());
        let y = g.mul_bcast(x, s1);
        g.add_bcast(y, sh)
    }
}

/// Multi-head attention; self-attention when `kv` equals the query input.
pub struct Attention {
    pub name: String,
    pub dim: usize,
    pub kv_dim: usize,
    pub heads: usize,
}

impl Attention {
    pub fn new(name: impl Into<String>, dim: usize, kv_dim: usize, heads: usize) -> Self {
        assert_eq!(dim % heads, 0, "head count must divide width");
        Attention {
            name: name.into(),
            dim,
            kv_dim,
            heads,
        }
    }

    pub fn init<T: Scalar>(&self, ps: &mut ParamStore<T>, rng: &mut Prng) {
        Linear::new(format!("{}.q", self.name), self.dim, self.dim).init(ps, rng);
        Linear::new(format!("{}.k", self.name), self.kv_dim, self.dim).init(ps, rng);
        Linear::new(format!("{}.v", self.name), self.kv_dim, self.dim).init(ps, rng);
        Linear::new(format!("{}.o", self.name), self.dim, self.dim).init(ps, rng);
    }

    /// `q_in`: `[B, S, dim]`, `kv_in`: `[B, S2, kv_dim]` -> `[B, S, dim]`.
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, bd: &Bound, q_in: Var, kv_in: Var) -> Var {
        let (b, s) = {
            let v = g.value(q_in);
            (v.shape()[0], v.shape()[1])
        };
        let s2 = g.value(kv_in).shape()[1];
        let dh = self.dim / self.heads;

        let project = |g: &mut Graph<T>, which: &str, x: Var, rows: usize, in_dim: usize| {
            let lin = Linear::new(format!("{}.{which}", self.name), in_dim, self.dim);
            let flat = g.reshape(x, &[rows * b, in_dim]);
            let y = lin.apply(g, bd, flat);
            g.reshape(y, &[b, rows, self.dim])
        };
        let q = project(g, "q", q_in, s, self.dim);
        let k = project(g, "k", kv_in, s2, self.kv_dim);
        let v = project(g, "v", kv_in, s2, self.kv_dim);

        // [B, S, H, dh] -> [B*H, S, dh]
        let split = |g: &mut Graph<T>, x: Var, rows: usize| {
            let x = g.reshape(x, &[b, rows, self.heads, dh]);
            let x = g.permute(x, &[0, 2, 1, 3]);
            g.reshape(x, &[b * self.heads, rows, dh])
        };
        let qh = split(g, q, s);
        let kh = split(g, k, s2);
        let vh = split(g, v, s2);

        let scores = g.bmm(qh, false, kh, true);
        let scaled = g.scale(scores, T::from_f64_c(1.0 / (dh as f64).sqrt()));
        let probs = g.softmax_last(scaled);
        let ctx = g.bmm(probs, false, vh, false);

        let ctx = g.reshape(ctx, &[b, self.heads, s, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let merged = g.reshape(ctx, &[b * s, self.dim]);
        let out = Linear::new(format!("{}.o", self.name), self.dim, self.dim).apply(g, bd, merged);
        g.reshape(out, &[b, s, self.dim])
    }
}

// ---- embeddings ----

/// Sinusoidal position/timestep features, `[1, dim]`.
pub fn sinusoidal<T: Scalar>(t: f64, dim: usize, max_period: f64) -> Arr<T> {
    assert!(dim % 2 == 0, "sinusoidal dim must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push(T::from_f64_c((t * freq).sin()));
    }
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out.push(T::from_f64_c((t * freq).cos()));
    }
    Arr::from_shape_vec(IxDyn(&[1, dim]), out).expect("shape")
}

fn init_normal<T: Scalar>(rng: &mut Prng, shape: &[usize], std: f64) -> Arr<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| T::from_f64_c(normal::<f64>(rng) * std))
        .collect();
    Arr::from_shape_vec(IxDyn(shape), data).expect("shape")
}

// ---- optimizer ----

/// Adam with decoupled global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: usize,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            t: 0,
        }
    }

    pub fn step<T: Scalar>(&mut self, ps: &mut ParamStore<T>) {
        self.t += 1;
        let mut scale = 1.0f64;
        if let Some(max_norm) = self.clip_norm {
            let mut sq = 0.0f64;
            for (_, p) in ps.iter() {
                if !p.trainable {
                    continue;
                }
                for gv in p.grad.iter() {
                    let v = gv.to_f64_c();
                    sq += v * v;
                }
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        let b1 = T::from_f64_c(self.beta1);
        let b2 = T::from_f64_c(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr_t = T::from_f64_c(self.lr * bc2.sqrt() / bc1);
        let eps = T::from_f64_c(self.eps);
        let scale_t = T::from_f64_c(scale);
        for p in ps.map.values_mut() {
            if !p.trainable {
                continue;
            }
            ndarray::Zip::from(&mut p.m)
                .and(&mut p.v)
                .and(&mut p.value)
                .and(&p.grad)
                .for_each(|m, v, val, &graw| {
                    let gv = graw * scale_t;
                    *m = b1 * *m + (one - b1) * gv;
                    *v = b2 * *v + (one - b2) * gv * gv;
                    *val = *val - lr_t * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Central-difference gradient of a scalar function of one array.
pub fn numeric_grad(f: &mut dyn FnMut(&Arr<f64>) -> f64, at: &Arr<f64>, eps: f64) -> Arr<f64> {
    let mut g = Arr::zeros(at.raw_dim());
    let mut x = at.clone();
    for i in 0..at.len() {
        let idx = linear_to_index(at.shape(), i);
        let orig = x[&idx[..]];
        x[&idx[..]] = orig + eps;
        let fp = f(&x);
        x[&idx[..]] = orig - eps;
        let fm = f(&x);
        x[&idx[..]] = orig;
        g[&idx[..]] = (fp - fm) / (2.0 * eps);
    }
    g
}

fn linear_to_index(shape: &[usize], mut i: usize) -> Vec<usize> {
    let mut idx = vec![0usize; shape.len()];
    for ax in (0..shape.len()).rev() {
        idx[ax] = i % shape[ax];
        i /= shape[ax];
    }
    idx
}
