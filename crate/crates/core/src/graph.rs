//! Minimal reverse-mode autodiff tape over `ndarray`.
//!
//! Each training step builds a fresh [`Graph`], runs the model forward with
//! eager ops that record a backward closure, then calls [`Graph::backward`]
//! once from the loss node. Nodes whose ancestors contain no gradient leaf
//! skip closure recording entirely, so pure inference pays almost nothing.
//!
//! All arrays are kept in standard (C) layout; ops that could break that
//! (permute, broadcast) copy.

use crate::{Arr, Scalar};
use ndarray::{ArrayViewD, Axis, IxDyn, Slice};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Arr<T>, &Arr<T>, &[&Arr<T>]) -> Vec<Arr<T>> + Send>;

struct Node<T: Scalar> {
    value: Arr<T>,
    grad: Option<Arr<T>>,
    needs_grad: bool,
    parents: Vec<usize>,
    back: Option<BackFn<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at `v` by the last [`backward`](Self::backward)
    /// call, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Arr<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Arr<T>> {
        self.nodes[v.0].grad.take()
    }

    fn push(&mut self, value: Arr<T>, parents: Vec<usize>, back: Option<BackFn<T>>) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let back = if needs_grad { back } else { None };
        self.nodes.push(Node {
            value: ensure_standard(value),
            grad: None,
            needs_grad,
            parents,
            back,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a value that does not require gradients.
    pub fn constant(&mut self, value: Arr<T>) -> Var {
        self.nodes.push(Node {
            value: ensure_standard(value),
            grad: None,
            needs_grad: false,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a gradient leaf (a trainable parameter or an input that needs
    /// a gradient).
    pub fn leaf(&mut self, value: Arr<T>) -> Var {
        self.nodes.push(Node {
            value: ensure_standard(value),
            grad: None,
            needs_grad: true,
            parents: Vec::new(),
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Runs reverse accumulation from `loss`, which must be scalar-shaped
    /// (any shape with exactly one element).
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let seed = Arr::from_elem(self.nodes[loss.0].value.raw_dim(), T::one());
        self.nodes[loss.0].grad = Some(seed);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let Some(back) = self.nodes[i].back.take() else {
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let grad = self.nodes[i].grad.clone().expect("grad present");
            let contribs = {
                let pvals: Vec<&Arr<T>> = parents.iter().map(|&p| &self.nodes[p].value).collect();
                back(&self.nodes[i].value, &grad, &pvals)
            };
            debug_assert_eq!(contribs.len(), parents.len());
            for (&p, c) in parents.iter().zip(contribs) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(c.shape(), self.nodes[p].value.shape());
                match &mut self.nodes[p].grad {
                    Some(g) => *g += &c,
                    slot @ None => *slot = Some(c),
                }
            }
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, g, _| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p| vec![g * p[1], g * p[0]])),
        )
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let bshape: Vec<usize> = self.nodes[b.0].value.shape().to_vec();
        let v = &self.nodes[a.0].value
            + &self.nodes[b.0]
                .value
                .broadcast(self.nodes[a.0].value.raw_dim())
                .expect("rhs not broadcastable");
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, _| {
                vec![g.clone(), reduce_to_shape(g, &bshape)]
            })),
        )
    }

    /// `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let bshape: Vec<usize> = self.nodes[b.0].value.shape().to_vec();
        let bb = self.nodes[b.0]
            .value
            .broadcast(self.nodes[a.0].value.raw_dim())
            .expect("rhs not broadcastable")
            .to_owned();
        let v = &self.nodes[a.0].value * &bb;
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, p| {
                let ga = g * &bb;
                let gb_full = g * p[0];
                vec![ga, reduce_to_shape(&gb_full, &bshape)]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| vec![g.mapv(|x| x * c)])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(v, vec![a.0], Some(Box::new(|_, g, _| vec![g.clone()])))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|_, g, p| {
                let d = p[0].mapv(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                vec![g * &d]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(
            v,
            vec![a.0],
            Some(Box::new(|out, g, _| {
                let d = out.mapv(|y| T::one() - y * y);
                vec![g * &d]
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let mut v = as_standard(&self.nodes[a.0].value);
        let last = *v.shape().last().expect("softmax needs rank >= 1");
        for row in v.as_slice_mut().expect("standard layout").chunks_exact_mut(last) {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |out, g, _| {
                let mut dx = g * out;
                let o = out.as_slice().expect("standard layout");
                let d = dx.as_slice_mut().expect("standard layout");
                for (drow, orow) in d.chunks_exact_mut(last).zip(o.chunks_exact(last)) {
                    let dot: T = drow.iter().cloned().sum();
                    for (di, oi) in drow.iter_mut().zip(orow) {
                        *di -= dot * *oi;
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn normalize_last(&mut self, a: Var, eps: T) -> Var {
        let src = as_standard(&self.nodes[a.0].value);
        let last = *src.shape().last().expect("normalize needs rank >= 1");
        let n_t = T::from_usize(last).expect("usize fits scalar");
        let mut v = src.clone();
        let rows = v.len() / last;
        let mut rstds = Vec::with_capacity(rows);
        for row in v.as_slice_mut().expect("standard layout").chunks_exact_mut(last) {
            let mean = row.iter().cloned().sum::<T>() / n_t;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n_t;
            let rstd = (var + eps).sqrt().recip();
            rstds.push(rstd);
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |out, g, _| {
                let mut dx = g.clone();
                let o = out.as_slice().expect("standard layout");
                let d = dx.as_slice_mut().expect("standard layout");
                for ((drow, orow), &rstd) in
                    d.chunks_exact_mut(last).zip(o.chunks_exact(last)).zip(&rstds)
                {
                    let gmean = drow.iter().cloned().sum::<T>() / n_t;
                    let gx: T = drow
                        .iter()
                        .zip(orow)
                        .map(|(&gi, &oi)| gi * oi)
                        .sum::<T>()
                        / n_t;
                    for (di, oi) in drow.iter_mut().zip(orow) {
                        *di = rstd * (*di - gmean - *oi * gx);
                    }
                }
                vec![dx]
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let from: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let v = as_standard(&self.nodes[a.0].value)
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                vec![as_standard(g)
                    .into_shape_with_order(IxDyn(&from))
                    .expect("reshape back")]
            })),
        )
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let axes_v: Vec<usize> = axes.to_vec();
        let mut inv = vec![0usize; axes_v.len()];
        for (i, &ax) in axes_v.iter().enumerate() {
            inv[ax] = i;
        }
        let v = as_standard(&self.nodes[a.0].value.clone().permuted_axes(IxDyn(&axes_v)));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                vec![as_standard(&g.clone().permuted_axes(IxDyn(&inv)))]
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<T>> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts
            .iter()
            .map(|p| self.nodes[p.0].value.shape()[axis])
            .collect();
        self.push(
            as_standard(&v),
            parts.iter().map(|p| p.0).collect(),
            Some(Box::new(move |_, g, _| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    out.push(as_standard(&g.slice_axis(
                        Axis(axis),
                        Slice::new(start, Some(start + s as isize), 1),
                    )));
                    start += s as isize;
                }
                out
            })),
        )
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let full: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let v = as_standard(&self.nodes[a.0].value.slice_axis(
            Axis(axis),
            Slice::new(start as isize, Some((start + len) as isize), 1),
        ));
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let mut dx = Arr::zeros(IxDyn(&full));
                dx.slice_axis_mut(
                    Axis(axis),
                    Slice::new(start as isize, Some((start + len) as isize), 1),
                )
                .assign(g);
                vec![dx]
            })),
        )
    }

    /// Selects rows of a 2-D table; the embedding-lookup primitive.
    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let t = &self.nodes[table.0].value;
        assert_eq!(t.ndim(), 2);
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut v = Arr::zeros(IxDyn(&[indices.len(), dim]));
        for (i, &ix) in indices.iter().enumerate() {
            assert!(ix < rows, "gather index {ix} out of {rows}");
            v.index_axis_mut(Axis(0), i)
                .assign(&t.index_axis(Axis(0), ix));
        }
        self.push(
            v,
            vec![table.0],
            Some(Box::new(move |_, g, _| {
                let mut dt = Arr::zeros(IxDyn(&[rows, dim]));
                for (i, &ix) in indices.iter().enumerate() {
                    let mut row = dt.index_axis_mut(Axis(0), ix);
                    row += &g.index_axis(Axis(0), i);
                }
                vec![dt]
            })),
        )
    }

    // ---- reductions ----

    /// Mean over all elements; result has shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let n_t = T::from_usize(n).expect("usize fits scalar");
        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let m = self.nodes[a.0].value.iter().cloned().sum::<T>() / n_t;
        let v = Arr::from_shape_vec(IxDyn(&[1]), vec![m]).expect("shape");
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let gv = g[[0]] / n_t;
                vec![Arr::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    /// Mean squared error between `a` and `b`; result has shape `[1]`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    // ---- linear algebra ----

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 2);
        assert_eq!(bv.ndim(), 2);
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
        let v = a2.dot(&b2).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(|_, g, p| {
                let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                let a2 = p[0].view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                let b2 = p[1].view().into_dimensionality::<ndarray::Ix2>().expect("2d");
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            })),
        )
    }

    /// Batched matrix product over the leading axis, with optional
    /// transposition of either operand's trailing two axes.
    pub fn bmm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        assert_eq!(av.shape()[0], bv.shape()[0]);
        let v = bmm_impl(av, ta, bv, tb);
        self.push(
            v,
            vec![a.0, b.0],
            Some(Box::new(move |_, g, p| {
                // For Y = op(A) . op(B): dA = un-op(G . op(B)^T), dB = un-op(op(A)^T . G).
                let da = if ta {
                    bmm_impl(p[1], tb, g, true)
                } else {
                    bmm_impl(g, false, p[1], !tb)
                };
                let db = if tb {
                    bmm_impl(g, true, p[0], ta)
                } else {
                    bmm_impl(p[0], !ta, g, false)
                };
                vec![da, db]
            })),
        )
    }

    /// 2-D convolution with square kernel, symmetric zero padding.
    ///
    /// `x`: `[N, C, H, W]`, `w`: `[OC, C, K, K]`, `b`: `[OC]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(xv.ndim(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(wv.ndim(), 4, "conv2d weight must be [OC,C,K,K]");
        let (n, c, h, wdt) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (oc, wc, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        assert_eq!(wc, c, "conv2d channel mismatch");
        assert_eq!(wv.shape()[3], k, "conv2d kernel must be square");
        assert_eq!(bv.shape(), [oc]);
        assert!(h + 2 * pad >= k && wdt + 2 * pad >= k);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wdt + 2 * pad - k) / stride + 1;

        let cols = im2col(xv, k, stride, pad, oh, ow);
        let w2 = as_standard(wv)
            .into_shape_with_order(IxDyn(&[oc, c * k * k]))
            .expect("weight reshape")
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d");
        let mut out = Arr::zeros(IxDyn(&[n, oc, oh, ow]));
        {
            let out_slice = out.as_slice_mut().expect("standard layout");
            let per = oc * oh * ow;
            for i in 0..n {
                let col_i = cols.index_axis(Axis(0), i);
                let col2 = col_i.into_dimensionality::<ndarray::Ix2>().expect("2d");
                let y = w2.dot(&col2);
                out_slice[i * per..(i + 1) * per]
                    .copy_from_slice(y.as_standard_layout().as_slice().expect("standard"));
            }
        }
        for i in 0..oc {
            let bi = bv[[i]];
            out.index_axis_mut(Axis(1), i).mapv_inplace(|v| v + bi);
        }

        self.push(
            out,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |_, g, p| {
                let (n, oc) = (g.shape()[0], g.shape()[1]);
                let l = oh * ow;
                let ckk = c * k * k;
                let w2 = as_standard(p[1])
                    .into_shape_with_order(IxDyn(&[oc, ckk]))
                    .expect("weight reshape")
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("2d");
                let mut dw2 = ndarray::Array2::<T>::zeros((oc, ckk));
                let mut db = Arr::zeros(IxDyn(&[oc]));
                let mut dcols = ndarray::Array3::<T>::zeros((n, ckk, l));
                for i in 0..n {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((oc, l))
                        .expect("grad reshape")
                        .to_owned();
                    let col_i = cols
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<ndarray::Ix2>()
                        .expect("2d");
                    dw2 += &gi.dot(&col_i.t());
                    for o in 0..oc {
                        db[[o]] += gi.row(o).iter().cloned().sum::<T>();
                    }
                    dcols
                        .index_axis_mut(Axis(0), i)
                        .assign(&w2.t().dot(&gi));
                }
                let dx = col2im(&dcols.into_dyn(), &[n, c, h, wdt], k, stride, pad, oh, ow);
                let dw = dw2
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&[oc, c, k, k]))
                    .expect("weight grad reshape");
                vec![dx, dw, db]
            })),
        )
    }

    /// Nearest-neighbor 2x spatial upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.ndim(), 4);
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut v = Arr::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        for i in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for xq in 0..w {
                        let s = x[[i, ch, y, xq]];
                        v[[i, ch, 2 * y, 2 * xq]] = s;
                        v[[i, ch, 2 * y, 2 * xq + 1]] = s;
                        v[[i, ch, 2 * y + 1, 2 * xq]] = s;
                        v[[i, ch, 2 * y + 1, 2 * xq + 1]] = s;
                    }
                }
            }
        }
        self.push(
            v,
            vec![a.0],
            Some(Box::new(move |_, g, _| {
                let mut dx = Arr::zeros(IxDyn(&[n, c, h, w]));
                for i in 0..n {
                    for ch in 0..c {
                        for y in 0..h {
                            for xq in 0..w {
                                dx[[i, ch, y, xq]] = g[[i, ch, 2 * y, 2 * xq]]
                                    + g[[i, ch, 2 * y, 2 * xq + 1]]
                                    + g[[i, ch, 2 * y + 1, 2 * xq]]
                                    + g[[i, ch, 2 * y + 1, 2 * xq + 1]];
                            }
                        }
                    }
                }
                vec![dx]
            })),
        )
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

fn ensure_standard<T: Scalar>(a: Arr<T>) -> Arr<T> {
    if a.is_standard_layout() {
        a
    } else {
        as_standard(&a)
    }
}

fn as_standard<T: Scalar>(a: &ndarray::ArrayBase<impl ndarray::Data<Elem = T>, IxDyn>) -> Arr<T> {
    a.as_standard_layout().to_owned()
}

/// Sums `g` down to `shape` (right-aligned broadcast semantics).
fn reduce_to_shape<T: Scalar>(g: &Arr<T>, shape: &[usize]) -> Arr<T> {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out.into_shape_with_order(IxDyn(shape)).expect("reduce shape")
}

fn bmm_impl<T: Scalar>(a: &Arr<T>, ta: bool, b: &Arr<T>, tb: bool) -> Arr<T> {
    let nb = a.shape()[0];
    let mut parts = Vec::with_capacity(nb);
    for i in 0..nb {
        let ai = a
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d");
        let bi = b
            .index_axis(Axis(0), i)
            .into_dimensionality::<ndarray::Ix2>()
            .expect("2d");
        let y = match (ta, tb) {
            (false, false) => ai.dot(&bi),
            (true, false) => ai.t().dot(&bi),
            (false, true) => ai.dot(&bi.t()),
            (true, true) => ai.t().dot(&bi.t()),
        };
        parts.push(y.insert_axis(Axis(0)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("bmm concat")
        .into_dyn()
}

fn im2col<T: Scalar>(
    x: &Arr<T>,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr<T> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = Arr::zeros(IxDyn(&[n, c * k * k, oh * ow]));
    let xs = x.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let col_stride_n = c * k * k * oh * ow;
    for i in 0..n {
        for ch in 0..c {
            let x_base = (i * c + ch) * h * w;
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ch * k + kh) * k + kw;
                    let c_base = i * col_stride_n + row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[c_base + oy * ow + ox] = xs[x_base + iy * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    dcols: &Arr<T>,
    xshape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Arr<T> {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let mut dx = Arr::zeros(IxDyn(xshape));
    let ds = dcols.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let col_stride_n = c * k * k * oh * ow;
    for i in 0..n {
        for ch in 0..c {
            let x_base = (i * c + ch) * h * w;
            for kh in 0..k {
                for kw in 0..k {
                    let row = (ch * k + kh) * k + kw;
                    let c_base = i * col_stride_n + row * oh * ow;
                    for oy in 0..oh {
                        let iy = (oy * stride + kh) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..ow {
                            let ix = (ox * stride + kw) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[x_base + iy * w + ix as usize] += ds[c_base + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}
