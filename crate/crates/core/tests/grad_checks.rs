//! Finite-difference verification of every graph op's backward pass.
//!
//! Each check builds `loss = mean(op(inputs) * probe)` with a fixed random
//! probe, takes the tape gradient for one input, and compares it against a
//! central-difference gradient of the same forward computation.

use hoi_forge_core::graph::{Graph, Var};
use hoi_forge_core::nn::{self, numeric_grad, Adam, Attention, Film, LayerNorm, Linear, ParamStore};
use hoi_forge_core::rng::{self, normal_arr};
use hoi_forge_core::Arr;
use ndarray::IxDyn;

const FD_EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn assert_grads_close(analytic: &Arr<f64>, numeric: &Arr<f64>, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = 1.0f64.max(a.abs()).max(n.abs());
        assert!(
            (a - n).abs() / denom < TOL,
            "{what}: analytic {a} vs numeric {n}"
        );
    }
}

/// Checks d loss / d input for `forward`, where `forward` maps graph + input
/// var to the op output. The probe makes the loss sensitive to every output
/// element.
fn check_input_grad(
    what: &str,
    shape: &[usize],
    forward: impl Fn(&mut Graph<f64>, Var) -> Var,
) {
    let mut r = rng::seeded(0xC0FFEE ^ shape.len() as u64);
    let x0: Arr<f64> = normal_arr(&mut r, shape);
    let mut probe_holder: Option<Arr<f64>> = None;

    let run = |x: &Arr<f64>, probe_holder: &mut Option<Arr<f64>>| -> (f64, Option<Arr<f64>>) {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = forward(&mut g, xv);
        let probe = probe_holder
            .get_or_insert_with(|| {
                let mut pr = rng::seeded(0xBEEF);
                normal_arr(&mut pr, g.value(y).shape())
            })
            .clone();
        let pv = g.constant(probe);
        let prod = g.mul(y, pv);
        let loss = g.mean_all(prod);
        let lv = g.value(loss)[[0]];
        g.backward(loss);
        (lv, g.take_grad(xv))
    };

    let (_, grad) = run(&x0, &mut probe_holder);
    let analytic = grad.expect("input gradient present");
    let numeric = numeric_grad(
        &mut |x: &Arr<f64>| run(x, &mut probe_holder).0,
        &x0,
        FD_EPS,
    );
    assert_grads_close(&analytic, &numeric, what);
}

#[test]
fn grad_add_sub_mul() {
    check_input_grad("add lhs", &[2, 3], |g, x| {
        let mut r = rng::seeded(1);
        let o = g.constant(normal_arr(&mut r, &[2, 3]));
        g.add(x, o)
    });
    check_input_grad("sub rhs", &[2, 3], |g, x| {
        let mut r = rng::seeded(2);
        let o = g.constant(normal_arr(&mut r, &[2, 3]));
        g.sub(o, x)
    });
    check_input_grad("mul", &[2, 3], |g, x| {
        let mut r = rng::seeded(3);
        let o = g.constant(normal_arr(&mut r, &[2, 3]));
        g.mul(x, o)
    });
}

#[test]
fn grad_broadcast_ops() {
    // Broadcast rhs as the differentiated input: gradient must reduce.
    check_input_grad("add_bcast rhs [4]", &[4], |g, x| {
        let mut r = rng::seeded(4);
        let a = g.constant(normal_arr(&mut r, &[2, 3, 4]));
        g.add_bcast(a, x)
    });
    check_input_grad("add_bcast rhs [1,3,1]", &[1, 3, 1], |g, x| {
        let mut r = rng::seeded(5);
        let a = g.constant(normal_arr(&mut r, &[2, 3, 4]));
        g.add_bcast(a, x)
    });
    check_input_grad("mul_bcast rhs [1,3,1]", &[1, 3, 1], |g, x| {
        let mut r = rng::seeded(6);
        let a = g.constant(normal_arr(&mut r, &[2, 3, 4]));
        g.mul_bcast(a, x)
    });
    check_input_grad("mul_bcast lhs", &[2, 3, 4], |g, x| {
        let mut r = rng::seeded(7);
        let b = g.constant(normal_arr(&mut r, &[4]));
        g.mul_bcast(x, b)
    });
}

#[test]
fn grad_scalar_and_activations() {
    check_input_grad("scale", &[3, 2], |g, x| g.scale(x, -1.7));
    check_input_grad("add_scalar", &[3, 2], |g, x| g.add_scalar(x, 0.3));
    check_input_grad("silu", &[3, 5], |g, x| g.silu(x));
    check_input_grad("tanh", &[3, 5], |g, x| g.tanh(x));
    check_input_grad("softmax", &[4, 6], |g, x| g.softmax_last(x));
    check_input_grad("normalize", &[4, 6], |g, x| g.normalize_last(x, 1e-5));
}

#[test]
fn grad_shape_ops() {
    check_input_grad("reshape", &[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
    check_input_grad("permute", &[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
    check_input_grad("narrow", &[5, 4], |g, x| g.narrow(x, 0, 1, 3));
    check_input_grad("concat", &[2, 3], |g, x| {
        let mut r = rng::seeded(8);
        let o = g.constant(normal_arr(&mut r, &[2, 2]));
        g.concat(1, &[x, o])
    });
    check_input_grad("gather", &[5, 3], |g, x| {
        g.gather_rows(x, vec![4, 0, 0, 2])
    });
}

#[test]
fn grad_matmul_variants() {
    check_input_grad("matmul lhs", &[3, 4], |g, x| {
        let mut r = rng::seeded(9);
        let o = g.constant(normal_arr(&mut r, &[4, 2]));
        g.matmul(x, o)
    });
    check_input_grad("matmul rhs", &[4, 2], |g, x| {
        let mut r = rng::seeded(10);
        let o = g.constant(normal_arr(&mut r, &[3, 4]));
        g.matmul(o, x)
    });
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check_input_grad(&format!("bmm a ta={ta} tb={tb}"), &a_shape, move |g, x| {
            let mut r = rng::seeded(11);
            let o = g.constant(normal_arr(&mut r, &b_shape));
            g.bmm(x, ta, o, tb)
        });
        check_input_grad(&format!("bmm b ta={ta} tb={tb}"), &b_shape, move |g, x| {
            let mut r = rng::seeded(12);
            let o = g.constant(normal_arr(&mut r, &a_shape));
            g.bmm(o, ta, x, tb)
        });
    }
}

#[test]
fn grad_conv_all_inputs() {
    for (k, stride, pad) in [(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
        let tag = format!("conv k{k} s{stride}");
        check_input_grad(&format!("{tag} x"), &[2, 3, 6, 6], move |g, x| {
            let mut r = rng::seeded(13);
            let w = g.constant(normal_arr(&mut r, &[4, 3, k, k]));
            let b = g.constant(normal_arr(&mut r, &[4]));
            g.conv2d(x, w, b, stride, pad)
        });
        check_input_grad(&format!("{tag} w"), &[4, 3, k, k], move |g, w| {
            let mut r = rng::seeded(14);
            let x = g.constant(normal_arr(&mut r, &[2, 3, 6, 6]));
            let b = g.constant(normal_arr(&mut r, &[4]));
            g.conv2d(x, w, b, stride, pad)
        });
        check_input_grad(&format!("{tag} b"), &[4], move |g, b| {
            let mut r = rng::seeded(15);
            let x = g.constant(normal_arr(&mut r, &[2, 3, 6, 6]));
            let w = g.constant(normal_arr(&mut r, &[4, 3, k, k]));
            g.conv2d(x, w, b, stride, pad)
        });
    }
}

#[test]
fn grad_upsample() {
    check_input_grad("upsample2", &[2, 3, 4, 4], |g, x| g.upsample2(x));
}

#[test]
fn grad_composite_layers() {
    // Attention: differentiate through the query input with all weights fixed.
    let mut r = rng::seeded(20);
    let mut ps: ParamStore<f64> = ParamStore::new();
    let attn = Attention::new("at", 8, 6, 2);
    attn.init(&mut ps, &mut r);
    let kv0 = normal_arr::<f64>(&mut r, &[3, 5, 6]);
    check_input_grad("attention q", &[3, 4, 8], move |g, x| {
        let bd = nn::bind(g, &ps);
        let kv = g.constant(kv0.clone());
        attn.apply(g, &bd, x, kv)
    });

    let mut r = rng::seeded(21);
    let mut ps2: ParamStore<f64> = ParamStore::new();
    let ln = LayerNorm::new("ln", 6);
    ln.init(&mut ps2);
    // Make the affine non-trivial so its backward is exercised.
    {
        let gmut = &mut ps2.get_mut("ln.g").value;
        *gmut = normal_arr(&mut r, &[6]);
    }
    check_input_grad("layernorm x", &[4, 6], move |g, x| {
        let bd = nn::bind(g, &ps2);
        ln.apply(g, &bd, x)
    });

    let mut r = rng::seeded(22);
    let mut ps3: ParamStore<f64> = ParamStore::new();
    let film = Film::new("fm", 5, 3);
    film.init(&mut ps3, &mut r);
    {
        // Zero-initialized projections have identically zero gradients for the
        // shift half; perturb so the check is non-trivial.
        let w = &mut ps3.get_mut("fm.proj.w").value;
        *w = normal_arr(&mut r, &[5, 6]);
    }
    let cond0 = normal_arr::<f64>(&mut r, &[1, 5]);
    check_input_grad("film x", &[2, 3, 4, 4], move |g, x| {
        let bd = nn::bind(g, &ps3);
        let cond = g.constant(cond0.clone());
        film.apply(g, &bd, x, cond)
    });
}

#[test]
fn grad_through_parameters() {
    // End-to-end parameter gradient through a small MLP, checked against FD
    // on the parameter array itself.
    let mut r = rng::seeded(30);
    let x0 = normal_arr::<f64>(&mut r, &[4, 3]);
    let target = normal_arr::<f64>(&mut r, &[4, 2]);
    let w1_0 = normal_arr::<f64>(&mut r, &[3, 5]);
    let w2_0 = normal_arr::<f64>(&mut r, &[5, 2]);

    let run = |w1: &Arr<f64>| -> (f64, Arr<f64>) {
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w1v = g.leaf(w1.clone());
        let w2v = g.constant(w2_0.clone());
        let t = g.constant(target.clone());
        let h = g.matmul(x, w1v);
        let h = g.silu(h);
        let y = g.matmul(h, w2v);
        let loss = g.mse(y, t);
        let lv = g.value(loss)[[0]];
        g.backward(loss);
        (lv, g.take_grad(w1v).expect("w1 grad"))
    };

    let (_, analytic) = run(&w1_0);
    let numeric = numeric_grad(&mut |w: &Arr<f64>| run(w).0, &w1_0, FD_EPS);
    assert_grads_close(&analytic, &numeric, "mlp w1");
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut r = rng::seeded(31);
    let mut ps: ParamStore<f64> = ParamStore::new();
    Linear::new("a", 3, 3).init(&mut ps, &mut r);
    Linear::new("b", 3, 2).init(&mut ps, &mut r);
    ps.set_trainable("a", false);

    let mut g = Graph::new();
    let bd = nn::bind(&mut g, &ps);
    let x = g.constant(normal_arr::<f64>(&mut r, &[4, 3]));
    let h = Linear::new("a", 3, 3).apply(&mut g, &bd, x);
    let y = Linear::new("b", 3, 2).apply(&mut g, &bd, h);
    let t = g.constant(Arr::zeros(IxDyn(&[4, 2])));
    let loss = g.mse(y, t);
    g.backward(loss);
    let grads = nn::collect_grads(&mut g, &bd);
    assert!(grads.contains_key("b.w"));
    assert!(grads.contains_key("b.b"));
    assert!(!grads.contains_key("a.w"));
    assert!(!grads.contains_key("a.b"));
}

#[test]
fn adam_descends_quadratic() {
    let mut ps: ParamStore<f64> = ParamStore::new();
    ps.insert("x", Arr::from_elem(IxDyn(&[4]), 3.0));
    let mut opt = Adam::new(0.1);
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        ps.zero_grads();
        let loss: f64 = ps.get("x").value.iter().map(|v| v * v).sum();
        let grad = ps.get("x").value.mapv(|v| 2.0 * v);
        let mut gm = std::collections::HashMap::new();
        gm.insert("x".to_string(), grad);
        ps.accumulate(&gm, 1.0);
        opt.step(&mut ps);
        last = loss;
    }
    assert!(last < 1e-3, "quadratic not minimized: {last}");
}

#[test]
fn conv_matches_direct_computation() {
    // Cross-check the im2col path against a naive nested-loop convolution.
    let mut r = rng::seeded(40);
    let x = normal_arr::<f64>(&mut r, &[1, 2, 5, 5]);
    let w = normal_arr::<f64>(&mut r, &[3, 2, 3, 3]);
    let b = normal_arr::<f64>(&mut r, &[3]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let bv = g.constant(b.clone());
    let y = g.conv2d(xv, wv, bv, 1, 1);
    let yv = g.value(y);
    for oc in 0..3 {
        for oy in 0..5i64 {
            for ox in 0..5i64 {
                let mut acc = b[[oc]];
                for ic in 0..2 {
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let iy = oy + ky - 1;
                            let ix = ox + kx - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 5 {
                                continue;
                            }
                            acc += x[[0, ic, iy as usize, ix as usize]]
                                * w[[oc, ic, ky as usize, kx as usize]];
                        }
                    }
                }
                let got = yv[[0, oc, oy as usize, ox as usize]];
                assert!((got - acc).abs() < 1e-12, "conv mismatch at {oc},{oy},{ox}");
            }
        }
    }
}
