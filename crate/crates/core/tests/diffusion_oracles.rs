//! Independent oracles for the diffusion primitives.
//!
//! The forward process is checked against its analytic mean/variance by
//! Monte Carlo; the deterministic sampler is checked by driving it with the
//! exact posterior noise predictor of a 1-D Gaussian, for which the target
//! distribution is known in closed form.

use hoi_forge_core::diffusion::{
    cfg_combine, ddim_step, eps_loss, forward_diffuse, predict_x0, renoise, DiffusionSchedule,
    ScheduleConfig,
};
use hoi_forge_core::graph::Graph;
use hoi_forge_core::nn::numeric_grad;
use hoi_forge_core::rng::{self, normal_arr};
use hoi_forge_core::Arr;
use ndarray::IxDyn;

fn default_sched_f64() -> DiffusionSchedule<f64> {
    DiffusionSchedule::new(ScheduleConfig::default()).unwrap()
}

#[test]
fn forward_diffuse_matches_analytic_moments() {
    let sched = default_sched_f64();
    let mut r = rng::seeded(0xD1FF);
    let x0 = Arr::from_elem(IxDyn(&[4]), 0.5f64);
    for &t in &[1usize, 100, 500, 1000] {
        let ab = sched.alpha_bar(t);
        let n_draws = 10_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let n_vals = (n_draws * x0.len()) as f64;
        for _ in 0..n_draws {
            let noise = normal_arr::<f64>(&mut r, &[4]);
            let xt = forward_diffuse(&x0, t, &noise, &sched).unwrap();
            for v in xt.iter() {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / n_vals;
        let var = sumsq / n_vals - mean * mean;
        let exp_mean = ab.sqrt() * 0.5;
        let exp_var = 1.0 - ab;
        let se_mean = exp_var.sqrt() / n_vals.sqrt();
        let se_var = exp_var * (2.0 / (n_vals - 1.0)).sqrt();
        assert!(
            (mean - exp_mean).abs() < 3.0 * se_mean + 1e-12,
            "t={t}: mean {mean} vs {exp_mean}"
        );
        assert!(
            (var - exp_var).abs() < 3.0 * se_var,
            "t={t}: var {var} vs {exp_var}"
        );
    }
}

#[test]
fn predict_x0_inverts_forward_exactly() {
    let sched = default_sched_f64();
    let mut r = rng::seeded(0x11);
    for &t in &[1usize, 37, 613, 1000] {
        let x0 = normal_arr::<f64>(&mut r, &[3, 5]);
        let noise = normal_arr::<f64>(&mut r, &[3, 5]);
        let xt = forward_diffuse(&x0, t, &noise, &sched).unwrap();
        let rec = predict_x0(&xt, &noise, t, &sched).unwrap();
        for (a, b) in x0.iter().zip(rec.iter()) {
            assert!((a - b).abs() / a.abs().max(1.0) < 1e-9, "t={t}: {a} vs {b}");
        }
    }
    // Single-precision round trip stays within 1e-5 relative error.
    let sched32: DiffusionSchedule<f32> = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
    let mut r = rng::seeded(0x12);
    for &t in &[1usize, 500, 1000] {
        let x0 = normal_arr::<f32>(&mut r, &[64]);
        let noise = normal_arr::<f32>(&mut r, &[64]);
        let xt = forward_diffuse(&x0, t, &noise, &sched32).unwrap();
        let rec = predict_x0(&xt, &noise, t, &sched32).unwrap();
        for (a, b) in x0.iter().zip(rec.iter()) {
            assert!(
                (a - b).abs() / a.abs().max(1.0) < 1e-5,
                "t={t}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn ddim_with_exact_gaussian_predictor_recovers_target() {
    // Data distribution N(mu0, s0^2). The posterior-mean noise predictor is
    // exact for a Gaussian, so 50 deterministic steps from pure noise must
    // land near the data distribution.
    let (mu0, s0) = (0.7f64, 0.5f64);
    let sched = default_sched_f64();
    let ts = sched.sample_timesteps(50).unwrap();
    let n = 10_000usize;
    let mut r = rng::seeded(0xDD1);
    let mut x = normal_arr::<f64>(&mut r, &[n]);
    for (i, &t) in ts.iter().enumerate().rev() {
        let ab = sched.alpha_bar(t);
        let denom = ab * s0 * s0 + (1.0 - ab);
        let eps_hat = x.mapv(|v| {
            let post_mean = mu0 + ab.sqrt() * s0 * s0 / denom * (v - ab.sqrt() * mu0);
            (v - ab.sqrt() * post_mean) / (1.0 - ab).sqrt()
        });
        let t_prev = if i == 0 { 0 } else { ts[i - 1] };
        x = ddim_step(&x, &eps_hat, t, t_prev, &sched, 0.0, None, None).unwrap();
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    assert!(
        (mean - mu0).abs() < 0.1 * mu0.abs(),
        "sample mean {mean} vs {mu0}"
    );
    assert!(
        (var.sqrt() - s0).abs() < 0.1 * s0,
        "sample std {} vs {s0}",
        var.sqrt()
    );
}

#[test]
fn ddim_step_is_bit_deterministic() {
    let sched = default_sched_f64();
    let mut r = rng::seeded(0xDE7);
    let x = normal_arr::<f64>(&mut r, &[16]);
    let e = normal_arr::<f64>(&mut r, &[16]);
    let a = ddim_step(&x, &e, 500, 480, &sched, 0.0, None, None).unwrap();
    let b = ddim_step(&x, &e, 500, 480, &sched, 0.0, None, None).unwrap();
    assert_eq!(
        a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn cfg_identities() {
    let mut r = rng::seeded(0xCF6);
    let a = normal_arr::<f64>(&mut r, &[7, 3]);
    let b = normal_arr::<f64>(&mut r, &[7, 3]);
    // w = 0 returns the unconditional branch exactly.
    let w0 = cfg_combine(&a, &b, 0.0).unwrap();
    assert_eq!(
        w0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    // w = 1 returns the conditional branch.
    let w1 = cfg_combine(&a, &b, 1.0).unwrap();
    for (x, y) in w1.iter().zip(a.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
    // Swapping the branches while complementing the weight is a no-op:
    // cfg(a,b,w) = w*a + (1-w)*b = cfg(b,a,1-w).
    let w = 7.5;
    let lhs = cfg_combine(&a, &b, w).unwrap();
    let swapped = cfg_combine(&b, &a, 1.0 - w).unwrap();
    for (x, y) in lhs.iter().zip(swapped.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
    // Affine weights sum to one, so the two swap orders add up to a + b.
    let sum = &cfg_combine(&a, &b, w).unwrap() + &cfg_combine(&b, &a, w).unwrap();
    let rhs = &a + &b;
    for (x, y) in sum.iter().zip(rhs.iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn renoise_is_forward_diffuse() {
    let sched = default_sched_f64();
    let mut r = rng::seeded(0x4E);
    let x = normal_arr::<f64>(&mut r, &[5]);
    let noise = normal_arr::<f64>(&mut r, &[5]);
    let a = renoise(&x, 123, &noise, &sched).unwrap();
    let b = forward_diffuse(&x, 123, &noise, &sched).unwrap();
    assert_eq!(a, b);
}

#[test]
fn losses_match_brute_force() {
    let mut r = rng::seeded(0x105);
    let p = normal_arr::<f64>(&mut r, &[4, 6]);
    let t = normal_arr::<f64>(&mut r, &[4, 6]);
    let got = eps_loss(&p, &t).unwrap();
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(t.iter()) {
        acc += (a - b) * (a - b);
    }
    acc /= 24.0;
    assert!((got - acc).abs() < 1e-12);
    assert!(eps_loss(&p, &normal_arr::<f64>(&mut r, &[3])).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng::seeded(0x106);
    let p0 = normal_arr::<f64>(&mut r, &[3, 4]);
    let target = normal_arr::<f64>(&mut r, &[3, 4]);

    let run = |p: &Arr<f64>| -> (f64, Option<Arr<f64>>) {
        let mut g = Graph::new();
        let pv = g.leaf(p.clone());
        let tv = g.constant(target.clone());
        let loss = g.mse(pv, tv);
        let lv = g.value(loss)[[0]];
        g.backward(loss);
        (lv, g.take_grad(pv))
    };
    let (_, grad) = run(&p0);
    let analytic_tape = grad.unwrap();
    // Closed form: 2 (p - t) / N.
    let analytic_closed = (&p0 - &target).mapv(|v| 2.0 * v / 12.0);
    let numeric = numeric_grad(&mut |p: &Arr<f64>| run(p).0, &p0, 1e-5);
    for ((a, b), c) in analytic_tape
        .iter()
        .zip(analytic_closed.iter())
        .zip(numeric.iter())
    {
        let denom = a.abs().max(1e-3);
        assert!((a - b).abs() / denom < 1e-9);
        assert!((a - c).abs() / denom < 1e-4);
    }
}
