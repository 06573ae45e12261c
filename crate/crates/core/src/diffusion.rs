//! Noise schedules and the shared diffusion primitives.
//!
//! One schedule instance is shared by every diffusion process in the
//! pipeline (video planner, motion refiner, pose-conditioned regenerator).
//! Timesteps are 1-based: `t` ranges over `1..=steps`, and `alpha_bar(0)`
//! is defined as 1 so that stepping to `t_prev = 0` returns the clean
//! estimate.
//!
//! Schedule tables are computed at f64 and cast, so f32 and f64
//! instantiations agree to f32 rounding.

use crate::{Arr, Error, Result, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    /// Number of train-time diffusion steps.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Linear,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionSchedule<T: Scalar> {
    pub config: ScheduleConfig,
    betas: Vec<T>,
    alpha_bars: Vec<T>,
}

impl<T: Scalar> DiffusionSchedule<T> {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::contract("schedule needs at least one step"));
        }
        let n = config.steps;
        let betas_f64: Vec<f64> = match config.kind {
            ScheduleKind::Linear => {
                if !(config.beta_start > 0.0 && config.beta_end < 1.0 && config.beta_start <= config.beta_end)
                {
                    return Err(Error::contract(format!(
                        "invalid beta range [{}, {}]",
                        config.beta_start, config.beta_end
                    )));
                }
                (0..n)
                    .map(|i| {
                        if n == 1 {
                            config.beta_start
                        } else {
                            config.beta_start
                                + (config.beta_end - config.beta_start) * i as f64 / (n - 1) as f64
                        }
                    })
                    .collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| ((t / n as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
                    .cos()
                    .powi(2);
                let f0 = f(0.0);
                (1..=n)
                    .map(|t| {
                        let ab_t = f(t as f64) / f0;
                        let ab_prev = f((t - 1) as f64) / f0;
                        (1.0 - ab_t / ab_prev).min(0.999)
                    })
                    .collect()
            }
        };
        let mut alpha_bars_f64 = Vec::with_capacity(n);
        let mut prod = 1.0f64;
        for &b in &betas_f64 {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::contract(format!("beta {b} outside (0, 1)")));
            }
            prod *= 1.0 - b;
            alpha_bars_f64.push(prod);
        }
        for w in alpha_bars_f64.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::contract("alpha_bar must strictly decrease"));
            }
        }
        Ok(DiffusionSchedule {
            config,
            betas: betas_f64.iter().map(|&b| T::from_f64_c(b)).collect(),
            alpha_bars: alpha_bars_f64.iter().map(|&a| T::from_f64_c(a)).collect(),
        })
    }

    pub fn t_max(&self) -> usize {
        self.config.steps
    }

    /// `beta_t` for `t` in `1..=steps`.
    pub fn beta(&self, t: usize) -> T {
        self.betas[t - 1]
    }

    /// Cumulative signal level; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> T {
        if t == 0 {
            T::one()
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.t_max()
            )));
        }
        Ok(())
    }

    /// Ascending inference timesteps with uniform stride over `1..=steps`.
    ///
    /// Position `k` (1-based) in the returned list is the chain position a
    /// partial refinement counts its steps against.
    pub fn sample_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.t_max() {
            return Err(Error::contract(format!(
                "inference step count {n} outside 1..={}",
                self.t_max()
            )));
        }
        let t_max = self.t_max() as f64;
        let mut ts: Vec<usize> = (1..=n)
            .map(|k| ((k as f64 * t_max / n as f64).round() as usize).max(1))
            .collect();
        ts.dedup();
        if ts.len() != n {
            return Err(Error::contract(format!(
                "inference step count {n} collapses duplicate timesteps"
            )));
        }
        Ok(ts)
    }
}

fn check_same_shape<T: Scalar>(a: &Arr<T>, b: &Arr<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn forward_diffuse<T: Scalar>(
    x0: &Arr<T>,
    t: usize,
    noise: &Arr<T>,
    sched: &DiffusionSchedule<T>,
) -> Result<Arr<T>> {
    sched.check_t(t)?;
    check_same_shape(x0, noise, "forward_diffuse")?;
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    let b = (T::one() - ab).sqrt();
    Ok(x0.mapv(|v| v * a) + &noise.mapv(|v| v * b))
}

/// Noise injection used by the partial-refinement path; identical math to
/// [`forward_diffuse`], named for the direction it is used in.
pub fn renoise<T: Scalar>(
    x0_hat: &Arr<T>,
    t: usize,
    noise: &Arr<T>,
    sched: &DiffusionSchedule<T>,
) -> Result<Arr<T>> {
    forward_diffuse(x0_hat, t, noise, sched)
}

/// Mean squared error over all elements; the noise-prediction objective.
pub fn eps_loss<T: Scalar>(pred: &Arr<T>, target: &Arr<T>) -> Result<T> {
    check_same_shape(pred, target, "eps_loss")?;
    let n = T::from_usize(pred.len()).expect("len fits scalar");
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        / n)
}

/// Mean squared error between predicted and true clean samples; the
/// clean-sample objective used by the motion refiner.
pub fn x0_loss<T: Scalar>(pred: &Arr<T>, target: &Arr<T>) -> Result<T> {
    check_same_shape(pred, target, "x0_loss")?;
    eps_loss(pred, target)
}

/// Clean-sample estimate implied by a noise prediction.
pub fn predict_x0<T: Scalar>(
    x_t: &Arr<T>,
    eps_hat: &Arr<T>,
    t: usize,
    sched: &DiffusionSchedule<T>,
) -> Result<Arr<T>> {
    sched.check_t(t)?;
    check_same_shape(x_t, eps_hat, "predict_x0")?;
    let ab = sched.alpha_bar(t);
    let inv_sa = ab.sqrt().recip();
    let sb = (T::one() - ab).sqrt();
    let data: Vec<T> = x_t
        .iter()
        .zip(eps_hat.iter())
        .map(|(&x, &e)| (x - sb * e) * inv_sa)
        .collect();
    Ok(Arr::from_shape_vec(x_t.raw_dim(), data).expect("shape preserved"))
}

/// One DDIM update from `t` to `t_prev < t`.
///
/// With `eta = 0` the step is deterministic and `noise` is ignored; a
/// positive `eta` interpolates toward ancestral sampling and requires
/// `noise` when `t_prev > 0`. An optional clamp is applied to the implied
/// clean estimate before re-projection.
pub fn ddim_step<T: Scalar>(
    x_t: &Arr<T>,
    eps_hat: &Arr<T>,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule<T>,
    eta: f64,
    noise: Option<&Arr<T>>,
    clamp_x0: Option<(T, T)>,
) -> Result<Arr<T>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::contract(format!(
            "ddim_step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    check_same_shape(x_t, eps_hat, "ddim_step")?;
    let ab_t = sched.alpha_bar(t).to_f64_c();
    let ab_p = sched.alpha_bar(t_prev).to_f64_c();
    let mut x0 = predict_x0(x_t, eps_hat, t, sched)?;
    if let Some((lo, hi)) = clamp_x0 {
        x0.mapv_inplace(|v| v.max(lo).min(hi));
    }
    let sigma = if eta > 0.0 {
        eta * ((1.0 - ab_p) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_p).sqrt()
    } else {
        0.0
    };
    let dir_coeff = T::from_f64_c((1.0 - ab_p - sigma * sigma).max(0.0).sqrt());
    let sa_p = T::from_f64_c(ab_p.sqrt());
    let mut out = x0.mapv(|v| v * sa_p) + &eps_hat.mapv(|v| v * dir_coeff);
    if sigma > 0.0 && t_prev > 0 {
        let noise = noise.ok_or_else(|| {
            Error::contract("ddim_step with eta > 0 and t_prev > 0 requires noise")
        })?;
        check_same_shape(x_t, noise, "ddim_step noise")?;
        let s = T::from_f64_c(sigma);
        out = out + &noise.mapv(|v| v * s);
    }
    Ok(out)
}

/// Classifier-free guidance combination `uncond + w (cond - uncond)`.
pub fn cfg_combine<T: Scalar>(eps_cond: &Arr<T>, eps_uncond: &Arr<T>, w: T) -> Result<Arr<T>> {
    check_same_shape(eps_cond, eps_uncond, "cfg_combine")?;
    let data: Vec<T> = eps_uncond
        .iter()
        .zip(eps_cond.iter())
        .map(|(&u, &c)| u + w * (c - u))
        .collect();
    Ok(Arr::from_shape_vec(eps_cond.raw_dim(), data).expect("shape preserved"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_endpoint_is_nearly_noise() {
        let s: DiffusionSchedule<f64> = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        assert!(s.alpha_bar(s.t_max()) < 1e-2);
        assert!((s.beta(1) - 1e-4).abs() < 1e-12);
        assert!((s.beta(1000) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_is_valid() {
        let s: DiffusionSchedule<f64> = DiffusionSchedule::new(ScheduleConfig {
            kind: ScheduleKind::Cosine,
            steps: 100,
            beta_start: 0.0,
            beta_end: 0.0,
        })
        .unwrap();
        for t in 1..=100 {
            let b = s.beta(t);
            assert!(b > 0.0 && b < 1.0);
        }
    }

    #[test]
    fn timestep_ladder_is_uniform() {
        let s: DiffusionSchedule<f64> = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let ts = s.sample_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 20);
        assert_eq!(ts[49], 1000);
        for w in ts.windows(2) {
            assert_eq!(w[1] - w[0], 20);
        }
    }

    #[test]
    fn rejects_bad_timesteps() {
        let s: DiffusionSchedule<f64> = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let x = Arr::from_elem(ndarray::IxDyn(&[2]), 0.5);
        assert!(forward_diffuse(&x, 0, &x, &s).is_err());
        assert!(forward_diffuse(&x, 1001, &x, &s).is_err());
        assert!(ddim_step(&x, &x, 5, 5, &s, 0.0, None, None).is_err());
    }

    #[test]
    fn stochastic_steps_need_noise_and_stay_deterministic_given_it() {
        let s: DiffusionSchedule<f64> = DiffusionSchedule::new(ScheduleConfig::default()).unwrap();
        let dim = ndarray::IxDyn(&[5]);
        let x = Arr::from_shape_vec(dim.clone(), vec![0.3, -0.7, 1.2, 0.05, -1.4]).unwrap();
        let e = Arr::from_shape_vec(dim.clone(), vec![-0.2, 0.9, 0.4, -1.1, 0.6]).unwrap();
        let n = Arr::from_shape_vec(dim, vec![1.0, -0.5, 0.25, 2.0, -0.125]).unwrap();

        // An intermediate stochastic step must be handed its noise source.
        assert!(ddim_step(&x, &e, 500, 480, &s, 1.0, None, None).is_err());

        let a = ddim_step(&x, &e, 500, 480, &s, 1.0, Some(&n), None).unwrap();
        let b = ddim_step(&x, &e, 500, 480, &s, 1.0, Some(&n), None).unwrap();
        let det = ddim_step(&x, &e, 500, 480, &s, 0.0, None, None).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(det.iter()).any(|(p, q)| p != q));

        // Stepping all the way to t_prev = 0 collapses to the clean
        // estimate even with eta > 0: there is nothing left to re-noise.
        let last = ddim_step(&x, &e, 500, 0, &s, 1.0, Some(&n), None).unwrap();
        let x0 = predict_x0(&x, &e, 500, &s).unwrap();
        for (p, q) in last.iter().zip(x0.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
