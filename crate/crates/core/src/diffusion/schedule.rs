use std::f64::consts::FRAC_PI_2;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound on `alpha[t]`. The cosine curve reaches `alpha_bar = 0` at
/// `t = T`, so the last ratio would otherwise be 0.
pub const MIN_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub s: f64,
    /// Index 0..=T.
    pub alpha_bar: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma2: Vec<f64>,
}

fn cosine_f(t: f64, steps: f64, s: f64) -> f64 {
    (((t / steps + s) / (1.0 + s)) * FRAC_PI_2).cos().powi(2)
}

pub fn build_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion steps must be at least 1".into()));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Config(format!("schedule offset s must be positive, got {s}")));
    }
    let tf = steps as f64;
    let f0 = cosine_f(0.0, tf, s);
    let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| cosine_f(t as f64, tf, s) / f0).collect();
    alpha_bar[0] = 1.0;
    alpha_bar[steps] = 0.0;
    let mut alpha = vec![1.0; steps + 1];
    let mut sigma2 = vec![0.0; steps + 1];
    for t in 1..=steps {
        alpha[t] = (alpha_bar[t] / alpha_bar[t - 1]).clamp(MIN_ALPHA, 1.0);
        let denom = 1.0 - alpha_bar[t];
        sigma2[t] = if denom > 0.0 {
            (1.0 - alpha[t]) * (1.0 - alpha_bar[t - 1]) / denom
        } else {
            0.0
        };
    }
    Ok(NoiseSchedule {
        steps,
        s,
        alpha_bar,
        alpha,
        sigma2,
    })
}

impl NoiseSchedule {
    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Input(format!("diffusion step {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, a.shape(), b.shape()));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps`.
pub fn noise_with(x0: ArrayView2<f64>, eps: ArrayView2<f64>, alpha_bar: f64) -> Array2<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Zip::from(x0).and(eps).map_collect(|&x, &e| a * x + b * e)
}

pub fn forward_noise(x0: ArrayView2<f64>, t: usize, eps: ArrayView2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    same_shape(x0, eps, "noise")?;
    Ok(noise_with(x0, eps, sched.alpha_bar[t]))
}

/// `(1 + w) eps_cond - w eps_uncond`.
pub fn guided_noise(eps_cond: ArrayView2<f64>, eps_uncond: ArrayView2<f64>, w: f64) -> Result<Array2<f64>> {
    same_shape(eps_cond, eps_uncond, "unconditional noise")?;
    Ok(Zip::from(eps_cond).and(eps_uncond).map_collect(|&c, &u| (1.0 + w) * c - w * u))
}

/// One reverse update with explicit schedule values.
pub fn denoise_with(
    x_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    alpha: f64,
    alpha_bar: f64,
    sigma: f64,
    eps: ArrayView2<f64>,
) -> Array2<f64> {
    let coef = if alpha_bar < 1.0 {
        (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
    } else {
        0.0
    };
    let inv = 1.0 / alpha.sqrt();
    Zip::from(x_t)
        .and(eps_hat)
        .and(eps)
        .map_collect(|&x, &e_hat, &e| inv * (x - coef * e_hat) + sigma * e)
}

pub fn denoise_step(
    x_t: ArrayView2<f64>,
    eps_hat: ArrayView2<f64>,
    t: usize,
    sched: &NoiseSchedule,
    eps: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    same_shape(x_t, eps_hat, "predicted noise")?;
    same_shape(x_t, eps, "step noise")?;
    let sigma = if t == 1 { 0.0 } else { sched.sigma2[t].sqrt() };
    Ok(denoise_with(x_t, eps_hat, sched.alpha[t], sched.alpha_bar[t], sigma, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = build_schedule(1000, 0.008).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert_eq!(s.alpha_bar[1000], 0.0);
        let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::PI / 2.0).cos().powi(2);
        assert_abs_diff_eq!(s.alpha_bar[500], f(500.0) / f(0.0), epsilon = 1e-15);
        assert_abs_diff_eq!(s.alpha_bar[500], 0.4930, epsilon = 1e-3);
        assert!(s.alpha_bar[999] < 1e-3);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha[1..].iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(s.sigma2.iter().all(|&v| v >= 0.0));
        assert_eq!(s.sigma2[1], 0.0);
    }

    #[test]
    fn schedule_rejects_bad_config() {
        assert!(build_schedule(0, 0.008).is_err());
        assert!(build_schedule(10, 0.0).is_err());
    }

    #[test]
    fn forward_examples() {
        let x0 = arr2(&[[2.0]]);
        let e = arr2(&[[1.0]]);
        assert_eq!(noise_with(x0.view(), e.view(), 1.0), x0);
        assert_eq!(noise_with(x0.view(), e.view(), 0.0), e);
        assert_abs_diff_eq!(noise_with(x0.view(), e.view(), 0.25)[[0, 0]], 1.0 + 0.75f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(noise_with(x0.view(), e.view(), 0.25)[[0, 0]], 1.8660, epsilon = 1e-4);
        let s = build_schedule(10, 0.008).unwrap();
        assert!(forward_noise(x0.view(), 0, e.view(), &s).is_err());
        assert!(forward_noise(x0.view(), 11, e.view(), &s).is_err());
        assert_eq!(forward_noise(x0.view(), 10, e.view(), &s).unwrap(), e);
    }

    #[test]
    fn guidance_examples() {
        let c = arr2(&[[2.0, -1.0]]);
        let u = arr2(&[[1.0, 4.0]]);
        assert_eq!(guided_noise(c.view(), u.view(), 0.0).unwrap(), c);
        assert_eq!(guided_noise(c.view(), u.view(), -1.0).unwrap(), u);
        assert_eq!(guided_noise(c.view(), u.view(), 1.0).unwrap()[[0, 0]], 3.0);
        assert!(guided_noise(c.view(), arr2(&[[1.0]]).view(), 1.0).is_err());
    }

    #[test]
    fn denoise_examples() {
        let x = arr2(&[[1.0, -3.0]]);
        let z = arr2(&[[0.0, 0.0]]);
        let e_hat = arr2(&[[0.2, 0.7]]);
        assert_eq!(denoise_with(x.view(), e_hat.view(), 1.0, 0.5, 0.0, z.view()), x);
        let y = denoise_with(arr2(&[[1.0]]).view(), arr2(&[[0.2]]).view(), 0.99, 0.5, 0.0, arr2(&[[0.0]]).view());
        let expect = (1.0 - 0.01 / 0.5f64.sqrt() * 0.2) / 0.99f64.sqrt();
        assert_abs_diff_eq!(y[[0, 0]], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(y[[0, 0]], 1.00219, epsilon = 1e-5);
        let y = denoise_with(x.view(), z.view(), 0.81, 0.5, 0.0, z.view());
        assert_abs_diff_eq!(y[[0, 1]], -3.0 / 0.9, epsilon = 1e-15);
        let y = denoise_with(x.view(), e_hat.view(), 0.9, 1.0, 0.0, z.view());
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn final_step_adds_no_noise() {
        let s = build_schedule(50, 0.008).unwrap();
        let x = arr2(&[[0.3]]);
        let a = denoise_step(x.view(), x.view(), 1, &s, arr2(&[[0.0]]).view()).unwrap();
        let b = denoise_step(x.view(), x.view(), 1, &s, arr2(&[[5.0]]).view()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn guidance_is_affine(
            c in proptest::collection::vec(-10f64..10.0, 6),
            u in proptest::collection::vec(-10f64..10.0, 6),
            w in -2f64..15.0, a in -5f64..5.0,
        ) {
            let c = Array2::from_shape_vec((2, 3), c).unwrap();
            let u = Array2::from_shape_vec((2, 3), u).unwrap();
            let lhs = guided_noise((&c * a).view(), (&u * a).view(), w).unwrap();
            let rhs = guided_noise(c.view(), u.view(), w).unwrap() * a;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() <= 1e-12 * (1.0 + r.abs()));
            }
        }

        /// With the true noise as the estimate and no step noise, the reverse
        /// update equals the Gaussian posterior mean given `x0`.
        #[test]
        fn reverse_mean_matches_posterior(t in 2usize..100, x0 in -3f64..3.0, e in -3f64..3.0) {
            let s = build_schedule(100, 0.008).unwrap();
            let (ab, ab_prev, a) = (s.alpha_bar[t], s.alpha_bar[t - 1], s.alpha[t]);
            prop_assume!((a * ab_prev - ab).abs() < 1e-15);
            let x0a = arr2(&[[x0]]);
            let ea = arr2(&[[e]]);
            let xt = forward_noise(x0a.view(), t, ea.view(), &s).unwrap();
            let back = denoise_with(xt.view(), ea.view(), a, ab, 0.0, arr2(&[[0.0]]).view());
            let beta = 1.0 - a;
            let mean = ab_prev.sqrt() * beta / (1.0 - ab) * x0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab) * xt[[0, 0]];
            prop_assert!((back[[0, 0]] - mean).abs() < 1e-9);
        }
    }
}
