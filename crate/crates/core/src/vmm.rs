//! Second-order non-holonomic vehicle motion model.
//!
//! A vehicle is driven by a yaw rate and a longitudinal acceleration per
//! step. Integrating bounded inputs through this model yields trajectories a
//! real vehicle can follow; extracting inputs from a recorded trajectory gives
//! the training targets for the generative model.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioSample;

/// Displacements shorter than this are treated as standstill.
const STANDSTILL_EPS: f64 = 1e-9;
/// Speeds below this make the observed velocity direction meaningless.
const MIN_HEADING_SPEED: f64 = 1e-6;
/// Tolerance applied by [`drivability_audit`].
pub const AUDIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Speed, never negative.
    pub v: f64,
    /// Heading in (-pi, pi].
    pub psi: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            v: v.max(0.0),
            psi: wrap_angle(psi),
        }
    }
}

/// Yaw-rate (rad/s) and longitudinal-acceleration (m/s^2) sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionParamSeq {
    pub yaw_rate: Vec<f64>,
    pub accel: Vec<f64>,
}

impl MotionParamSeq {
    pub fn zeros(len: usize) -> Self {
        Self {
            yaw_rate: vec![0.0; len],
            accel: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.yaw_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.yaw_rate.is_empty()
    }

    /// Channel-major `[2, T]` array: row 0 yaw rate, row 1 acceleration.
    pub fn to_array(&self) -> Array2<f64> {
        let t = self.len();
        let mut a = Array2::zeros((2, t));
        for k in 0..t {
            a[[0, k]] = self.yaw_rate[k];
            a[[1, k]] = self.accel[k];
        }
        a
    }

    pub fn from_channels(data: &[f64], len: usize) -> Self {
        assert_eq!(data.len(), 2 * len);
        Self {
            yaw_rate: data[..len].to_vec(),
            accel: data[len..].to_vec(),
        }
    }

    pub fn to_channels(&self) -> Vec<f64> {
        let mut out = self.yaw_rate.clone();
        out.extend_from_slice(&self.accel);
        out
    }

    pub fn within(&self, lim: &PhysicalLimits) -> bool {
        self.yaw_rate.iter().all(|r| r.abs() <= lim.yaw_rate_max)
            && self.accel.iter().all(|a| a.abs() <= lim.accel_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalLimits {
    /// rad/s
    pub yaw_rate_max: f64,
    /// m/s^2
    pub accel_max: f64,
}

impl Default for PhysicalLimits {
    fn default() -> Self {
        Self {
            yaw_rate_max: 71.26_f64.to_radians(),
            accel_max: 9.0,
        }
    }
}

impl PhysicalLimits {
    pub fn new(yaw_rate_max: f64, accel_max: f64) -> Result<Self> {
        if !(yaw_rate_max > 0.0 && accel_max > 0.0) {
            return Err(Error::Config(format!(
                "physical limits must be positive, got yaw_rate_max={yaw_rate_max}, accel_max={accel_max}"
            )));
        }
        Ok(Self {
            yaw_rate_max,
            accel_max,
        })
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

pub fn integrate_step(s: VehicleState, yaw_rate: f64, accel: f64, tau: f64) -> VehicleState {
    let (sin, cos) = s.psi.sin_cos();
    let half_tau2 = tau * tau / 2.0;
    VehicleState {
        x: s.x + s.v * cos * tau + (accel * cos - yaw_rate * s.v * sin) * half_tau2,
        y: s.y + s.v * sin * tau + (accel * sin + yaw_rate * s.v * cos) * half_tau2,
        v: (s.v + accel * tau).max(0.0),
        psi: wrap_angle(s.psi + yaw_rate * tau),
    }
}

/// Integrates `params` from `s0`, returning the `[2, T]` positions after each
/// step (the start position is not included).
pub fn rollout(s0: VehicleState, params: &MotionParamSeq, tau: f64) -> Result<Array2<f64>> {
    if params.accel.len() != params.yaw_rate.len() {
        return Err(Error::Input(format!(
            "yaw_rate has {} steps but accel has {}",
            params.yaw_rate.len(),
            params.accel.len()
        )));
    }
    let t = params.len();
    let mut out = Array2::zeros((2, t));
    let mut s = s0;
    for k in 0..t {
        let (r, a) = (params.yaw_rate[k], params.accel[k]);
        if !r.is_finite() || !a.is_finite() {
            return Err(Error::Input(format!(
                "non-finite motion parameter at index {k}: yaw_rate={r}, accel={a}"
            )));
        }
        s = integrate_step(s, r, a, tau);
        out[[0, k]] = s.x;
        out[[1, k]] = s.y;
    }
    Ok(out)
}

/// Derives motion parameters from a trajectory by finite differences.
///
/// Speeds and headings come from the displacement between consecutive points,
/// the first displacement being measured from the position in `s_obs`.
/// Headings are unwrapped starting from `s_obs.psi`; a standstill segment
/// holds the previous heading. The last acceleration and yaw rate replicate
/// their predecessor so the result has the trajectory's length.
pub fn extract_params(traj: &Array2<f64>, s_obs: VehicleState, tau: f64) -> Result<MotionParamSeq> {
    if traj.nrows() != 2 {
        return Err(Error::shape("trajectory", &[2, traj.ncols()], traj.shape()));
    }
    let t = traj.ncols();
    if t < 3 {
        return Err(Error::Input(format!("trajectory needs at least 3 steps, got {t}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("time step must be positive, got {tau}")));
    }

    let mut speed = Vec::with_capacity(t);
    let mut heading = Vec::with_capacity(t);
    let (mut px, mut py) = (s_obs.x, s_obs.y);
    let mut prev_psi = s_obs.psi;
    for k in 0..t {
        let (x, y) = (traj[[0, k]], traj[[1, k]]);
        let (dx, dy) = (x - px, y - py);
        let dist = dx.hypot(dy);
        let psi = if dist <= STANDSTILL_EPS {
            prev_psi
        } else {
            prev_psi + wrap_angle(dy.atan2(dx) - prev_psi)
        };
        speed.push(dist / tau);
        heading.push(psi);
        prev_psi = psi;
        px = x;
        py = y;
    }

    let diff = |s: &[f64]| -> Vec<f64> {
        let mut d: Vec<f64> = s.windows(2).map(|w| (w[1] - w[0]) / tau).collect();
        d.push(*d.last().unwrap());
        d
    };
    Ok(MotionParamSeq {
        yaw_rate: diff(&heading),
        accel: diff(&speed),
    })
}

/// Recovers the exact inputs that produced `traj` when integrated from `s0`.
///
/// Each step is solved in the heading frame of the tracked state: the
/// longitudinal displacement fixes the acceleration, the lateral displacement
/// the yaw rate. At standstill the yaw rate has no effect on position and is
/// reported as 0.
pub fn invert_rollout(traj: &Array2<f64>, s0: VehicleState, tau: f64) -> Result<MotionParamSeq> {
    if traj.nrows() != 2 {
        return Err(Error::shape("trajectory", &[2, traj.ncols()], traj.shape()));
    }
    if !(tau > 0.0) {
        return Err(Error::Input(format!("time step must be positive, got {tau}")));
    }
    let t = traj.ncols();
    let mut out = MotionParamSeq::zeros(t);
    let half_tau2 = tau * tau / 2.0;
    let mut s = s0;
    for k in 0..t {
        let (dx, dy) = (traj[[0, k]] - s.x, traj[[1, k]] - s.y);
        let (sin, cos) = s.psi.sin_cos();
        let lon = cos * dx + sin * dy;
        let lat = -sin * dx + cos * dy;
        let accel = (lon - s.v * tau) / half_tau2;
        let yaw_rate = if s.v > 0.0 { lat / (s.v * half_tau2) } else { 0.0 };
        out.accel[k] = accel;
        out.yaw_rate[k] = yaw_rate;
        s = VehicleState {
            x: traj[[0, k]],
            y: traj[[1, k]],
            ..integrate_step(s, yaw_rate, accel, tau)
        };
    }
    Ok(out)
}

pub fn clamp_params(params: &MotionParamSeq, lim: &PhysicalLimits) -> MotionParamSeq {
    MotionParamSeq {
        yaw_rate: params
            .yaw_rate
            .iter()
            .map(|r| r.clamp(-lim.yaw_rate_max, lim.yaw_rate_max))
            .collect(),
        accel: params
            .accel
            .iter()
            .map(|a| a.clamp(-lim.accel_max, lim.accel_max))
            .collect(),
    }
}

/// Anchors a rollout at the target's last observed step.
pub fn initial_state_from_observation(sample: &ScenarioSample) -> VehicleState {
    let obs = &sample.observation;
    let i = sample.target_index;
    let last = obs.shape()[2] - 1;
    let (x, y) = (obs[[i, 0, last]], obs[[i, 1, last]]);
    let (vx, vy) = (obs[[i, 2, last]], obs[[i, 3, last]]);
    let v = vx.hypot(vy);
    let psi = if v > MIN_HEADING_SPEED {
        vy.atan2(vx)
    } else if last >= 1 {
        let (dx, dy) = (x - obs[[i, 0, last - 1]], y - obs[[i, 1, last - 1]]);
        if dx.hypot(dy) > STANDSTILL_EPS {
            dy.atan2(dx)
        } else {
            0.0
        }
    } else {
        0.0
    };
    VehicleState::new(x, y, v, psi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrivabilityReport {
    pub drivable: bool,
    /// Largest |yaw rate| minus the limit, floored at 0.
    pub yaw_rate_excess: f64,
    /// Largest |accel| minus the limit, floored at 0.
    pub accel_excess: f64,
    pub max_abs_yaw_rate: f64,
    pub max_abs_accel: f64,
}

/// Checks whether `traj`, started from `s0`, can be driven within `limits`.
pub fn drivability_audit(
    traj: &Array2<f64>,
    s0: VehicleState,
    tau: f64,
    limits: &PhysicalLimits,
) -> Result<DrivabilityReport> {
    let p = invert_rollout(traj, s0, tau)?;
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let max_abs_yaw_rate = max_abs(&p.yaw_rate);
    let max_abs_accel = max_abs(&p.accel);
    let yaw_rate_excess = (max_abs_yaw_rate - limits.yaw_rate_max).max(0.0);
    let accel_excess = (max_abs_accel - limits.accel_max).max(0.0);
    let finite = max_abs_yaw_rate.is_finite() && max_abs_accel.is_finite();
    Ok(DrivabilityReport {
        drivable: finite && yaw_rate_excess <= AUDIT_TOLERANCE && accel_excess <= AUDIT_TOLERANCE,
        yaw_rate_excess,
        accel_excess,
        max_abs_yaw_rate,
        max_abs_accel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ade(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let t = a.ncols();
        (0..t)
            .map(|k| (a[[0, k]] - b[[0, k]]).hypot(a[[1, k]] - b[[1, k]]))
            .sum::<f64>()
            / t as f64
    }

    #[test]
    fn straight_step() {
        let s = integrate_step(VehicleState::new(0.0, 0.0, 10.0, 0.0), 0.0, 0.0, 0.1);
        assert_eq!((s.x, s.y, s.v, s.psi), (1.0, 0.0, 10.0, 0.0));
    }

    #[test]
    fn accelerating_step() {
        let s = integrate_step(VehicleState::new(0.0, 0.0, 10.0, 0.0), 0.0, 2.0, 1.0);
        assert_eq!((s.x, s.y, s.v, s.psi), (11.0, 0.0, 12.0, 0.0));
    }

    #[test]
    fn turning_step() {
        let s = integrate_step(VehicleState::new(0.0, 0.0, 10.0, 0.0), 0.1, 0.0, 0.1);
        assert_abs_diff_eq!(s.x, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.y, 0.005, epsilon = 1e-12);
        assert_abs_diff_eq!(s.v, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.psi, 0.01, epsilon = 1e-12);
    }

    #[test]
    fn speed_floor_and_heading_wrap() {
        let s = integrate_step(VehicleState::new(0.0, 0.0, 1.0, 3.1), 1.0, -20.0, 0.1);
        assert_eq!(s.v, 0.0);
        assert!(s.psi > -PI && s.psi <= PI);
        assert_abs_diff_eq!(s.psi, 3.2 - 2.0 * PI, epsilon = 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    proptest! {
        #[test]
        fn pure_translation_is_exact(
            x in -1e3f64..1e3, y in -1e3f64..1e3, v in 0f64..60.0,
            psi in -3.1f64..3.1, tau in 0.01f64..1.0,
        ) {
            let s = integrate_step(VehicleState { x, y, v, psi }, 0.0, 0.0, tau);
            let (sin, cos) = psi.sin_cos();
            prop_assert_eq!(s.x, x + v * cos * tau);
            prop_assert_eq!(s.y, y + v * sin * tau);
            prop_assert_eq!(s.v, v);
            prop_assert_eq!(s.psi, psi);
        }
    }

    #[test]
    fn rollout_zero_params_is_straight_line() {
        let traj = rollout(
            VehicleState::new(0.0, 0.0, 10.0, 0.0),
            &MotionParamSeq::zeros(25),
            0.2,
        )
        .unwrap();
        for k in 0..25 {
            assert_abs_diff_eq!(traj[[0, k]], 2.0 * (k + 1) as f64, epsilon = 1e-9);
            assert_eq!(traj[[1, k]], 0.0);
        }
    }

    #[test]
    fn rollout_constant_yaw_rate_traces_circle() {
        // Center of a left turn starting at the origin heading +x is (0, R).
        let (v, r) = (10.0, 100.0);
        let tau = 0.04;
        let n = 125;
        let params = MotionParamSeq {
            yaw_rate: vec![v / r; n],
            accel: vec![0.0; n],
        };
        let traj = rollout(VehicleState::new(0.0, 0.0, v, 0.0), &params, tau).unwrap();
        for k in 0..n {
            let d = traj[[0, k]].hypot(traj[[1, k]] - r);
            assert!((d - r).abs() < 0.05, "step {k}: radius {d}");
        }
    }

    #[test]
    fn rollout_rejects_non_finite_with_index() {
        let mut p = MotionParamSeq::zeros(5);
        p.accel[3] = f64::NAN;
        let err = rollout(VehicleState::new(0.0, 0.0, 1.0, 0.0), &p, 0.1).unwrap_err();
        assert!(err.to_string().contains("index 3"), "{err}");
    }

    #[test]
    fn rollout_at_limits_is_finite() {
        let lim = PhysicalLimits::default();
        let p = clamp_params(
            &MotionParamSeq {
                yaw_rate: vec![1e9; 25],
                accel: vec![-1e9; 25],
            },
            &lim,
        );
        let traj = rollout(VehicleState::new(0.0, 0.0, 30.0, 0.0), &p, 0.2).unwrap();
        assert!(traj.iter().all(|v| v.is_finite()));
    }

    fn sampled(f: impl Fn(f64) -> (f64, f64), tau: f64, n: usize) -> Array2<f64> {
        let mut a = Array2::zeros((2, n));
        for k in 0..n {
            let (x, y) = f((k + 1) as f64 * tau);
            a[[0, k]] = x;
            a[[1, k]] = y;
        }
        a
    }

    #[test]
    fn extract_straight_constant_velocity() {
        let traj = sampled(|t| (10.0 * t, 0.0), 0.2, 25);
        let p = extract_params(&traj, VehicleState::new(0.0, 0.0, 10.0, 0.0), 0.2).unwrap();
        assert!(p.yaw_rate.iter().all(|&r| r == 0.0));
        assert!(p.accel.iter().all(|a| a.abs() < 1e-9));
    }

    #[test]
    fn extract_circle() {
        let (v, r, tau) = (10.0, 100.0, 0.04);
        let omega = v / r;
        let traj = sampled(
            |t| (r * (omega * t).sin(), r - r * (omega * t).cos()),
            tau,
            125,
        );
        let p = extract_params(&traj, VehicleState::new(0.0, 0.0, v, 0.0), tau).unwrap();
        for k in 0..125 {
            assert!((p.yaw_rate[k] - 0.1).abs() < 1e-3, "yaw {k}: {}", p.yaw_rate[k]);
            assert!(p.accel[k].abs() < 1e-3, "accel {k}: {}", p.accel[k]);
        }
    }

    #[test]
    fn extract_linear_speed_ramp() {
        // v(t) = 10 + 2t  =>  x(t) = 10t + t^2
        let tau = 0.04;
        let traj = sampled(|t| (10.0 * t + t * t, 0.0), tau, 125);
        let p = extract_params(&traj, VehicleState::new(0.0, 0.0, 10.0, 0.0), tau).unwrap();
        for a in &p.accel {
            assert!((a - 2.0).abs() < 1e-6, "{a}");
        }
    }

    #[test]
    fn extract_handles_standstill_and_short_input() {
        let traj = Array2::zeros((2, 4));
        let p = extract_params(&traj, VehicleState::new(0.0, 0.0, 0.0, 0.3), 0.2).unwrap();
        assert!(p.yaw_rate.iter().all(|&r| r == 0.0));
        assert!(extract_params(&Array2::zeros((2, 2)), VehicleState::new(0.0, 0.0, 0.0, 0.0), 0.2).is_err());
    }

    #[test]
    fn extract_unwraps_heading_across_pi() {
        // Driving in -x direction with a small left curve crosses the +-pi seam.
        let (v, r, tau) = (10.0, 50.0, 0.04);
        let omega = v / r;
        let traj = sampled(
            |t| (-r * (omega * t).sin(), -r + r * (omega * t).cos()),
            tau,
            50,
        );
        let p = extract_params(&traj, VehicleState::new(0.0, 0.0, v, PI), tau).unwrap();
        for y in &p.yaw_rate {
            assert!((y - omega).abs() < 1e-3, "{y}");
        }
    }

    #[test]
    fn round_trip_on_smooth_lane_change() {
        let tau = 0.04;
        let n = 125;
        let lane_change = |t: f64| {
            let s = (t / 5.0).clamp(0.0, 1.0);
            (25.0 * t + 0.3 * t * t, 3.5 * (10.0 * s.powi(3) - 15.0 * s.powi(4) + 6.0 * s.powi(5)))
        };
        let traj = sampled(lane_change, tau, n);
        let s0 = VehicleState::new(0.0, 0.0, 25.0, 0.0);
        let p = extract_params(&traj, s0, tau).unwrap();
        let back = rollout(s0, &p, tau).unwrap();
        assert!(ade(&traj, &back) < 0.1);
    }

    #[test]
    fn clamp_examples() {
        let lim = PhysicalLimits::default();
        assert_abs_diff_eq!(lim.yaw_rate_max, 1.24373, epsilon = 1e-5);
        let p = MotionParamSeq {
            yaw_rate: vec![2.0, -0.5],
            accel: vec![12.0, -3.0],
        };
        let c = clamp_params(&p, &lim);
        assert_eq!(c.yaw_rate, vec![lim.yaw_rate_max, -0.5]);
        assert_eq!(c.accel, vec![9.0, -3.0]);
        assert_eq!(clamp_params(&c, &lim), c);
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent_and_channelwise(
            yaw in prop::collection::vec(-5f64..5.0, 1..30),
            acc_seed in any::<u64>(),
        ) {
            let lim = PhysicalLimits::default();
            let accel: Vec<f64> = (0..yaw.len())
                .map(|i| ((acc_seed.wrapping_mul(i as u64 + 7) % 4000) as f64 / 100.0) - 20.0)
                .collect();
            let p = MotionParamSeq { yaw_rate: yaw.clone(), accel: accel.clone() };
            let c = clamp_params(&p, &lim);
            prop_assert!(c.within(&lim));
            prop_assert_eq!(&clamp_params(&c, &lim), &c);
            // clamping one channel never touches the other
            let only_yaw = clamp_params(&MotionParamSeq { yaw_rate: yaw, accel: vec![0.0; accel.len()] }, &lim);
            prop_assert_eq!(&only_yaw.yaw_rate, &c.yaw_rate);
        }

        #[test]
        fn clamped_rollouts_pass_audit(
            v0 in 5f64..40.0,
            psi0 in -3.1f64..3.1,
            yaw in prop::collection::vec(-3f64..3.0, 25),
            accel in prop::collection::vec(-15f64..15.0, 25),
        ) {
            let lim = PhysicalLimits::default();
            let tau = 0.2;
            let p = clamp_params(&MotionParamSeq { yaw_rate: yaw, accel }, &lim);
            let s0 = VehicleState::new(1.0, -2.0, v0, psi0);
            // Yaw rate is unobservable at standstill; keep the speed positive.
            let mut s = s0;
            for k in 0..p.len() {
                prop_assume!(s.v > 0.0);
                s = integrate_step(s, p.yaw_rate[k], p.accel[k], tau);
            }
            let traj = rollout(s0, &p, tau).unwrap();
            let rep = drivability_audit(&traj, s0, tau, &lim).unwrap();
            prop_assert!(rep.drivable, "{rep:?}");
            let back = invert_rollout(&traj, s0, tau).unwrap();
            for k in 0..p.len() {
                prop_assert!((back.accel[k] - p.accel[k]).abs() < 1e-6);
                prop_assert!((back.yaw_rate[k] - p.yaw_rate[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn finite_difference_reextraction_overshoots_at_limits() {
        // Displacement-based speed picks up the lateral term of the
        // integrator, so re-extracting a saturated rollout by finite
        // differences exceeds the limit. The audit therefore inverts the
        // integrator instead.
        let lim = PhysicalLimits::default();
        let p = MotionParamSeq {
            yaw_rate: vec![lim.yaw_rate_max; 25],
            accel: vec![lim.accel_max; 25],
        };
        let s0 = VehicleState::new(0.0, 0.0, 20.0, 0.0);
        let traj = rollout(s0, &p, 0.2).unwrap();
        let fd = extract_params(&traj, s0, 0.2).unwrap();
        assert!(fd.accel.iter().any(|a| *a > lim.accel_max + AUDIT_TOLERANCE));
        assert!(drivability_audit(&traj, s0, 0.2, &lim).unwrap().drivable);
    }

    #[test]
    fn audit_flags_sharp_turn() {
        let lim = PhysicalLimits::default();
        let s0 = VehicleState::new(0.0, 0.0, 10.0, 0.0);
        let mut traj = Array2::zeros((2, 4));
        for (k, (x, y)) in [(2.0, 0.0), (4.0, 0.0), (6.0, 0.0), (6.0, 2.0)].into_iter().enumerate() {
            traj[[0, k]] = x;
            traj[[1, k]] = y;
        }
        let rep = drivability_audit(&traj, s0, 0.2, &lim).unwrap();
        assert!(!rep.drivable);

        let straight = sampled(|t| (10.0 * t, 0.0), 0.2, 25);
        assert!(drivability_audit(&straight, s0, 0.2, &lim).unwrap().drivable);
    }
}
