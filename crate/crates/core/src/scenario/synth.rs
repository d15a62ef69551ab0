//! Straight multi-lane highway scenes with labelled target maneuvers.
//!
//! Each scene is generated in road coordinates (x along travel, lanes at
//! increasing y to the driver's left) and then placed in a recording frame,
//! optionally travelling in -x, so the regular extraction path sees both
//! driving directions.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::extract::build_sample;
use super::{obs_steps, pred_steps, DatasetSplit, LaneGeometry, Maneuver, NeighborSlot, SceneRecording, Track};
use crate::error::{Error, Result};
use crate::rng::{seeded_item, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub lane_count: usize,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub samples_per_class: usize,
    pub recording_rate_hz: f64,
    pub sample_rate_hz: f64,
    pub train_fraction: f64,
    /// Chance that any one neighbour slot is occupied.
    pub neighbor_probability: f64,
    pub lane_change_min_s: f64,
    pub lane_change_max_s: f64,
    /// Range of the fraction of a lane change already done at t0.
    pub change_progress_min: f64,
    pub change_progress_max: f64,
    /// Amplitude of the slow lateral weave, meters.
    pub lateral_jitter_m: f64,
    /// Amplitude of the slow speed oscillation, m/s.
    pub speed_jitter_mps: f64,
    pub opposite_direction_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            lane_count: 3,
            lane_width: super::DEFAULT_LANE_WIDTH,
            speed_min: 20.0,
            speed_max: 35.0,
            samples_per_class: 60,
            recording_rate_hz: 25.0,
            sample_rate_hz: super::DEFAULT_SAMPLE_RATE_HZ,
            train_fraction: 0.7,
            neighbor_probability: 0.5,
            lane_change_min_s: 3.0,
            lane_change_max_s: 6.0,
            change_progress_min: 0.0,
            change_progress_max: 0.15,
            lateral_jitter_m: 0.1,
            speed_jitter_mps: 0.5,
            opposite_direction_probability: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.lane_count < 2 {
            return bad(format!(
                "lane changes need at least 2 lanes, got {}",
                self.lane_count
            ));
        }
        if !(self.lane_width > 0.0) {
            return bad(format!("lane_width must be positive, got {}", self.lane_width));
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad(format!("invalid speed range [{}, {}]", self.speed_min, self.speed_max));
        }
        if self.samples_per_class == 0 {
            return bad("samples_per_class must be at least 1".into());
        }
        // The lane boundary is crossed halfway through a change. That has to
        // happen after the first predicted step and inside the horizon.
        let (p_lo, p_hi) = (self.change_progress_min, self.change_progress_max);
        if !(0.0..0.5).contains(&p_lo) || !(p_lo..0.5).contains(&p_hi) {
            return bad(format!("change progress range [{p_lo}, {p_hi}] must lie in [0, 0.5)"));
        }
        if !(self.lane_change_min_s > 0.0 && self.lane_change_max_s >= self.lane_change_min_s)
            || (0.5 - p_lo) * self.lane_change_max_s > super::PRED_SECONDS
            || (0.5 - p_hi) * self.lane_change_min_s <= 1.0 / self.sample_rate_hz
        {
            return bad(format!(
                "lane change duration range [{}, {}] s must be positive and cross the lane boundary within the horizon",
                self.lane_change_min_s, self.lane_change_max_s
            ));
        }
        if !(0.0..=1.0).contains(&self.neighbor_probability)
            || !(0.0..=1.0).contains(&self.opposite_direction_probability)
        {
            return bad("probabilities must lie in [0, 1]".into());
        }
        if !(0.0..self.lane_width / 4.0).contains(&self.lateral_jitter_m) || self.speed_jitter_mps < 0.0 {
            return bad("jitter amplitudes out of range".into());
        }
        super::extract::decimation(self.recording_rate_hz, self.sample_rate_hz)?;
        Ok(())
    }
}

/// Quintic smoothstep with zero velocity and acceleration at both ends.
fn quintic(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let p = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
    let dp = 30.0 * s * s * (1.0 - s) * (1.0 - s);
    (p, dp)
}

struct Motion {
    /// (x, y, vx, vy) at road time t (t = 0 is the last observed step).
    f: Box<dyn Fn(f64) -> (f64, f64, f64, f64)>,
}

fn target_motion(rng: &mut Rng, cfg: &SynthConfig, center: f64, v: f64, shift: f64) -> Motion {
    let a = rng.random_range(0.0..=cfg.speed_jitter_mps);
    let p = rng.random_range(4.0..8.0);
    let phi = rng.random_range(0.0..2.0 * PI);
    let b = rng.random_range(0.0..=cfg.lateral_jitter_m);
    let p2 = rng.random_range(4.0..8.0);
    let phi2 = rng.random_range(0.0..2.0 * PI);
    let dur = rng.random_range(cfg.lane_change_min_s..=cfg.lane_change_max_s);
    let s0 = rng.random_range(cfg.change_progress_min..=cfg.change_progress_max);
    let t_start = -s0 * dur;
    let (w, w2) = (2.0 * PI / p, 2.0 * PI / p2);
    Motion {
        f: Box::new(move |t| {
            let x = v * t - a / w * ((w * t + phi).cos() - phi.cos());
            let vx = v + a * (w * t + phi).sin();
            let (q, dq) = quintic((t - t_start) / dur);
            let y = center + b * (w2 * t + phi2).sin() + shift * q;
            let vy = b * w2 * (w2 * t + phi2).cos() + shift * dq / dur;
            (x, y, vx, vy)
        }),
    }
}

fn track_from(id: u64, frames: &[i64], t0: i64, rate: f64, dir: f64, y_offset: f64, m: &Motion) -> Track {
    let n = frames.len();
    let mut t = Track {
        vehicle_id: id,
        frames: frames.to_vec(),
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        vx: Vec::with_capacity(n),
        vy: Vec::with_capacity(n),
        lane_id: Vec::with_capacity(n),
    };
    for &f in frames {
        let (x, y, vx, vy) = (m.f)((f - t0) as f64 / rate);
        t.x.push(dir * x);
        t.y.push(dir * y + y_offset);
        t.vx.push(dir * vx);
        t.vy.push(dir * vy);
        t.lane_id.push(None);
    }
    t
}

fn slot_lane_offset(slot: NeighborSlot) -> i64 {
    use NeighborSlot::*;
    match slot {
        LeftAhead | LeftAlongside | LeftBehind => 1,
        EgoAhead | EgoBehind => 0,
        RightAhead | RightAlongside | RightBehind => -1,
    }
}

/// Gap and speed difference of the neighbour in `slot`, if any.
///
/// The constellation carries the maneuver: a slow leader with a free left
/// lane precedes lcl, a fast follower with a free right lane precedes lcr,
/// and keep-lane scenes have neither. The lane the target does not move to
/// is blocked alongside.
fn neighbor(rng: &mut Rng, cfg: &SynthConfig, class: Maneuver, slot: NeighborSlot) -> Option<(f64, f64)> {
    use NeighborSlot::*;
    let maybe = |r: &mut Rng| r.random_bool(cfg.neighbor_probability);
    let far_ahead = |r: &mut Rng| (r.random_range(40.0..80.0), r.random_range(0.0..3.0));
    let far_behind = |r: &mut Rng| (r.random_range(-80.0..-40.0), r.random_range(-3.0..0.0));
    let alongside = |r: &mut Rng| (r.random_range(-3.0..3.0), r.random_range(-1.0..1.0));
    let free = matches!(
        (class, slot),
        (Maneuver::Lcl, LeftAhead | LeftAlongside | LeftBehind) | (Maneuver::Lcr, RightAhead | RightAlongside | RightBehind)
    );
    match (class, slot) {
        (Maneuver::Lcl, EgoAhead) => Some((rng.random_range(12.0..30.0), -rng.random_range(4.0..8.0))),
        (Maneuver::Lcr, EgoBehind) => Some((-rng.random_range(8.0..20.0), rng.random_range(4.0..8.0))),
        (Maneuver::Lcl, RightAlongside) | (Maneuver::Lcr, LeftAlongside) => Some(alongside(rng)),
        (_, LeftAlongside | RightAlongside) if !free && maybe(rng) => Some(alongside(rng)),
        (_, LeftAhead | RightAhead | EgoAhead) if maybe(rng) => Some(far_ahead(rng)),
        (_, LeftBehind | RightBehind | EgoBehind) if maybe(rng) => Some(far_behind(rng)),
        _ => None,
    }
}

fn scene(rng: &mut Rng, cfg: &SynthConfig, class: Maneuver, id: u32) -> Result<(SceneRecording, i64)> {
    let n = cfg.lane_count;
    let w = cfg.lane_width;
    let lane_center = |i: usize| w / 2.0 + i as f64 * w;
    let lane = match class {
        Maneuver::Kl => rng.random_range(0..n),
        Maneuver::Lcl => rng.random_range(0..n - 1),
        Maneuver::Lcr => rng.random_range(1..n),
    };
    let shift = match class {
        Maneuver::Kl => 0.0,
        Maneuver::Lcl => w,
        Maneuver::Lcr => -w,
    };
    let v = rng.random_range(cfg.speed_min..=cfg.speed_max);
    let dir = if rng.random_bool(cfg.opposite_direction_probability) { -1.0 } else { 1.0 };
    let y_offset = if dir < 0.0 { n as f64 * w } else { 0.0 };

    let decim = super::extract::decimation(cfg.recording_rate_hz, cfg.sample_rate_hz)?;
    let t_obs = obs_steps(cfg.sample_rate_hz) as i64;
    let t_pred = pred_steps(cfg.sample_rate_hz) as i64;
    let t0 = (t_obs - 1) * decim;
    let frames: Vec<i64> = (0..=t0 + t_pred * decim).collect();
    let rate = cfg.recording_rate_hz;

    let mut tracks = vec![track_from(
        1,
        &frames,
        t0,
        rate,
        dir,
        y_offset,
        &target_motion(rng, cfg, lane_center(lane), v, shift),
    )];
    for slot in NeighborSlot::ALL {
        let Some((gap, dv)) = neighbor(rng, cfg, class, slot) else {
            continue;
        };
        let nl = lane as i64 + slot_lane_offset(slot);
        if nl < 0 || nl >= n as i64 {
            continue;
        }
        let vn = v + dv;
        let yn = lane_center(nl as usize) + rng.random_range(-0.2..0.2);
        let m = Motion {
            f: Box::new(move |t| (gap + vn * t, yn, vn, 0.0)),
        };
        tracks.push(track_from(tracks.len() as u64 + 1, &frames, t0, rate, dir, y_offset, &m));
    }

    let road = LaneGeometry::uniform(n, w, w / 2.0)?;
    Ok((
        SceneRecording {
            id,
            rate_hz: rate,
            tracks,
            lanes: road,
        },
        t0,
    ))
}

/// Generates `samples_per_class` scenes per maneuver and splits them.
/// Identical `(config, seed)` pairs give identical datasets.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    config.validate()?;
    let decim = super::extract::decimation(config.recording_rate_hz, config.sample_rate_hz)?;
    let t_obs = obs_steps(config.sample_rate_hz);
    let t_pred = pred_steps(config.sample_rate_hz);
    let mut samples = Vec::with_capacity(3 * config.samples_per_class);
    for i in 0..config.samples_per_class {
        for class in Maneuver::ALL {
            let id = samples.len() as u64;
            let mut rng = seeded_item(seed, "synth", id);
            let (rec, t0) = scene(&mut rng, config, class, id as u32)?;
            let s = build_sample(&rec, 0, t0, decim, t_obs, t_pred, id)?
                .ok_or_else(|| Error::Internal(format!("synthetic scene {id} produced no sample")))?;
            if s.maneuver != class {
                return Err(Error::Internal(format!(
                    "synthetic scene {id} (round {i}) intended {class} but labels as {}",
                    s.maneuver
                )));
            }
            samples.push(s);
        }
    }
    DatasetSplit::from_samples(samples, config.train_fraction, seed)
}
