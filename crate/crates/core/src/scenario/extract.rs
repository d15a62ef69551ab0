use std::f64::consts::PI;

use ndarray::{Array2, Array3};

use super::{
    label_maneuver, obs_steps, pred_steps, FrameOrigin, SampleSource, SceneRecording, ScenarioSample, N_FEATURES,
    N_VEHICLES,
};
use crate::error::{Error, Result};

/// Neighbours with |longitudinal gap| up to this are "alongside".
pub const ALONGSIDE_GAP_M: f64 = 5.0;
/// Neighbours farther than this are ignored.
pub const NEIGHBOR_RANGE_M: f64 = 100.0;

/// Observation rows 1..=8, in order. Row 0 is the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborSlot {
    LeftAhead,
    LeftAlongside,
    LeftBehind,
    EgoAhead,
    EgoBehind,
    RightAhead,
    RightAlongside,
    RightBehind,
}

impl NeighborSlot {
    pub const ALL: [NeighborSlot; 8] = [
        NeighborSlot::LeftAhead,
        NeighborSlot::LeftAlongside,
        NeighborSlot::LeftBehind,
        NeighborSlot::EgoAhead,
        NeighborSlot::EgoBehind,
        NeighborSlot::RightAhead,
        NeighborSlot::RightAlongside,
        NeighborSlot::RightBehind,
    ];

    /// Observation row of this slot.
    pub fn row(self) -> usize {
        1 + Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    /// Slot for a neighbour `lane_offset` lanes to the left (+) with
    /// longitudinal gap `dx`, if any.
    pub fn classify(lane_offset: i64, dx: f64) -> Option<Self> {
        if dx.abs() > NEIGHBOR_RANGE_M {
            return None;
        }
        let ahead = dx > ALONGSIDE_GAP_M;
        let behind = dx < -ALONGSIDE_GAP_M;
        use NeighborSlot::*;
        Some(match (lane_offset, ahead, behind) {
            (1, true, _) => LeftAhead,
            (1, false, false) => LeftAlongside,
            (1, _, true) => LeftBehind,
            (0, true, _) => EgoAhead,
            (0, _, true) => EgoBehind,
            (-1, true, _) => RightAhead,
            (-1, false, false) => RightAlongside,
            (-1, _, true) => RightBehind,
            _ => return None,
        })
    }
}

/// Cuts every full observation+prediction window out of a recording.
///
/// Every track serves as target; window end points (t0) advance by `stride`
/// recording frames. Windows the target track does not fully cover are
/// skipped. Sample ids are assigned sequentially in output order.
pub fn extract_samples(rec: &SceneRecording, stride: usize, rate_out_hz: f64) -> Result<Vec<ScenarioSample>> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let decim = decimation(rec.rate_hz, rate_out_hz)?;
    let (t_obs, t_pred) = (obs_steps(rate_out_hz), pred_steps(rate_out_hz));
    if t_obs == 0 || t_pred == 0 {
        return Err(Error::Config(format!("rate {rate_out_hz} Hz yields empty windows")));
    }
    let back = (t_obs as i64 - 1) * decim;
    let ahead = t_pred as i64 * decim;

    let mut out = Vec::new();
    for (ti, track) in rec.tracks.iter().enumerate() {
        let (Some(&first), Some(&last)) = (track.frames.first(), track.frames.last()) else {
            continue;
        };
        let mut t0 = first + back;
        while t0 + ahead <= last {
            if let Some(s) = build_sample(rec, ti, t0, decim, t_obs, t_pred, out.len() as u64)? {
                out.push(s);
            }
            t0 += stride as i64;
        }
    }
    Ok(out)
}

pub(crate) fn decimation(rate_in: f64, rate_out: f64) -> Result<i64> {
    if !(rate_out > 0.0 && rate_in > 0.0) {
        return Err(Error::Config(format!("rates must be positive: {rate_in} Hz -> {rate_out} Hz")));
    }
    let ratio = rate_in / rate_out;
    let d = ratio.round();
    if d < 1.0 || (ratio - d).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "output rate {rate_out} Hz must evenly divide recording rate {rate_in} Hz"
        )));
    }
    Ok(d as i64)
}

/// Builds the sample whose last observed recording frame is `t0`, or `None`
/// if the target does not cover the window or its lanes are unknown.
pub(crate) fn build_sample(
    rec: &SceneRecording,
    target: usize,
    t0: i64,
    decim: i64,
    t_obs: usize,
    t_pred: usize,
    id: u64,
) -> Result<Option<ScenarioSample>> {
    let tr = &rec.tracks[target];
    let obs_frames: Vec<i64> = (0..t_obs as i64).map(|k| t0 - (t_obs as i64 - 1 - k) * decim).collect();
    let fut_frames: Vec<i64> = (1..=t_pred as i64).map(|k| t0 + k * decim).collect();
    let Some(obs_idx) = obs_frames.iter().map(|&f| tr.index_of(f)).collect::<Option<Vec<_>>>() else {
        return Ok(None);
    };
    let Some(fut_idx) = fut_frames.iter().map(|&f| tr.index_of(f)).collect::<Option<Vec<_>>>() else {
        return Ok(None);
    };

    let i0 = *obs_idx.last().unwrap();
    let dir = if tr.vx[i0] < 0.0 { -1.0 } else { 1.0 };
    let frame = FrameOrigin {
        x: tr.x[i0],
        y: tr.y[i0],
        heading: if dir < 0.0 { PI } else { 0.0 },
    };
    let lanes = rec.lanes.to_local(&frame);
    let Some(target_lane) = lanes.lane_index(0.0) else {
        return Ok(None);
    };

    // Nearest vehicle per grid slot; ties go to the lower vehicle id.
    let mut slots: [Option<(f64, u64, usize)>; 8] = [None; 8];
    for (ni, n) in rec.tracks.iter().enumerate() {
        if ni == target {
            continue;
        }
        let Some(k) = n.index_of(t0) else { continue };
        if n.vx[k] * dir <= 0.0 {
            continue;
        }
        let (dx, dy) = frame.to_local(n.x[k], n.y[k]);
        let Some(lane) = lanes.lane_index(dy) else { continue };
        let offset = lane as i64 - target_lane as i64;
        let Some(slot) = NeighborSlot::classify(offset, dx) else { continue };
        let cand = (dx.abs(), n.vehicle_id, ni);
        let entry = &mut slots[slot.row() - 1];
        let better = match entry {
            None => true,
            Some((d, id, _)) => cand.0 < *d || (cand.0 == *d && cand.1 < *id),
        };
        if better {
            *entry = Some(cand);
        }
    }

    let mut observation = Array3::zeros((N_VEHICLES, N_FEATURES, t_obs));
    let mut fill = |row: usize, track: usize| {
        let t = &rec.tracks[track];
        for (k, &f) in obs_frames.iter().enumerate() {
            if let Some(j) = t.index_of(f) {
                let (x, y) = frame.to_local(t.x[j], t.y[j]);
                let (vx, vy) = frame.rotate_to_local(t.vx[j], t.vy[j]);
                observation[[row, 0, k]] = x;
                observation[[row, 1, k]] = y;
                observation[[row, 2, k]] = vx;
                observation[[row, 3, k]] = vy;
            }
        }
    };
    fill(0, target);
    for (s, entry) in slots.iter().enumerate() {
        if let Some((_, _, ni)) = entry {
            fill(s + 1, *ni);
        }
    }
    // The target's own origin is exactly zero, not a rounding residue.
    observation[[0, 0, t_obs - 1]] = 0.0;
    observation[[0, 1, t_obs - 1]] = 0.0;

    let mut future = Array2::zeros((2, t_pred));
    for (k, &j) in fut_idx.iter().enumerate() {
        let (x, y) = frame.to_local(tr.x[j], tr.y[j]);
        future[[0, k]] = x;
        future[[1, k]] = y;
    }

    let maneuver = match label_maneuver(&future, &lanes) {
        Ok(m) => m,
        Err(Error::Labeling(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(ScenarioSample {
        id,
        observation,
        future,
        maneuver,
        target_index: 0,
        frame_origin: frame,
        sample_rate_hz: rec.rate_hz / decim as f64,
        lanes,
        source: SampleSource {
            recording_id: rec.id,
            vehicle_id: tr.vehicle_id,
            t0_frame: t0,
        },
    }))
}
