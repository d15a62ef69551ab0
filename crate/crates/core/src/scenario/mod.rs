//! Highway scenario samples: ingestion, windowing, labelling, balancing,
//! synthesis and persistence.
//!
//! A [`ScenarioSample`] holds the observed motion of the target and its eight
//! grid neighbours, the target's future positions and the maneuver it
//! performs. All coordinates live in a target-centric frame whose origin is
//! the target's last observed position and whose x axis points along the
//! direction of travel, so "left" is always +y.

mod balance;
mod extract;
mod ingest;
mod store;
mod synth;

pub use balance::balance_dataset;
pub use extract::{extract_samples, NeighborSlot, ALONGSIDE_GAP_M, NEIGHBOR_RANGE_M};
pub use ingest::{ingest_tracks, parse_tracks, ColumnMap};
pub use store::{load_dataset, save_dataset, DatasetManifest, SampleRecord, SplitName};
pub use synth::{synth_generate, SynthConfig};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vehicles per scenario: the target plus eight neighbours.
pub const N_VEHICLES: usize = 9;
/// Features per vehicle and step: x, y, v_x, v_y.
pub const N_FEATURES: usize = 4;
pub const OBS_SECONDS: f64 = 3.0;
pub const PRED_SECONDS: f64 = 5.0;
pub const DEFAULT_LANE_WIDTH: f64 = 4.0;
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 5.0;

pub fn obs_steps(rate_hz: f64) -> usize {
    (OBS_SECONDS * rate_hz).round() as usize
}

pub fn pred_steps(rate_hz: f64) -> usize {
    (PRED_SECONDS * rate_hz).round() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Maneuver {
    /// Lane change left.
    Lcl,
    /// Keep lane.
    Kl,
    /// Lane change right.
    Lcr,
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::Lcl, Maneuver::Kl, Maneuver::Lcr];

    pub fn index(self) -> usize {
        match self {
            Maneuver::Lcl => 0,
            Maneuver::Kl => 1,
            Maneuver::Lcr => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.index()] = 1.0;
        v
    }

    pub fn from_one_hot(v: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = (0..v.len()).filter(|&i| v[i] == 1.0).collect();
        if v.len() != 3 || ones.len() != 1 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(Error::Input(format!("not a one-hot maneuver vector: {v:?}")));
        }
        Ok(Self::ALL[ones[0]])
    }

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::Lcl => "lcl",
            Maneuver::Kl => "kl",
            Maneuver::Lcr => "lcr",
        }
    }
}

impl std::fmt::Display for Maneuver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Straight lanes parallel to the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneGeometry {
    /// Lane center y-coordinates, strictly increasing.
    pub centers: Vec<f64>,
    /// Lane width in meters.
    pub width: f64,
}

impl LaneGeometry {
    pub fn new(centers: Vec<f64>, width: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Data("lane geometry needs at least one lane".into()));
        }
        if !(width > 0.0) || !width.is_finite() {
            return Err(Error::Data(format!("lane width must be positive, got {width}")));
        }
        if centers.iter().any(|c| !c.is_finite()) || centers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!("lane centers not strictly increasing: {centers:?}")));
        }
        Ok(Self { centers, width })
    }

    /// Evenly spaced lanes with the first center at `first_center`.
    pub fn uniform(count: usize, width: f64, first_center: f64) -> Result<Self> {
        Self::new(
            (0..count).map(|i| first_center + i as f64 * width).collect(),
            width,
        )
    }

    /// Index of the nearest lane whose strip contains `y`.
    pub fn lane_index(&self, y: f64) -> Option<usize> {
        if !y.is_finite() {
            return None;
        }
        let (i, d) = self
            .centers
            .iter()
            .enumerate()
            .map(|(i, c)| (i, (y - c).abs()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        (d <= self.width / 2.0 + 1e-9).then_some(i)
    }

    /// The same lanes expressed in `frame`'s local coordinates. Only the
    /// travel-aligned headings 0 and pi keep lanes parallel to the x axis.
    pub fn to_local(&self, frame: &FrameOrigin) -> Self {
        let mut centers: Vec<f64> = self
            .centers
            .iter()
            .map(|&c| frame.to_local(frame.x, c).1)
            .collect();
        centers.sort_by(f64::total_cmp);
        Self {
            centers,
            width: self.width,
        }
    }
}

/// Pose of the target-centric frame in recording coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameOrigin {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl FrameOrigin {
    /// Exact for the travel-aligned headings 0 and pi.
    fn sin_cos(&self) -> (f64, f64) {
        if self.heading == 0.0 {
            (0.0, 1.0)
        } else if self.heading == std::f64::consts::PI {
            (0.0, -1.0)
        } else {
            self.heading.sin_cos()
        }
    }

    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn to_global(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.sin_cos();
        (self.x + c * x - s * y, self.y + s * x + c * y)
    }

    pub fn rotate_to_local(&self, vx: f64, vy: f64) -> (f64, f64) {
        let (s, c) = self.sin_cos();
        (c * vx + s * vy, -s * vx + c * vy)
    }

    /// Maps a local `[2, T]` trajectory back to recording coordinates.
    pub fn trajectory_to_global(&self, traj: &Array2<f64>) -> Array2<f64> {
        let mut out = traj.clone();
        for k in 0..traj.ncols() {
            let (x, y) = self.to_global(traj[[0, k]], traj[[1, k]]);
            out[[0, k]] = x;
            out[[1, k]] = y;
        }
        out
    }
}

/// Where a sample was cut from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleSource {
    pub recording_id: u32,
    pub vehicle_id: u64,
    pub t0_frame: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSample {
    pub id: u64,
    /// `[N, F, T_o]`, feature order x, y, v_x, v_y.
    pub observation: Array3<f64>,
    /// `[2, T_p]` target positions after t0.
    pub future: Array2<f64>,
    pub maneuver: Maneuver,
    pub target_index: usize,
    pub frame_origin: FrameOrigin,
    pub sample_rate_hz: f64,
    /// Lanes in the target-centric frame.
    pub lanes: LaneGeometry,
    pub source: SampleSource,
}

impl ScenarioSample {
    pub fn tau(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn t_obs(&self) -> usize {
        self.observation.shape()[2]
    }

    pub fn t_pred(&self) -> usize {
        self.future.ncols()
    }
}

/// Per-vehicle time series of one recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub vehicle_id: u64,
    /// Strictly increasing.
    pub frames: Vec<i64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
    pub lane_id: Vec<Option<i64>>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn index_of(&self, frame: i64) -> Option<usize> {
        self.frames.binary_search(&frame).ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecording {
    pub id: u32,
    pub rate_hz: f64,
    pub tracks: Vec<Track>,
    pub lanes: LaneGeometry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ScenarioSample>,
    pub test: Vec<ScenarioSample>,
    pub split_seed: u64,
}

impl DatasetSplit {
    /// Shuffles `samples` with `seed` and puts the first `train_fraction` of
    /// them into the training set.
    pub fn from_samples(samples: Vec<ScenarioSample>, train_fraction: f64, seed: u64) -> Result<Self> {
        use rand::seq::SliceRandom;
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train_fraction must be in [0, 1], got {train_fraction}")));
        }
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        idx.shuffle(&mut crate::rng::seeded(seed, "split"));
        let n_train = (samples.len() as f64 * train_fraction).round() as usize;
        let mut slots: Vec<Option<ScenarioSample>> = samples.into_iter().map(Some).collect();
        let mut train = Vec::with_capacity(n_train);
        let mut test = Vec::with_capacity(slots.len() - n_train);
        for (rank, i) in idx.into_iter().enumerate() {
            let s = slots[i].take().unwrap();
            if rank < n_train {
                train.push(s);
            } else {
                test.push(s);
            }
        }
        train.sort_by_key(|s| s.id);
        test.sort_by_key(|s| s.id);
        Ok(Self {
            train,
            test,
            split_seed: seed,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &ScenarioSample> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Labels a future trajectory by comparing the lanes of its first and last
/// points. Lane indices grow with y, so moving up is a left change.
pub fn label_maneuver(future: &Array2<f64>, lanes: &LaneGeometry) -> Result<Maneuver> {
    if future.nrows() != 2 || future.ncols() == 0 {
        return Err(Error::shape("future trajectory", &[2, future.ncols().max(1)], future.shape()));
    }
    let mut first = None;
    let mut last = None;
    for k in 0..future.ncols() {
        let y = future[[1, k]];
        let lane = lanes.lane_index(y).ok_or_else(|| {
            Error::Labeling(format!("trajectory point {k} at y={y:.3} m lies outside all lanes"))
        })?;
        first.get_or_insert(lane);
        last = Some(lane);
    }
    let (first, last) = (first.unwrap(), last.unwrap());
    Ok(match last.cmp(&first) {
        std::cmp::Ordering::Greater => Maneuver::Lcl,
        std::cmp::Ordering::Less => Maneuver::Lcr,
        std::cmp::Ordering::Equal => Maneuver::Kl,
    })
}
