use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LaneGeometry, SceneRecording, Track, DEFAULT_LANE_WIDTH};
use crate::error::{Error, Result};

/// Maps logical column names to header names in a track file.
///
/// Required keys: `frame`, `id`, `x`, `y`. Optional: `vx`, `vy`, `lane_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap(pub BTreeMap<String, String>);

const REQUIRED: [&str; 4] = ["frame", "id", "x", "y"];

impl ColumnMap {
    /// Column names of the highD `tracks.csv` layout.
    pub fn highd() -> Self {
        Self::from_pairs(&[
            ("frame", "frame"),
            ("id", "id"),
            ("x", "x"),
            ("y", "y"),
            ("vx", "xVelocity"),
            ("vy", "yVelocity"),
            ("lane_id", "laneId"),
        ])
    }

    pub fn from_pairs(pairs: &[(&str, &str)]) -> Self {
        Self(
            pairs
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self::highd()
    }
}

pub fn ingest_tracks(path: &Path, column_map: &ColumnMap, rate_hz: f64) -> Result<SceneRecording> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tracks(file, column_map, rate_hz, 0)
}

#[derive(Default)]
struct RawTrack {
    frames: Vec<i64>,
    x: Vec<f64>,
    y: Vec<f64>,
    vx: Vec<f64>,
    vy: Vec<f64>,
    lane: Vec<Option<i64>>,
}

/// Parses comma-separated track rows (header required) into a recording.
///
/// Velocities come from the mapped columns when both are present and are
/// otherwise finite-differenced from positions. Lanes are the mean y of each
/// lane id when a lane column is mapped; without one, 4 m lanes are tiled over
/// the observed lateral range.
pub fn parse_tracks<R: Read>(reader: R, column_map: &ColumnMap, rate_hz: f64, recording_id: u32) -> Result<SceneRecording> {
    if !(rate_hz > 0.0) || !rate_hz.is_finite() {
        return Err(Error::Config(format!("recording rate must be positive, got {rate_hz}")));
    }
    for key in REQUIRED {
        if column_map.get(key).is_none() {
            return Err(Error::Schema { column: key.to_string() });
        }
    }

    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |key: &str| -> Result<Option<usize>> {
        match column_map.get(key) {
            None => Ok(None),
            Some(name) => headers
                .iter()
                .position(|h| h == name)
                .map(Some)
                .ok_or_else(|| Error::Schema { column: name.to_string() }),
        }
    };
    let c_frame = find("frame")?.unwrap();
    let c_id = find("id")?.unwrap();
    let c_x = find("x")?.unwrap();
    let c_y = find("y")?.unwrap();
    let c_vx = find("vx")?;
    let c_vy = find("vy")?;
    let c_lane = find("lane_id")?;
    let have_velocity = c_vx.is_some() && c_vy.is_some();

    let mut order: Vec<u64> = Vec::new();
    let mut raw: HashMap<u64, RawTrack> = HashMap::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c)
                .ok_or_else(|| Error::Data(format!("row {}: missing field {c}", row + 2)))
        };
        let num = |c: usize| -> Result<f64> {
            let s = field(c)?;
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Data(format!("row {}: `{s}` is not a number", row + 2)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Data(format!("row {}: non-finite value", row + 2)))
            }
        };
        let int = |c: usize| -> Result<i64> {
            let v = num(c)?;
            if v.fract() != 0.0 || v.abs() > 9.0e15 {
                return Err(Error::Data(format!("row {}: `{v}` is not an integer", row + 2)));
            }
            Ok(v as i64)
        };
        let id = int(c_id)?;
        if id < 0 {
            return Err(Error::Data(format!("row {}: negative vehicle id {id}", row + 2)));
        }
        let id = id as u64;
        let frame = int(c_frame)?;
        let t = raw.entry(id).or_insert_with(|| {
            order.push(id);
            RawTrack::default()
        });
        if let Some(&last) = t.frames.last() {
            if frame <= last {
                return Err(Error::Data(format!(
                    "vehicle {id}: frame {frame} does not increase after {last}"
                )));
            }
        }
        t.frames.push(frame);
        t.x.push(num(c_x)?);
        t.y.push(num(c_y)?);
        if have_velocity {
            t.vx.push(num(c_vx.unwrap())?);
            t.vy.push(num(c_vy.unwrap())?);
        }
        t.lane.push(match c_lane {
            Some(c) => Some(int(c)?),
            None => None,
        });
    }
    if order.is_empty() {
        return Err(Error::Data("track file has no rows".into()));
    }

    let mut tracks = Vec::with_capacity(order.len());
    for id in order {
        let mut t = raw.remove(&id).unwrap();
        if !have_velocity {
            t.vx = finite_difference(&t.frames, &t.x, rate_hz);
            t.vy = finite_difference(&t.frames, &t.y, rate_hz);
        }
        tracks.push(Track {
            vehicle_id: id,
            frames: t.frames,
            x: t.x,
            y: t.y,
            vx: t.vx,
            vy: t.vy,
            lane_id: t.lane,
        });
    }

    let lanes = infer_lanes(&tracks)?;
    Ok(SceneRecording {
        id: recording_id,
        rate_hz,
        tracks,
        lanes,
    })
}

/// Central differences inside, one-sided at the ends, respecting frame gaps.
fn finite_difference(frames: &[i64], v: &[f64], rate_hz: f64) -> Vec<f64> {
    let n = v.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|k| {
            let (a, b) = if k == 0 {
                (0, 1)
            } else if k == n - 1 {
                (n - 2, n - 1)
            } else {
                (k - 1, k + 1)
            };
            let dt = (frames[b] - frames[a]) as f64 / rate_hz;
            (v[b] - v[a]) / dt
        })
        .collect()
}

fn infer_lanes(tracks: &[Track]) -> Result<LaneGeometry> {
    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for t in tracks {
        for (y, lane) in t.y.iter().zip(&t.lane_id) {
            if let Some(l) = lane {
                let e = sums.entry(*l).or_insert((0.0, 0));
                e.0 += y;
                e.1 += 1;
            }
        }
    }
    if !sums.is_empty() {
        let mut centers: Vec<f64> = sums.values().map(|(s, n)| s / *n as f64).collect();
        centers.sort_by(f64::total_cmp);
        centers.dedup();
        return LaneGeometry::new(centers, DEFAULT_LANE_WIDTH);
    }
    let (lo, hi) = tracks
        .iter()
        .flat_map(|t| t.y.iter())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| (lo.min(y), hi.max(y)));
    let count = (((hi - lo) / DEFAULT_LANE_WIDTH).floor() as usize + 1).min(64);
    LaneGeometry::uniform(count, DEFAULT_LANE_WIDTH, lo + DEFAULT_LANE_WIDTH / 2.0)
}
