//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json          DatasetManifest
//! <dir>/samples/<id>.bin       observation [N, F, T_o] then future [2, T_p]
//! ```
//!
//! Sample files use the array blob layout of [`crate::blob`].

use std::path::Path;

use ndarray::{Array2, Array3, Ix2, Ix3};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FrameOrigin, LaneGeometry, Maneuver, SampleSource, ScenarioSample, N_FEATURES, N_VEHICLES};
use crate::blob::{self, BlobReader};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "cvmd-dataset/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: u64,
    pub split: SplitName,
    pub file: String,
    pub maneuver: Maneuver,
    pub target_index: usize,
    pub frame_origin: FrameOrigin,
    pub lanes: LaneGeometry,
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub n_vehicles: usize,
    pub n_features: usize,
    pub t_obs: usize,
    pub t_pred: usize,
    pub sample_rate_hz: f64,
    pub split_seed: u64,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Parses and validates a manifest document.
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != DATASET_FORMAT {
            return Err(Error::Data(format!("unsupported dataset format `{}`", m.format)));
        }
        if m.n_vehicles != N_VEHICLES || m.n_features != N_FEATURES {
            return Err(Error::Data(format!(
                "dataset has N={}, F={}; expected N={N_VEHICLES}, F={N_FEATURES}",
                m.n_vehicles, m.n_features
            )));
        }
        if m.t_obs == 0 || m.t_pred == 0 || !(m.sample_rate_hz > 0.0) {
            return Err(Error::Data("dataset windows must be non-empty with a positive rate".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &m.samples {
            if !seen.insert(r.id) {
                return Err(Error::Data(format!("duplicate sample id {}", r.id)));
            }
            let name_ok = !r.file.is_empty()
                && r.file.len() < 256
                && r.file.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
                && !r.file.starts_with('.');
            if !name_ok {
                return Err(Error::Data(format!("invalid sample file name `{}`", r.file)));
            }
            if r.target_index >= N_VEHICLES {
                return Err(Error::Data(format!("sample {}: target index {} out of range", r.id, r.target_index)));
            }
            LaneGeometry::new(r.lanes.centers.clone(), r.lanes.width)?;
        }
        Ok(m)
    }
}

fn sample_file(id: u64) -> String {
    format!("{id:06}.bin")
}

pub fn save_dataset(dir: &Path, split: &DatasetSplit) -> Result<DatasetManifest> {
    let first = split
        .all()
        .next()
        .ok_or_else(|| Error::Data("refusing to save an empty dataset".into()))?;
    let (t_obs, t_pred, rate) = (first.t_obs(), first.t_pred(), first.sample_rate_hz);
    let mut records = Vec::new();
    for (name, set) in [(SplitName::Train, &split.train), (SplitName::Test, &split.test)] {
        for s in set {
            if s.t_obs() != t_obs || s.t_pred() != t_pred || s.sample_rate_hz != rate {
                return Err(Error::Data(format!("sample {} has inconsistent window shape", s.id)));
            }
            let mut buf = Vec::new();
            blob::encode_ndarray(&s.observation.clone().into_dyn(), &mut buf);
            blob::encode_ndarray(&s.future.clone().into_dyn(), &mut buf);
            let file = sample_file(s.id);
            blob::write_file(&dir.join("samples").join(&file), &buf)?;
            records.push(SampleRecord {
                id: s.id,
                split: name,
                file,
                maneuver: s.maneuver,
                target_index: s.target_index,
                frame_origin: s.frame_origin,
                lanes: s.lanes.clone(),
                source: s.source,
            });
        }
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.to_string(),
        n_vehicles: N_VEHICLES,
        n_features: N_FEATURES,
        t_obs,
        t_pred,
        sample_rate_hz: rate,
        split_seed: split.split_seed,
        samples: records,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    blob::write_file(&dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        split_seed: manifest.split_seed,
    };
    for r in &manifest.samples {
        let bytes = blob::read_file(&dir.join("samples").join(&r.file))?;
        let mut rd = BlobReader::new(&bytes);
        let ctx = |e: Error| Error::Data(format!("sample file {}: {e}", r.file));
        let observation: Array3<f64> = rd
            .next_ndarray()
            .map_err(ctx)?
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Data(format!("sample file {}: {e}", r.file)))?;
        let future: Array2<f64> = rd
            .next_ndarray()
            .map_err(ctx)?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Data(format!("sample file {}: {e}", r.file)))?;
        let want_obs = [manifest.n_vehicles, manifest.n_features, manifest.t_obs];
        if observation.shape() != want_obs || future.shape() != [2, manifest.t_pred] {
            return Err(Error::Data(format!("sample file {} has wrong array shapes", r.file)));
        }
        let s = ScenarioSample {
            id: r.id,
            observation,
            future,
            maneuver: r.maneuver,
            target_index: r.target_index,
            frame_origin: r.frame_origin,
            sample_rate_hz: manifest.sample_rate_hz,
            lanes: r.lanes.clone(),
            source: r.source,
        };
        match r.split {
            SplitName::Train => split.train.push(s),
            SplitName::Test => split.test.push(s),
        }
    }
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{synth_generate, SynthConfig};

    #[test]
    fn save_load_bit_exact() {
        let cfg = SynthConfig {
            samples_per_class: 4,
            ..Default::default()
        };
        let split = synth_generate(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = save_dataset(dir.path(), &split).unwrap();
        assert_eq!((m.t_obs, m.t_pred), (15, 25));
        let (back, m2) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, split);
        assert_eq!(m, m2);
    }

    #[test]
    fn manifest_rejects_traversal_and_bad_dims() {
        let good = r#"{"format":"cvmd-dataset/1","n_vehicles":9,"n_features":4,"t_obs":15,"t_pred":25,
            "sample_rate_hz":5.0,"split_seed":1,"samples":[]}"#;
        assert!(DatasetManifest::parse(good).is_ok());
        assert!(DatasetManifest::parse(&good.replace("\"n_vehicles\":9", "\"n_vehicles\":3")).is_err());
        let evil = good.replace(
            "\"samples\":[]",
            r#""samples":[{"id":1,"split":"train","file":"../x","maneuver":"kl","target_index":0,
            "frame_origin":{"x":0,"y":0,"heading":0},"lanes":{"centers":[0],"width":4},
            "source":{"recording_id":0,"vehicle_id":1,"t0_frame":0}}]"#,
        );
        assert!(DatasetManifest::parse(&evil).is_err());
    }
}
