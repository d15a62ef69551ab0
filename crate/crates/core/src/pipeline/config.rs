use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::{DiffusionHyperParams, GuidanceAdjust};
use crate::error::{Error, Result};
use crate::scenario::{ColumnMap, SynthConfig, DEFAULT_SAMPLE_RATE_HZ};
use crate::uncertainty::{CovarianceMode, GuidanceConfig, DEFAULT_EPS};
use crate::vmm::PhysicalLimits;
use crate::vqvae::VqVaeHyperParams;

/// Where samples come from: the built-in generator or a highD-format track
/// file (or a directory of `*_tracks.csv` files).
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DataSource {
    #[default]
    Synthetic,
    Tracks(PathBuf),
}

impl Serialize for DataSource {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            DataSource::Synthetic => s.serialize_str("synthetic"),
            DataSource::Tracks(p) => s.serialize_str(&p.to_string_lossy()),
        }
    }
}

impl<'de> Deserialize<'de> for DataSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(match s.as_str() {
            "synthetic" => DataSource::Synthetic,
            "" => return Err(serde::de::Error::custom("empty dataset source")),
            _ => DataSource::Tracks(PathBuf::from(s)),
        })
    }
}

/// A fixed guidance scale or the uncertainty-adaptive one.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GuidanceScale {
    Fixed(f64),
    #[default]
    Adaptive,
}

impl GuidanceScale {
    pub fn label(&self) -> String {
        match self {
            GuidanceScale::Fixed(w) => format!("{w}"),
            GuidanceScale::Adaptive => "uc".into(),
        }
    }
}

impl fmt::Display for GuidanceScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl std::str::FromStr for GuidanceScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "uc" {
            return Ok(GuidanceScale::Adaptive);
        }
        match s.parse::<f64>() {
            Ok(w) if w.is_finite() => Ok(GuidanceScale::Fixed(w)),
            _ => Err(Error::Config(format!("guidance scale must be a number or `uc`, got `{s}`"))),
        }
    }
}

impl Serialize for GuidanceScale {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GuidanceScale::Fixed(w) => s.serialize_f64(*w),
            GuidanceScale::Adaptive => s.serialize_str("uc"),
        }
    }
}

impl<'de> Deserialize<'de> for GuidanceScale {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(w) if w.is_finite() => Ok(GuidanceScale::Fixed(w)),
            Raw::Num(w) => Err(serde::de::Error::custom(format!("guidance scale {w} is not finite"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Rate of the track files.
    pub recording_rate_hz: f64,
    pub sample_rate_hz: f64,
    /// Window stride in recording frames.
    pub stride: usize,
    pub balance: bool,
    pub train_fraction: f64,
    pub column_map: ColumnMap,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            recording_rate_hz: 25.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            stride: 25,
            balance: true,
            train_fraction: 0.7,
            column_map: ColumnMap::highd(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub eps: f64,
    pub t_c: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub covariance: CovarianceMode,
}

impl Default for UqConfig {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        Self {
            eps: DEFAULT_EPS,
            t_c: g.t_c,
            w_min: g.w_min,
            w_max: g.w_max,
            covariance: CovarianceMode::Auto,
        }
    }
}

impl UqConfig {
    pub fn guidance(&self) -> GuidanceConfig {
        GuidanceConfig {
            w_min: self.w_min,
            w_max: self.w_max,
            t_c: self.t_c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Trajectories per sample.
    pub k: usize,
    pub w: GuidanceScale,
    /// Samples denoised together.
    pub batch: usize,
    pub adjust: GuidanceAdjust,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            k: 10,
            w: GuidanceScale::Adaptive,
            batch: 16,
            adjust: GuidanceAdjust::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub fde_horizon_s: f64,
    pub ablation_w: Vec<GuidanceScale>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            fde_horizon_s: 5.0,
            ablation_w: [1.0, 3.0, 5.0, 7.0, 13.0]
                .into_iter()
                .map(GuidanceScale::Fixed)
                .chain([GuidanceScale::Adaptive])
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub vqvae: VqVaeHyperParams,
    pub diffusion: DiffusionHyperParams,
    pub uq: UqConfig,
    pub sampling: SamplingConfig,
    pub limits: PhysicalLimits,
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    /// Parses a JSON document, applies `section.key=value` overrides in
    /// order, and validates the result.
    pub fn resolve(text: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = match text {
            Some(t) => serde_json::from_str(t).map_err(|e| Error::Config(format!("config: {e}")))?,
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if !(d.sample_rate_hz > 0.0 && d.recording_rate_hz > 0.0) {
            return Err(Error::Config("dataset rates must be positive".into()));
        }
        if d.stride == 0 {
            return Err(Error::Config("dataset stride must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&d.train_fraction) {
            return Err(Error::Config("dataset train_fraction must lie in [0, 1]".into()));
        }
        if d.source == DataSource::Synthetic {
            d.synth.validate()?;
        }
        self.vqvae.validate()?;
        self.diffusion.validate()?;
        self.uq.guidance().validate()?;
        if !(self.uq.eps > 0.0 && self.uq.eps.is_finite()) {
            return Err(Error::Config("uq eps must be positive".into()));
        }
        PhysicalLimits::new(self.limits.yaw_rate_max, self.limits.accel_max)?;
        if self.sampling.k == 0 || self.sampling.batch == 0 {
            return Err(Error::Config("sampling k and batch must be at least 1".into()));
        }
        self.sampling.adjust.validate()?;
        if !(self.evaluation.fde_horizon_s > 0.0) {
            return Err(Error::Config("evaluation fde_horizon_s must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Sets `a.b.c=value` inside a JSON object. The value is read as JSON when
/// it parses and as a plain string otherwise.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let spec = spec.strip_prefix("--").unwrap_or(spec);
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{k}` is not inside an object")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override `{spec}`: parent is not an object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.vqvae.batch_size, 64);
        assert_eq!(c.vqvae.lr, 4.5e-6);
        assert_eq!(c.vqvae.lambda, 1.0);
        assert_eq!(c.vqvae.epochs, 1200);
        assert_eq!(c.vqvae.codebook_size, 60);
        assert_eq!(c.diffusion.batch_size, 64);
        assert_eq!(c.diffusion.lr, 1.0e-4);
        assert_eq!(c.diffusion.epochs, 50);
        assert_eq!((c.uq.t_c, c.uq.w_min, c.uq.w_max), (10.0, 1.0, 7.0));
        assert_eq!(c.sampling.w, GuidanceScale::Adaptive);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig::resolve(None, &["seed=9".into(), "sampling.w=5".into()]).unwrap();
        let back = RunConfig::resolve(Some(&c.to_json()), &[]).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.sha256(), back.sha256());
    }

    #[test]
    fn overrides_apply_in_order() {
        let text = r#"{"vqvae": {"codebook_size": 8}, "dataset": {"source": "synthetic"}}"#;
        let c = RunConfig::resolve(
            Some(text),
            &[
                "--vqvae.codebook_size=12".into(),
                "dataset.synth.samples_per_class=5".into(),
                "sampling.w=uc".into(),
                "evaluation.ablation_w=[1,\"uc\"]".into(),
                "dataset.source=/data/tracks.csv".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.vqvae.codebook_size, 12);
        assert_eq!(c.dataset.synth.samples_per_class, 5);
        assert_eq!(c.evaluation.ablation_w, vec![GuidanceScale::Fixed(1.0), GuidanceScale::Adaptive]);
        assert_eq!(c.dataset.source, DataSource::Tracks("/data/tracks.csv".into()));
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(RunConfig::resolve(Some("[1]"), &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(Some("{\"nope\": 1}"), &[]), Err(Error::Config(_))));
        assert!(RunConfig::resolve(None, &["vqvae.bogus=1".into()]).is_err());
        assert!(RunConfig::resolve(None, &["vqvae".into()]).is_err());
        assert!(RunConfig::resolve(None, &["sampling.w=fast".into()]).is_err());
        assert!(RunConfig::resolve(None, &["uq.w_min=9".into()]).is_err());
        assert!(RunConfig::resolve(None, &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn guidance_scale_parsing() {
        assert_eq!("uc".parse::<GuidanceScale>().unwrap(), GuidanceScale::Adaptive);
        assert_eq!("13".parse::<GuidanceScale>().unwrap(), GuidanceScale::Fixed(13.0));
        assert!("nan".parse::<GuidanceScale>().is_err());
        assert_eq!(GuidanceScale::Fixed(1.5).label(), "1.5");
    }
}
