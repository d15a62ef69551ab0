//! Staged experiment driver. Every stage reads its inputs from a run
//! directory, writes its artifacts next to them and records their hashes in
//! `run.json`.

mod config;

pub use config::{
    apply_override, DataSource, DatasetConfig, EvaluationConfig, GuidanceScale, RunConfig, SamplingConfig, UqConfig,
};

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{sample_many, train_diffusion, Denoiser, GuidanceAdjust, GuidanceRequest, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_csv, ablation_table, ade, confidence_band, entropy_report, metrics_csv, render_table, sample_set_errors, summarize,
    AblationRow, EntropyReport, MetricsSummary, PredictionReport, XY,
};
use crate::rng::derive_seed;
use crate::scenario::{
    balance_dataset, extract_samples, label_maneuver, load_dataset, parse_tracks, save_dataset, synth_generate,
    DatasetManifest, DatasetSplit, ScenarioSample,
};
use crate::uncertainty::{adaptive_guidance, outlier_flag, GuidanceConfig, UncertaintyModel};
use crate::vmm::{
    drivability_audit, initial_state_from_observation, invert_rollout, rollout, MotionParamSeq, PhysicalLimits,
};
use crate::vqvae::{assign_all, classifier_accuracy, train_vqvae, VqVaeModel};

pub const RUN_FORMAT: &str = "cvmd-run/1";
pub const CODE_VERSION: &str = concat!("cvmd ", env!("CARGO_PKG_VERSION"));
/// Environment variable naming the directory new runs are created under.
pub const RUN_ROOT_ENV: &str = "CVMD_RUN_ROOT";

const RUN_FILE: &str = "run.json";
const CONFIG_FILE: &str = "config.json";
const DATASET_DIR: &str = "dataset";
const VQVAE_DIR: &str = "vqvae";
const DIFFUSION_DIR: &str = "diffusion";
const UQ_DIR: &str = "uq";
const PREDICT_DIR: &str = "predict";
const EVALUATE_DIR: &str = "evaluate";
const ABLATE_DIR: &str = "ablate";

/// Root for new run directories: `$CVMD_RUN_ROOT`, else `runs`.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    crate::blob::write_file(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    /// Hash of the configuration the stage ran with.
    pub config_sha256: String,
    /// Run-relative artifact path to its SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub code_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != RUN_FORMAT {
            return Err(Error::Data(format!("unsupported run format `{}`", m.format)));
        }
        Ok(m)
    }
}

/// An open run directory and the configuration its stages use.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

impl Run {
    /// Initializes a fresh run directory.
    pub fn create(dir: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if dir.join(RUN_FILE).exists() {
            return Err(Error::Config(format!("{} already holds a run", dir.display())));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join(CONFIG_FILE), &config.to_json())?;
        let m = RunManifest {
            format: RUN_FORMAT.into(),
            code_version: CODE_VERSION.into(),
            config_sha256: config.sha256(),
            seed: config.seed,
            stages: BTreeMap::new(),
        };
        write_text(&dir.join(RUN_FILE), &to_json(&m)?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
        })
    }

    /// Opens an existing run, applying `overrides` on top of its stored
    /// configuration.
    pub fn open(dir: &Path, overrides: &[String]) -> Result<Self> {
        let text = read_text(&dir.join(CONFIG_FILE))?;
        let config = RunConfig::resolve(Some(&text), overrides)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        RunManifest::parse(&read_text(&self.path(RUN_FILE))?)
    }

    fn record(&self, stage: &str, files: &[String]) -> Result<()> {
        let mut m = self.manifest()?;
        let mut artifacts = BTreeMap::new();
        for f in files {
            artifacts.insert(f.clone(), sha256_file(&self.path(f))?);
        }
        m.stages.insert(
            stage.into(),
            StageRecord {
                config_sha256: self.config.sha256(),
                artifacts,
            },
        );
        write_text(&self.path(RUN_FILE), &to_json(&m)?)
    }

    fn require_stage(&self, stage: &str) -> Result<StageRecord> {
        self.manifest()?
            .stages
            .remove(stage)
            .ok_or_else(|| Error::Config(format!("stage `{stage}` has not been run in {}", self.dir.display())))
    }

    /// Checks that the artifacts a stage recorded are unchanged on disk.
    pub fn verify_stage(&self, stage: &str) -> Result<()> {
        for (f, h) in self.require_stage(stage)?.artifacts {
            if sha256_file(&self.path(&f))? != h {
                return Err(Error::Data(format!("{f} changed since stage `{stage}` wrote it")));
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<(DatasetSplit, DatasetManifest)> {
        self.require_stage("prepare")?;
        load_dataset(&self.path(DATASET_DIR))
    }

    pub fn vqvae(&self) -> Result<VqVaeModel> {
        self.verify_stage("train-vqvae")?;
        Ok(VqVaeModel::load(&self.path(VQVAE_DIR))?.0)
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        self.verify_stage("train-diffusion")?;
        Ok(Denoiser::load(&self.path(DIFFUSION_DIR))?.0)
    }

    pub fn uncertainty(&self) -> Result<UncertaintyModel> {
        self.verify_stage("fit-uq")?;
        UncertaintyModel::load(&self.path(UQ_DIR))
    }
}

fn track_files(path: &Path) -> Result<Vec<PathBuf>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if !meta.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::io(path, e))? {
        let p = entry.map_err(|e| Error::io(path, e))?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_tracks.csv")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("{}: no *_tracks.csv files", path.display())));
    }
    Ok(files)
}

/// Builds the dataset a configuration describes. `synth.sample_rate_hz` and
/// `synth.train_fraction` are taken from the dataset section.
pub fn build_dataset(cfg: &RunConfig) -> Result<DatasetSplit> {
    let d = &cfg.dataset;
    let seed = derive_seed(cfg.seed, "dataset");
    match &d.source {
        DataSource::Synthetic => {
            let mut sc = d.synth.clone();
            sc.sample_rate_hz = d.sample_rate_hz;
            sc.train_fraction = d.train_fraction;
            synth_generate(&sc, seed)
        }
        DataSource::Tracks(path) => {
            let mut samples = Vec::new();
            for (i, f) in track_files(path)?.iter().enumerate() {
                let file = std::fs::File::open(f).map_err(|e| Error::io(f, e))?;
                let rec = parse_tracks(file, &d.column_map, d.recording_rate_hz, i as u32 + 1)
                    .map_err(|e| with_path(e, f))?;
                samples.extend(extract_samples(&rec, d.stride, d.sample_rate_hz)?);
            }
            for (i, s) in samples.iter_mut().enumerate() {
                s.id = i as u64;
            }
            if d.balance {
                samples = balance_dataset(samples, seed)?;
            }
            if samples.is_empty() {
                return Err(Error::Data(format!("{}: no complete sample windows", path.display())));
            }
            DatasetSplit::from_samples(samples, d.train_fraction, seed)
        }
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        Error::Decode(m) => Error::Decode(format!("{}: {m}", path.display())),
        Error::Csv(c) => Error::Data(format!("{}: {c}", path.display())),
        Error::Schema { column } => Error::Data(format!("{}: missing column `{column}`", path.display())),
        other => other,
    }
}

fn dataset_files(m: &DatasetManifest) -> Vec<String> {
    let mut files = vec![format!("{DATASET_DIR}/manifest.json")];
    files.extend(m.samples.iter().map(|s| format!("{DATASET_DIR}/samples/{}", s.file)));
    files
}

/// Generates or ingests the dataset and stores it in the run.
pub fn prepare(run: &Run) -> Result<DatasetManifest> {
    let split = build_dataset(&run.config)?;
    if split.train.is_empty() {
        return Err(Error::Data("the training split is empty".into()));
    }
    let m = save_dataset(&run.path(DATASET_DIR), &split)?;
    run.record("prepare", &dataset_files(&m))?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqStageSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub used_entries: usize,
    pub h_avg: f64,
}

fn entropy_of(model: &VqVaeModel, samples: &[ScenarioSample]) -> Result<EntropyReport> {
    let a = assign_all(model, samples)?;
    let pairs: Vec<(usize, _)> = a.iter().zip(samples).map(|(a, s)| (a.q, s.maneuver)).collect();
    entropy_report(&pairs, model.codebook().size())
}

fn usage_csv(e: &EntropyReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["q", "lcl", "kl", "lcr", "total", "entropy_bits"])?;
    for (i, (c, h)) in e.counts.iter().zip(&e.per_condition).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            c[0].to_string(),
            c[1].to_string(),
            c[2].to_string(),
            c.iter().sum::<u64>().to_string(),
            h.map(|v| format!("{v}")).unwrap_or_default(),
        ])?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Trains the context VQ-VAE and freezes it for the later stages.
pub fn train_vqvae_stage(run: &Run) -> Result<VqStageSummary> {
    let (split, _) = run.dataset()?;
    let cfg = &run.config;
    let out = train_vqvae(&split.train, &cfg.vqvae, derive_seed(cfg.seed, "vqvae"))?;
    let dir = run.path(VQVAE_DIR);
    out.model.save(&dir, &cfg.vqvae, derive_seed(cfg.seed, "vqvae"), cfg.vqvae.epochs)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "total", "reconstruction", "codebook", "commitment", "classification", "accuracy"])?;
    for l in &out.log {
        w.write_record([
            l.epoch.to_string(),
            format!("{}", l.total),
            format!("{}", l.reconstruction),
            format!("{}", l.codebook),
            format!("{}", l.commitment),
            format!("{}", l.classification),
            format!("{}", l.accuracy),
        ])?;
    }
    let log = String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
        .map_err(|e| Error::Internal(e.to_string()))?;
    write_text(&dir.join("loss.csv"), &log)?;

    let entropy = entropy_of(&out.model, &split.train)?;
    write_text(&dir.join("usage.csv"), &usage_csv(&entropy)?)?;
    let summary = VqStageSummary {
        epochs: out.log.len(),
        initial_loss: out.log.first().map_or(f64::NAN, |l| l.total),
        final_loss: out.log.last().map_or(f64::NAN, |l| l.total),
        train_accuracy: classifier_accuracy(&out.model, &split.train)?,
        used_entries: entropy.used_entries,
        h_avg: entropy.h_avg,
    };
    write_text(&dir.join("summary.json"), &to_json(&summary)?)?;
    let files: Vec<String> = ["vqvae.json", "vqvae.bin", "loss.csv", "usage.csv", "summary.json"]
        .iter()
        .map(|f| format!("{VQVAE_DIR}/{f}"))
        .collect();
    run.record("train-vqvae", &files)?;
    Ok(summary)
}

/// Codebook assignments of the training set, tied to the checkpoint that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionCache {
    pub vqvae_sha256: String,
    /// `(sample id, 1-based entry)`.
    pub conditions: Vec<(u64, usize)>,
}

fn vq_params_hash(run: &Run) -> Result<String> {
    sha256_file(&run.path(&format!("{VQVAE_DIR}/vqvae.bin")))
}

/// Loads cached training conditions when they match the current checkpoint,
/// computing and storing them otherwise.
pub fn training_conditions(run: &Run, model: &VqVaeModel, train: &[ScenarioSample]) -> Result<ConditionCache> {
    let path = run.path(&format!("{DIFFUSION_DIR}/conditions.json"));
    let hash = vq_params_hash(run)?;
    if path.exists() {
        let cached: ConditionCache = serde_json::from_str(&read_text(&path)?)?;
        let ids: Vec<u64> = cached.conditions.iter().map(|c| c.0).collect();
        if cached.vqvae_sha256 == hash && ids == train.iter().map(|s| s.id).collect::<Vec<_>>() {
            return Ok(cached);
        }
    }
    let conditions = assign_all(model, train)?.into_iter().map(|a| (a.id, a.q)).collect();
    let cache = ConditionCache {
        vqvae_sha256: hash,
        conditions,
    };
    write_text(&path, &to_json(&cache)?)?;
    Ok(cache)
}

/// Motion parameters that reproduce a sample's recorded future when rolled
/// out from its observed state.
pub fn sample_motion(s: &ScenarioSample) -> Result<MotionParamSeq> {
    invert_rollout(&s.future, initial_state_from_observation(s), s.tau())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffStageSummary {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Largest ADE between a training future and the rollout of its
    /// extracted motion parameters.
    pub max_extraction_ade: f64,
    pub mean_extraction_ade: f64,
}

/// Trains the conditional denoiser on the frozen VQ-VAE's conditions.
pub fn train_diffusion_stage(run: &Run) -> Result<DiffStageSummary> {
    let (split, _) = run.dataset()?;
    let vq = run.vqvae()?;
    let vq_hash = vq_params_hash(run)?;
    let cfg = &run.config;
    let cache = training_conditions(run, &vq, &split.train)?;
    let mut data = Vec::with_capacity(split.train.len());
    let (mut max_ade, mut sum_ade) = (0.0f64, 0.0);
    for (s, &(_, q)) in split.train.iter().zip(&cache.conditions) {
        let p = sample_motion(s)?;
        let back = rollout(initial_state_from_observation(s), &p, s.tau())?;
        let e = ade(s.future.view(), back.view())?;
        max_ade = max_ade.max(e);
        sum_ade += e;
        data.push((crate::vmm::clamp_params(&p, &cfg.limits), q));
    }
    let seed = derive_seed(cfg.seed, "diffusion");
    let out = train_diffusion(&data, vq.codebook().size(), &cfg.diffusion, seed)?;
    let dir = run.path(DIFFUSION_DIR);
    out.model.save(&dir, seed, cfg.diffusion.epochs)?;
    let mut log = String::from("epoch,loss\n");
    for l in &out.log {
        log.push_str(&format!("{},{}\n", l.epoch, l.loss));
    }
    write_text(&dir.join("loss.csv"), &log)?;
    if vq_params_hash(run)? != vq_hash {
        return Err(Error::Internal("the VQ-VAE checkpoint changed during diffusion training".into()));
    }
    let summary = DiffStageSummary {
        epochs: out.log.len(),
        initial_loss: out.log.first().map_or(f64::NAN, |l| l.loss),
        final_loss: out.log.last().map_or(f64::NAN, |l| l.loss),
        max_extraction_ade: max_ade,
        mean_extraction_ade: sum_ade / split.train.len() as f64,
    };
    write_text(&dir.join("summary.json"), &to_json(&summary)?)?;
    let files: Vec<String> = ["diffusion.json", "diffusion.bin", "conditions.json", "loss.csv", "summary.json"]
        .iter()
        .map(|f| format!("{DIFFUSION_DIR}/{f}"))
        .collect();
    run.record("train-diffusion", &files)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqStageSummary {
    pub clusters: usize,
    pub diagonal: usize,
    pub max_training_delta: f64,
}

/// Fits per-entry latent statistics on the training set.
pub fn fit_uq_stage(run: &Run) -> Result<UqStageSummary> {
    let (split, _) = run.dataset()?;
    let vq = run.vqvae()?;
    let a = assign_all(&vq, &split.train)?;
    let uq = UncertaintyModel::fit(&a, &vq.codebook(), run.config.uq.eps, run.config.uq.covariance)?;
    let dir = run.path(UQ_DIR);
    uq.save(&dir)?;
    let mut max_delta = 0.0f64;
    for x in &a {
        max_delta = max_delta.max(uq.delta(x.q, x.z_hat.view())?);
    }
    let summary = UqStageSummary {
        clusters: uq.clusters.len(),
        diagonal: uq.clusters.values().filter(|c| c.cov.is_diagonal()).count(),
        max_training_delta: max_delta,
    };
    write_text(&dir.join("summary.json"), &to_json(&summary)?)?;
    let files: Vec<String> = ["uq.json", "uq.bin", "summary.json"].iter().map(|f| format!("{UQ_DIR}/{f}")).collect();
    run.record("fit-uq", &files)?;
    Ok(summary)
}

/// Everything needed to turn observations into predicted trajectories.
pub struct Predictor<'a> {
    pub vqvae: &'a VqVaeModel,
    pub denoiser: &'a Denoiser,
    pub schedule: NoiseSchedule,
    pub uq: &'a UncertaintyModel,
    pub guidance: GuidanceConfig,
    pub limits: PhysicalLimits,
    pub k: usize,
    pub batch: usize,
    pub adjust: GuidanceAdjust,
    pub fde_horizon_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub sample_id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub w: GuidanceScale,
    pub reports: Vec<PredictionReport>,
    pub failures: Vec<SampleFailure>,
}

struct Prepared<'s> {
    sample: &'s ScenarioSample,
    q: usize,
    delta: f64,
    w: f64,
}

impl<'a> Predictor<'a> {
    pub fn from_run(run: &Run, vqvae: &'a VqVaeModel, denoiser: &'a Denoiser, uq: &'a UncertaintyModel) -> Result<Self> {
        uq.check_codebook(&vqvae.codebook())?;
        let c = &run.config;
        Ok(Self {
            vqvae,
            denoiser,
            schedule: denoiser.schedule()?,
            uq,
            guidance: c.uq.guidance(),
            limits: c.limits,
            k: c.sampling.k,
            batch: c.sampling.batch,
            adjust: c.sampling.adjust,
            fde_horizon_s: c.evaluation.fde_horizon_s,
            seed: c.seed,
        })
    }

    /// Noise seed of a sample; independent of the guidance scale so sweeps
    /// share their draws.
    pub fn sample_seed(&self, id: u64) -> u64 {
        derive_seed(self.seed, &format!("predict/{id}"))
    }

    fn prepare<'s>(&self, s: &'s ScenarioSample, scale: GuidanceScale) -> Result<Prepared<'s>> {
        let shape = self.vqvae.input_shape();
        if s.observation.shape() != shape {
            return Err(Error::shape("observation", &shape, s.observation.shape()));
        }
        if s.t_pred() != self.denoiser.seq_len() {
            return Err(Error::shape("future", &[2, self.denoiser.seq_len()], s.future.shape()));
        }
        let z = self.vqvae.encode(&s.observation)?;
        let q = self.vqvae.quantize(z.view())?.index;
        let delta = self.uq.delta(q, z.view())?;
        let w = match scale {
            GuidanceScale::Fixed(w) => w,
            GuidanceScale::Adaptive => adaptive_guidance(delta, &self.guidance),
        };
        Ok(Prepared { sample: s, q, delta, w })
    }

    fn report(&self, p: &Prepared, params: &[MotionParamSeq]) -> Result<PredictionReport> {
        let s = p.sample;
        let s0 = initial_state_from_observation(s);
        let tau = s.tau();
        let mut trajs = Vec::with_capacity(params.len());
        let mut worst: Option<crate::vmm::DrivabilityReport> = None;
        for prm in params {
            let t = rollout(s0, prm, tau)?;
            let audit = drivability_audit(&t, s0, tau, &self.limits)?;
            let excess = |a: &crate::vmm::DrivabilityReport| a.yaw_rate_excess + a.accel_excess;
            if worst.is_none_or(|w| excess(&audit) > excess(&w) || (!audit.drivable && w.drivable)) {
                worst = Some(audit);
            }
            trajs.push(t);
        }
        let (mean, std) = confidence_band(&trajs)?;
        let entry = self.vqvae.codebook().entry(p.q).map(|e| e.to_owned()).ok_or_else(|| {
            Error::Internal(format!("entry {} missing from the codebook", p.q))
        })?;
        let worst = worst.expect("at least one draw");
        let (ade, fde) = sample_set_errors(s.future.view(), &trajs, self.fde_horizon_s, s.sample_rate_hz)?;
        Ok(PredictionReport {
            sample_id: s.id,
            condition: p.q,
            condition_maneuver: self.vqvae.predicted_class(entry.view())?,
            truth_maneuver: s.maneuver,
            delta: p.delta,
            w: p.w,
            outlier: outlier_flag(p.delta, self.guidance.t_c),
            sampled_maneuvers: trajs.iter().map(|t| label_maneuver(t, &s.lanes).ok()).collect(),
            trajectories: trajs.iter().map(|t| XY::from_array(t.view())).collect(),
            ade,
            fde,
            mean: XY::from_array(mean.view()),
            std: XY::from_array(std.view()),
            drivable: worst.drivable,
            worst_audit: worst,
        })
    }

    /// Predicts every sample. A sample that cannot be processed is reported
    /// as a failure and the rest continue.
    pub fn predict(&self, samples: &[ScenarioSample], scale: GuidanceScale) -> Result<PredictOutput> {
        let mut reports = Vec::with_capacity(samples.len());
        let mut failures = Vec::new();
        let mut ready = Vec::new();
        for s in samples {
            match self.prepare(s, scale) {
                Ok(p) => ready.push(p),
                Err(e) => failures.push(SampleFailure {
                    sample_id: s.id,
                    error: e.to_string(),
                }),
            }
        }
        for chunk in ready.chunks(self.batch) {
            let reqs: Vec<GuidanceRequest> = chunk
                .iter()
                .map(|p| GuidanceRequest {
                    condition: p.q,
                    w: p.w,
                    num_samples: self.k,
                    seed: self.sample_seed(p.sample.id),
                })
                .collect();
            let draws = sample_many(self.denoiser, &self.schedule, &reqs, &self.limits, &self.adjust)?;
            for (p, d) in chunk.iter().zip(&draws) {
                match self.report(p, d) {
                    Ok(r) => reports.push(r),
                    Err(e) => failures.push(SampleFailure {
                        sample_id: p.sample.id,
                        error: e.to_string(),
                    }),
                }
            }
        }
        failures.sort_by_key(|f| f.sample_id);
        Ok(PredictOutput {
            w: scale,
            reports,
            failures,
        })
    }
}

/// Predicts the test split with the configured guidance scale.
pub fn predict_stage(run: &Run) -> Result<PredictOutput> {
    let (split, _) = run.dataset()?;
    let vq = run.vqvae()?;
    let den = run.denoiser()?;
    let uq = run.uncertainty()?;
    let p = Predictor::from_run(run, &vq, &den, &uq)?;
    let out = p.predict(&split.test, run.config.sampling.w)?;
    let dir = run.path(PREDICT_DIR);
    write_text(&dir.join("reports.json"), &to_json(&out)?)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&out.reports)?)?;
    let files: Vec<String> =
        ["reports.json", "metrics.csv"].iter().map(|f| format!("{PREDICT_DIR}/{f}")).collect();
    run.record("predict", &files)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub w: GuidanceScale,
    pub metrics: MetricsSummary,
    pub failures: usize,
    /// Entropy of the training set's maneuver mix per codebook entry.
    pub entropy: EntropyReport,
}

/// Checks that every report refers to a known sample whose stored truth
/// matches.
pub fn match_reports<'s>(reports: &[PredictionReport], truths: &'s [ScenarioSample]) -> Result<Vec<&'s ScenarioSample>> {
    let by_id: BTreeMap<u64, &ScenarioSample> = truths.iter().map(|s| (s.id, s)).collect();
    let missing: BTreeSet<u64> = reports.iter().map(|r| r.sample_id).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("reports for unknown sample ids {missing:?}")));
    }
    Ok(reports.iter().map(|r| by_id[&r.sample_id]).collect())
}

fn bands_csv(reports: &[PredictionReport], truths: &[&ScenarioSample]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "step", "truth_x", "truth_y", "mean_x", "mean_y", "std_x", "std_y"])?;
    for (r, s) in reports.iter().zip(truths) {
        for k in 0..r.mean.x.len() {
            w.write_record([
                r.sample_id.to_string(),
                (k + 1).to_string(),
                format!("{}", s.future[[0, k]]),
                format!("{}", s.future[[1, k]]),
                format!("{}", r.mean.x[k]),
                format!("{}", r.mean.y[k]),
                format!("{}", r.std.x[k]),
                format!("{}", r.std.y[k]),
            ])?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?)
        .map_err(|e| Error::Internal(e.to_string()))
}

/// Recomputes the displacement errors of stored reports against the dataset
/// and summarizes them.
pub fn evaluate_stage(run: &Run) -> Result<EvaluationSummary> {
    run.verify_stage("predict")?;
    let (split, _) = run.dataset()?;
    let out: PredictOutput = serde_json::from_str(&read_text(&run.path(&format!("{PREDICT_DIR}/reports.json")))?)?;
    let truths = match_reports(&out.reports, &split.test)?;
    let mut reports = out.reports.clone();
    for (r, s) in reports.iter_mut().zip(&truths) {
        let trajs: Vec<Array2<f64>> = r.trajectories.iter().map(XY::to_array).collect();
        (r.ade, r.fde) = sample_set_errors(s.future.view(), &trajs, run.config.evaluation.fde_horizon_s, s.sample_rate_hz)?;
    }
    let vq = run.vqvae()?;
    let summary = EvaluationSummary {
        w: out.w,
        metrics: summarize(&reports)?,
        failures: out.failures.len(),
        entropy: entropy_of(&vq, &split.train)?,
    };
    let dir = run.path(EVALUATE_DIR);
    write_text(&dir.join("summary.json"), &to_json(&summary)?)?;
    write_text(&dir.join("summary.txt"), &summary_text(&summary))?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&reports)?)?;
    write_text(&dir.join("bands.csv"), &bands_csv(&reports, &truths)?)?;
    let files: Vec<String> = ["summary.json", "summary.txt", "metrics.csv", "bands.csv"]
        .iter()
        .map(|f| format!("{EVALUATE_DIR}/{f}"))
        .collect();
    run.record("evaluate", &files)?;
    Ok(summary)
}

pub fn summary_text(s: &EvaluationSummary) -> String {
    let m = &s.metrics;
    let rows = vec![
        vec!["guidance".into(), s.w.label()],
        vec!["samples".into(), m.samples.to_string()],
        vec!["failures".into(), s.failures.to_string()],
        vec!["mean ADE (m)".into(), format!("{:.4}", m.mean_ade)],
        vec!["mean FDE (m)".into(), format!("{:.4}", m.mean_fde)],
        vec!["mean w".into(), format!("{:.4}", m.mean_w)],
        vec!["outlier fraction".into(), format!("{:.4}", m.outlier_fraction)],
        vec!["drivable fraction".into(), format!("{:.4}", m.drivable_fraction)],
        vec!["condition agreement".into(), format!("{:.4}", m.condition_agreement)],
        vec!["mean spread (m)".into(), format!("{:.4}", m.mean_spread)],
        vec!["used entries".into(), s.entropy.used_entries.to_string()],
        vec!["H_avg (bits)".into(), format!("{:.4}", s.entropy.h_avg)],
    ];
    render_table(&["metric", "value"], &rows)
}

/// Predicts the test split once per guidance scale.
pub fn ablate_stage(run: &Run, scales: &[GuidanceScale]) -> Result<Vec<AblationRow>> {
    if scales.is_empty() {
        return Err(Error::Config("ablation needs at least one guidance scale".into()));
    }
    let (split, _) = run.dataset()?;
    let vq = run.vqvae()?;
    let den = run.denoiser()?;
    let uq = run.uncertainty()?;
    let p = Predictor::from_run(run, &vq, &den, &uq)?;
    let mut rows = Vec::with_capacity(scales.len());
    for &w in scales {
        let out = p.predict(&split.test, w)?;
        rows.push(AblationRow {
            w: w.label(),
            summary: summarize(&out.reports)?,
        });
    }
    let dir = run.path(ABLATE_DIR);
    write_text(&dir.join("ablation.json"), &to_json(&rows)?)?;
    write_text(&dir.join("ablation.txt"), &ablation_table(&rows))?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(&rows)?)?;
    let files: Vec<String> =
        ["ablation.json", "ablation.txt", "ablation.csv"].iter().map(|f| format!("{ABLATE_DIR}/{f}")).collect();
    run.record("ablate", &files)?;
    Ok(rows)
}
