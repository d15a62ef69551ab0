//! Context VQ-VAE: encodes an observed scenario `[N, F, T_o]` to a latent
//! vector, snaps it to the nearest of `Q` codebook entries, reconstructs the
//! scenario from the entry and classifies the entry's maneuver.
//!
//! Condition indices are 1-based (`1..=Q`); index 0 is reserved for the
//! unconditional token of the diffusion model.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, Axis, Ix2, Ix3, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob;
use crate::error::{Error, Result};
use crate::nn::{conv_out_len, softmax_rows, Adam, Conv1d, Graph, Linear, ParamId, ParamSpec, ParamStore, Var};
use crate::scenario::{Maneuver, ScenarioSample};

pub const VQVAE_FORMAT: &str = "cvmd-vqvae/1";
const MANIFEST_FILE: &str = "vqvae.json";
const PARAMS_FILE: &str = "vqvae.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqVaeHyperParams {
    /// Q
    pub codebook_size: usize,
    /// R_q
    pub latent_dim: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub hidden_channels: usize,
    pub grad_clip: Option<f64>,
    /// Replaces the gradient update of the codebook by exponential moving
    /// averages of the assigned encoder outputs with this decay.
    pub codebook_ema: Option<f64>,
}

impl Default for VqVaeHyperParams {
    fn default() -> Self {
        Self {
            codebook_size: 60,
            latent_dim: 64,
            lambda: 1.0,
            batch_size: 64,
            lr: 4.5e-6,
            epochs: 1200,
            hidden_channels: 32,
            grad_clip: None,
            codebook_ema: None,
        }
    }
}

impl VqVaeHyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("vqvae: {m}")));
        if self.codebook_size == 0 {
            return bad("codebook_size must be at least 1");
        }
        if self.latent_dim == 0 || self.hidden_channels == 0 || self.batch_size == 0 {
            return bad("latent_dim, hidden_channels and batch_size must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        if self.codebook_ema.is_some_and(|d| !(0.0..1.0).contains(&d)) {
            return bad("codebook_ema must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    entries: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub z_hat: Array1<f64>,
    pub z_q: Array1<f64>,
    /// 1-based codebook index.
    pub index: usize,
    pub distance_sq: f64,
}

/// Nearest row of `entries` under squared Euclidean distance, ties to the
/// lowest row. Returns the 0-based row and its distance.
fn nearest_row(z: ArrayView1<f64>, entries: ArrayView2<f64>) -> Result<(usize, f64)> {
    if entries.nrows() == 0 {
        return Err(Error::Config("codebook is empty".into()));
    }
    if entries.ncols() != z.len() {
        return Err(Error::shape("latent vector", &[entries.ncols()], &[z.len()]));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in entries.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(z.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 || (i == 0 && d.is_nan()) {
            best = (i, d);
        }
    }
    Ok(best)
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Config("codebook must have at least one non-empty entry".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook entries must be finite".into()));
        }
        Ok(Self { entries })
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    /// Entry for a 1-based index.
    pub fn entry(&self, q: usize) -> Option<ArrayView1<'_, f64>> {
        (1..=self.size()).contains(&q).then(|| self.entries.row(q - 1))
    }

    pub fn quantize(&self, z_hat: ArrayView1<f64>) -> Result<QuantizationResult> {
        quantize(z_hat, self.entries.view())
    }

    /// Stable digest of the entries, used to tie fitted statistics to the
    /// codebook they came from.
    pub fn sha256(&self) -> String {
        let mut buf = Vec::new();
        blob::encode_ndarray(&self.entries.clone().into_dyn(), &mut buf);
        hex::encode(Sha256::digest(&buf))
    }
}

pub fn quantize(z_hat: ArrayView1<f64>, entries: ArrayView2<f64>) -> Result<QuantizationResult> {
    let (row, d) = nearest_row(z_hat, entries)?;
    Ok(QuantizationResult {
        z_hat: z_hat.to_owned(),
        z_q: entries.row(row).to_owned(),
        index: row + 1,
        distance_sq: d,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖ξ − ξ̂‖² + ‖sg[ẑ] − z_q‖² + ‖ẑ − sg[z_q]‖²` for one sample. The two
/// latent terms have equal values and differ only in where gradients go.
pub fn vq_loss(observation: &[f64], reconstruction: &[f64], z_hat: &[f64], z_q: &[f64]) -> Result<f64> {
    if observation.len() != reconstruction.len() {
        return Err(Error::shape("reconstruction", &[observation.len()], &[reconstruction.len()]));
    }
    if z_hat.len() != z_q.len() {
        return Err(Error::shape("z_q", &[z_hat.len()], &[z_q.len()]));
    }
    let latent = sq_dist(z_hat, z_q);
    Ok(sq_dist(observation, reconstruction) + 2.0 * latent)
}

pub fn total_loss(vq: f64, ce: f64, lambda: f64) -> f64 {
    vq + lambda * ce
}

/// Per-feature standardization shared by all vehicles and time steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit(samples: &[&Array3<f64>]) -> Self {
        let f = samples.first().map_or(0, |s| s.dim().1);
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut n = 0usize;
        for s in samples {
            for ((_, fi, _), v) in s.indexed_iter() {
                sum[fi] += v;
                sq[fi] += v * v;
            }
            n += s.dim().0 * s.dim().2;
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqArch {
    pub n_vehicles: usize,
    pub n_features: usize,
    pub t_obs: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden_channels: usize,
}

impl VqArch {
    fn lengths(&self) -> (usize, usize, usize) {
        let l0 = self.t_obs;
        let l1 = conv_out_len(l0, 3, 2, 1);
        let l2 = conv_out_len(l1, 3, 2, 1);
        (l0, l1, l2)
    }

    fn channels(&self) -> usize {
        self.n_vehicles * self.n_features
    }

    fn validate(&self) -> Result<()> {
        if self.n_vehicles == 0 || self.n_features == 0 || self.t_obs == 0 {
            return Err(Error::Config("vqvae: empty input shape".into()));
        }
        if self.codebook_size == 0 || self.latent_dim == 0 || self.hidden_channels == 0 {
            return Err(Error::Config("vqvae: zero-sized layer".into()));
        }
        let too_big = self.channels() > 4096 || self.t_obs > 4096 || self.latent_dim > 4096 || self.hidden_channels > 1024 || self.codebook_size > 1 << 16;
        if too_big {
            return Err(Error::Config("vqvae: architecture exceeds supported size".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layers {
    enc1: Conv1d,
    enc2: Conv1d,
    enc3: Conv1d,
    enc_fc: Linear,
    dec_fc: Linear,
    dec1: Conv1d,
    dec2: Conv1d,
    dec_out: Conv1d,
    classifier: Linear,
    codebook: ParamId,
}

#[derive(Debug, Clone)]
pub struct VqVaeModel {
    pub arch: VqArch,
    pub norm: FeatureNorm,
    store: ParamStore,
    layers: Layers,
}

impl VqVaeModel {
    pub fn new(arch: VqArch, norm: FeatureNorm, seed: u64) -> Result<Self> {
        arch.validate()?;
        if norm.mean.len() != arch.n_features || norm.std.len() != arch.n_features {
            return Err(Error::Config("vqvae: normalization does not match feature count".into()));
        }
        let mut rng = crate::rng::seeded(seed, "vqvae-init");
        let mut st = ParamStore::new();
        let (c, h, r) = (arch.channels(), arch.hidden_channels, arch.latent_dim);
        let (_, _, l2) = arch.lengths();
        let layers = Layers {
            enc1: Conv1d::new(&mut st, "enc1", c, h, 1, &mut rng),
            enc2: Conv1d::new(&mut st, "enc2", h, h, 2, &mut rng),
            enc3: Conv1d::new(&mut st, "enc3", h, h, 2, &mut rng),
            enc_fc: Linear::new(&mut st, "enc_fc", h * l2, r, &mut rng),
            dec_fc: Linear::new(&mut st, "dec_fc", r, h * l2, &mut rng),
            dec1: Conv1d::new(&mut st, "dec1", h, h, 1, &mut rng),
            dec2: Conv1d::new(&mut st, "dec2", h, h, 1, &mut rng),
            dec_out: Conv1d::new(&mut st, "dec_out", h, c, 1, &mut rng),
            classifier: Linear::new(&mut st, "classifier", r, 3, &mut rng),
            codebook: {
                let cb = ArrayD::from_shape_fn(IxDyn(&[arch.codebook_size, r]), |_| rng.sample::<f64, _>(StandardNormal));
                st.add("codebook", cb)
            },
        };
        Ok(Self {
            arch,
            norm,
            store: st,
            layers,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> Codebook {
        let e = self.store.value(self.layers.codebook).clone().into_dimensionality::<Ix2>().unwrap();
        Codebook { entries: e }
    }

    /// Replaces the codebook; shape must stay `[Q, R_q]`.
    pub fn set_codebook(&mut self, entries: Array2<f64>) -> Result<()> {
        let want = [self.arch.codebook_size, self.arch.latent_dim];
        if entries.shape() != want {
            return Err(Error::shape("codebook", &want, entries.shape()));
        }
        *self.store.value_mut(self.layers.codebook) = entries.into_dyn();
        Ok(())
    }

    /// Sets the classifier to `logits = w z + b`.
    pub fn set_classifier(&mut self, w: Array2<f64>, b: Array1<f64>) -> Result<()> {
        let want = [3, self.arch.latent_dim];
        if w.shape() != want || b.len() != 3 {
            return Err(Error::shape("classifier weights", &want, w.shape()));
        }
        *self.store.value_mut(self.layers.classifier.w) = w.into_dyn();
        *self.store.value_mut(self.layers.classifier.b) = b.into_dyn();
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.arch.n_vehicles, self.arch.n_features, self.arch.t_obs]
    }

    fn check_obs(&self, obs: &Array3<f64>) -> Result<()> {
        let want = self.input_shape();
        if obs.shape() != want {
            return Err(Error::shape("observation", &want, obs.shape()));
        }
        Ok(())
    }

    fn check_latent(&self, z: ArrayView1<f64>) -> Result<()> {
        if z.len() != self.arch.latent_dim {
            return Err(Error::shape("latent vector", &[self.arch.latent_dim], &[z.len()]));
        }
        Ok(())
    }

    /// `[N, F, T] → [N·F, T]`, standardized per feature.
    fn normalize(&self, obs: &Array3<f64>) -> Array2<f64> {
        let (n, f, t) = obs.dim();
        let mut out = Array2::zeros((n * f, t));
        for ni in 0..n {
            for fi in 0..f {
                let (m, sd) = (self.norm.mean[fi], self.norm.std[fi]);
                out.row_mut(ni * f + fi).assign(&obs.slice(s![ni, fi, ..]).mapv(|v| (v - m) / sd));
            }
        }
        out
    }

    fn denormalize(&self, x: ndarray::ArrayView2<f64>) -> Array3<f64> {
        let (n, f, t) = (self.arch.n_vehicles, self.arch.n_features, self.arch.t_obs);
        let mut out = Array3::zeros((n, f, t));
        for ni in 0..n {
            for fi in 0..f {
                let (m, sd) = (self.norm.mean[fi], self.norm.std[fi]);
                out.slice_mut(s![ni, fi, ..]).assign(&x.row(ni * f + fi).mapv(|v| v * sd + m));
            }
        }
        out
    }

    fn batch_input(&self, obs: &[&Array3<f64>]) -> ArrayD<f64> {
        let views: Vec<Array2<f64>> = obs.iter().map(|o| self.normalize(o)).collect();
        let v: Vec<_> = views.iter().map(|a| a.view()).collect();
        ndarray::stack(Axis(0), &v).expect("uniform shapes").into_dyn()
    }

    fn encoder(&self, g: &mut Graph, x: Var) -> Var {
        let (st, l) = (&self.store, &self.layers);
        let h = l.enc1.forward(g, st, x);
        let h = g.silu(h);
        let h = l.enc2.forward(g, st, h);
        let h = g.silu(h);
        let h = l.enc3.forward(g, st, h);
        let h = g.silu(h);
        let b = g.value(h).shape()[0];
        let (_, _, l2) = self.arch.lengths();
        let h = g.reshape(h, &[b, self.arch.hidden_channels * l2]);
        l.enc_fc.forward(g, st, h)
    }

    fn decoder(&self, g: &mut Graph, z: Var) -> Var {
        let (st, l) = (&self.store, &self.layers);
        let (l0, l1, l2) = self.arch.lengths();
        let b = g.value(z).shape()[0];
        let h = l.dec_fc.forward(g, st, z);
        let h = g.silu(h);
        let h = g.reshape(h, &[b, self.arch.hidden_channels, l2]);
        let h = g.upsample(h, l1);
        let h = l.dec1.forward(g, st, h);
        let h = g.silu(h);
        let h = g.upsample(h, l0);
        let h = l.dec2.forward(g, st, h);
        let h = g.silu(h);
        l.dec_out.forward(g, st, h)
    }

    pub fn encode_batch(&self, obs: &[&Array3<f64>]) -> Result<Array2<f64>> {
        for o in obs {
            self.check_obs(o)?;
        }
        if obs.is_empty() {
            return Ok(Array2::zeros((0, self.arch.latent_dim)));
        }
        let mut g = Graph::inference();
        let x = g.leaf(self.batch_input(obs));
        let z = self.encoder(&mut g, x);
        Ok(g.value(z).clone().into_dimensionality::<Ix2>().unwrap())
    }

    pub fn encode(&self, obs: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.encode_batch(&[obs])?.row(0).to_owned())
    }

    pub fn quantize(&self, z_hat: ArrayView1<f64>) -> Result<QuantizationResult> {
        self.check_latent(z_hat)?;
        quantize(z_hat, self.store.value(self.layers.codebook).view().into_dimensionality::<Ix2>().unwrap())
    }

    /// Reconstruction in observation units.
    pub fn decode(&self, z_q: ArrayView1<f64>) -> Result<Array3<f64>> {
        self.check_latent(z_q)?;
        let mut g = Graph::inference();
        let z = g.leaf(z_q.to_owned().insert_axis(Axis(0)).into_dyn());
        let y = self.decoder(&mut g, z);
        let y = g.value(y).view().into_dimensionality::<Ix3>().unwrap();
        Ok(self.denormalize(y.index_axis(Axis(0), 0)))
    }

    pub fn classifier_logits(&self, z_q: ArrayView1<f64>) -> Result<[f64; 3]> {
        self.check_latent(z_q)?;
        let w = self.store.value(self.layers.classifier.w).view().into_dimensionality::<Ix2>().unwrap();
        let b = self.store.value(self.layers.classifier.b);
        let l = w.dot(&z_q);
        Ok([l[0] + b[[0]], l[1] + b[[1]], l[2] + b[[2]]])
    }

    /// Softmax class probabilities in `Maneuver::ALL` order.
    pub fn classify(&self, z_q: ArrayView1<f64>) -> Result<[f64; 3]> {
        let l = self.classifier_logits(z_q)?;
        let p = softmax_rows(ndarray::aview2(&[l]));
        Ok([p[[0, 0]], p[[0, 1]], p[[0, 2]]])
    }

    pub fn predicted_class(&self, z_q: ArrayView1<f64>) -> Result<Maneuver> {
        let p = self.classify(z_q)?;
        let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        Ok(Maneuver::ALL[best])
    }

    pub fn save(&self, dir: &Path, hyper: &VqVaeHyperParams, seed: u64, epochs_trained: usize) -> Result<VqCheckpointManifest> {
        let bytes = self.store.to_blob();
        let manifest = VqCheckpointManifest {
            format: VQVAE_FORMAT.to_string(),
            arch: self.arch.clone(),
            norm: self.norm.clone(),
            hyper: hyper.clone(),
            seed,
            epochs_trained,
            params: self.store.specs(),
            params_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        blob::write_file(&dir.join(PARAMS_FILE), &bytes)?;
        blob::write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, VqCheckpointManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = VqCheckpointManifest::parse(&text)?;
        let bytes = blob::read_file(&dir.join(PARAMS_FILE))?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.params_sha256 {
            return Err(Error::Decode(format!("{}: checksum mismatch", dir.join(PARAMS_FILE).display())));
        }
        let mut model = Self::new(manifest.arch.clone(), manifest.norm.clone(), manifest.seed)?;
        model.store.load_blob(&manifest.params, &bytes)?;
        if !model.store.is_finite() {
            return Err(Error::Decode("checkpoint contains non-finite parameters".into()));
        }
        Ok((model, manifest))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqCheckpointManifest {
    pub format: String,
    pub arch: VqArch,
    pub norm: FeatureNorm,
    pub hyper: VqVaeHyperParams,
    pub seed: u64,
    pub epochs_trained: usize,
    pub params: Vec<ParamSpec>,
    pub params_sha256: String,
}

impl VqCheckpointManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != VQVAE_FORMAT {
            return Err(Error::Decode(format!("unsupported checkpoint format `{}`", m.format)));
        }
        m.arch.validate().map_err(|e| Error::Decode(e.to_string()))?;
        if m.norm.mean.len() != m.arch.n_features
            || m.norm.std.len() != m.arch.n_features
            || m.norm.std.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || m.norm.mean.iter().any(|v| !v.is_finite())
        {
            return Err(Error::Decode("invalid feature normalization".into()));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqEpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub classification: f64,
    pub accuracy: f64,
}

pub struct VqTrainOutput {
    pub model: VqVaeModel,
    pub log: Vec<VqEpochLoss>,
}

fn arch_for(train: &[ScenarioSample], hp: &VqVaeHyperParams) -> Result<VqArch> {
    let first = train.first().ok_or_else(|| Error::Input("vqvae: training set is empty".into()))?;
    let shape = first.observation.shape().to_vec();
    for s in train {
        if s.observation.shape() != shape.as_slice() {
            return Err(Error::shape("observation", &shape, s.observation.shape()));
        }
    }
    Ok(VqArch {
        n_vehicles: shape[0],
        n_features: shape[1],
        t_obs: shape[2],
        codebook_size: hp.codebook_size,
        latent_dim: hp.latent_dim,
        hidden_channels: hp.hidden_channels,
    })
}

/// Draws initial codebook entries from encoder outputs of the training set.
/// Entries beyond the training-set size are jittered copies.
fn init_codebook(model: &mut VqVaeModel, train: &[ScenarioSample], rng: &mut crate::rng::Rng) -> Result<()> {
    let obs: Vec<&Array3<f64>> = train.iter().map(|s| &s.observation).collect();
    let z = model.encode_batch(&obs)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let spread = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64).sqrt().max(1e-3);
    let q = model.arch.codebook_size;
    let mut cb = Array2::zeros((q, model.arch.latent_dim));
    for i in 0..q {
        let src = z.row(order[i % order.len()]);
        let mut row = cb.row_mut(i);
        row.assign(&src);
        if i >= order.len() {
            row.mapv_inplace(|v| v + 0.05 * spread * rng.sample::<f64, _>(StandardNormal));
        }
    }
    model.set_codebook(cb)
}

/// Moving-average codebook statistics: per-entry assignment counts and sums
/// of assigned encoder outputs.
fn ema_update(decay: f64, counts: &mut Array1<f64>, sums: &mut Array2<f64>, idx: &[usize], z_hat: ArrayView2<f64>) {
    let mut n = Array1::<f64>::zeros(counts.len());
    let mut m = Array2::<f64>::zeros(sums.raw_dim());
    for (&i, z) in idx.iter().zip(z_hat.rows()) {
        n[i] += 1.0;
        let mut row = m.row_mut(i);
        row += &z;
    }
    *counts = &*counts * decay + &n * (1.0 - decay);
    *sums = &*sums * decay + &m * (1.0 - decay);
}

pub fn train_vqvae(train: &[ScenarioSample], hp: &VqVaeHyperParams, seed: u64) -> Result<VqTrainOutput> {
    hp.validate()?;
    let arch = arch_for(train, hp)?;
    let obs: Vec<&Array3<f64>> = train.iter().map(|s| &s.observation).collect();
    let mut model = VqVaeModel::new(arch, FeatureNorm::fit(&obs), seed)?;
    init_codebook(&mut model, train, &mut crate::rng::seeded(seed, "vqvae-codebook"))?;
    let inputs: Vec<Array2<f64>> = obs.iter().map(|o| model.normalize(o)).collect();
    let labels: Vec<usize> = train.iter().map(|s| s.maneuver.index()).collect();

    let cb_id = model.layers.codebook;
    let mut ema = hp.codebook_ema.map(|d| {
        model.store.set_frozen(cb_id, true);
        let e = model.store.value(cb_id).clone().into_dimensionality::<Ix2>().unwrap();
        (d, Array1::<f64>::ones(e.nrows()), e)
    });
    let mut opt = Adam::new(&model.store, hp.lr);
    opt.clip_norm = hp.grad_clip;
    let mut rng = crate::rng::seeded(seed, "vqvae-batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 6];
        for batch in order.chunks(hp.batch_size) {
            let b = batch.len() as f64;
            let views: Vec<_> = batch.iter().map(|&i| inputs[i].view()).collect();
            let x_val = ndarray::stack(Axis(0), &views).unwrap().into_dyn();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let mut g = Graph::new();
            let x = g.leaf(x_val);
            let z_hat = model.encoder(&mut g, x);
            let idx: Vec<usize> = {
                let zh = g.value(z_hat).view().into_dimensionality::<Ix2>().unwrap();
                let cb = model.store.value(model.layers.codebook).view().into_dimensionality::<Ix2>().unwrap();
                zh.rows().into_iter().map(|r| nearest_row(r, cb).map(|(i, _)| i)).collect::<Result<_>>()?
            };
            let cb = g.param(&model.store, model.layers.codebook);
            let z_q = g.gather(cb, &idx);
            let z_st = g.straight_through(z_hat, z_q);
            let recon = model.decoder(&mut g, z_st);
            let diff = g.sub(recon, x);
            let rec = g.sum_sq(diff);
            let rec = g.scale(rec, 1.0 / b);
            let zh_sg = g.detach(z_hat);
            let d_cb = g.sub(zh_sg, z_q);
            let l_cb = g.sum_sq(d_cb);
            let l_cb = g.scale(l_cb, 1.0 / b);
            let zq_sg = g.detach(z_q);
            let d_cm = g.sub(z_hat, zq_sg);
            let l_cm = g.sum_sq(d_cm);
            let l_cm = g.scale(l_cm, 1.0 / b);
            let zh_id = g.sub(z_hat, zh_sg);
            let z_cls = g.add(z_q, zh_id);
            let logits = model.layers.classifier.forward(&mut g, &model.store, z_cls);
            let ce = g.cross_entropy(logits, &y);
            let vq = g.add(rec, l_cb);
            let vq = g.add(vq, l_cm);
            let ce_w = g.scale(ce, hp.lambda);
            let total = g.add(vq, ce_w);

            let correct = {
                let lg = g.value(logits).view().into_dimensionality::<Ix2>().unwrap();
                lg.rows()
                    .into_iter()
                    .zip(&y)
                    .filter(|(r, &c)| (0..3).fold(0, |bst, i| if r[i] > r[bst] { i } else { bst }) == c)
                    .count()
            };
            let parts = [g.scalar(total), g.scalar(rec), g.scalar(l_cb), g.scalar(l_cm), g.scalar(ce)];
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite vqvae loss {parts:?}"),
                });
            }
            for (s, v) in sums.iter_mut().zip(parts) {
                *s += v * b;
            }
            sums[5] += correct as f64;
            let grads = g.backward(total, &model.store);
            opt.step(&mut model.store, &grads);
            if let Some((decay, counts, sums)) = ema.as_mut() {
                let zh = g.value(z_hat).view().into_dimensionality::<Ix2>().unwrap();
                ema_update(*decay, counts, sums, &idx, zh);
                let n = counts.sum();
                let q = counts.len() as f64;
                let mut cb = sums.clone();
                for (mut row, &c) in cb.rows_mut().into_iter().zip(counts.iter()) {
                    let smoothed = (c + 1e-5) / (n + q * 1e-5) * n;
                    row.mapv_inplace(|v| v / smoothed);
                }
                *model.store.value_mut(cb_id) = cb.into_dyn();
            }
        }
        if !model.store.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: "non-finite vqvae parameters".into(),
            });
        }
        let n = train.len() as f64;
        log.push(VqEpochLoss {
            epoch,
            total: sums[0] / n,
            reconstruction: sums[1] / n,
            codebook: sums[2] / n,
            commitment: sums[3] / n,
            classification: sums[4] / n,
            accuracy: sums[5] / n,
        });
    }
    model.store.set_frozen(cb_id, false);
    Ok(VqTrainOutput { model, log })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub id: u64,
    /// 1-based codebook index.
    pub q: usize,
    pub z_hat: Array1<f64>,
}

pub fn assign_all(model: &VqVaeModel, samples: &[ScenarioSample]) -> Result<Vec<Assignment>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let obs: Vec<&Array3<f64>> = chunk.iter().map(|s| &s.observation).collect();
        let z = model.encode_batch(&obs)?;
        for (s, row) in chunk.iter().zip(z.rows()) {
            let r = model.quantize(row)?;
            out.push(Assignment {
                id: s.id,
                q: r.index,
                z_hat: r.z_hat,
            });
        }
    }
    Ok(out)
}

/// Fraction of samples whose assigned entry is classified as their label.
pub fn classifier_accuracy(model: &VqVaeModel, samples: &[ScenarioSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("accuracy of an empty sample set".into()));
    }
    let cb = model.codebook();
    let mut hits = 0;
    for (a, s) in assign_all(model, samples)?.iter().zip(samples) {
        if model.predicted_class(cb.entry(a.q).unwrap())? == s.maneuver {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}
