use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Ix3};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::schedule::{build_schedule, denoise_with, guided_noise, noise_with, NoiseSchedule};
use super::unet::{UNet, UNetArch};
use crate::blob;
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamSpec, ParamStore};
use crate::vmm::{clamp_params, MotionParamSeq, PhysicalLimits};

pub const DIFFUSION_FORMAT: &str = "cvmd-diffusion/1";
const MANIFEST_FILE: &str = "diffusion.json";
const PARAMS_FILE: &str = "diffusion.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    #[default]
    Epsilon,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionHyperParams {
    pub steps: usize,
    pub s: f64,
    pub p_uncond: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub channels: usize,
    pub emb_dim: usize,
    pub prediction: PredictionTarget,
    pub grad_clip: Option<f64>,
}

impl Default for DiffusionHyperParams {
    fn default() -> Self {
        Self {
            steps: 100,
            s: 0.008,
            p_uncond: 0.1,
            batch_size: 64,
            lr: 1e-4,
            epochs: 50,
            channels: 32,
            emb_dim: 64,
            prediction: PredictionTarget::Epsilon,
            grad_clip: None,
        }
    }
}

impl DiffusionHyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("diffusion: {m}")));
        if self.steps == 0 || self.batch_size == 0 || self.channels == 0 || self.emb_dim < 2 {
            return bad("steps, batch_size, channels must be positive and emb_dim at least 2");
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return bad("s must be positive");
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return bad("p_uncond must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }
}

/// Per-channel standardization of motion parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Normalized `[min, max]` of each channel over the fitted data.
    #[serde(default)]
    pub range: Option<[[f64; 2]; 2]>,
}

impl ChannelNorm {
    pub fn fit(data: &[MotionParamSeq]) -> Self {
        let stat = |get: &dyn Fn(&MotionParamSeq) -> &[f64]| {
            let n = data.iter().map(|d| get(d).len()).sum::<usize>().max(1) as f64;
            let m = data.iter().flat_map(|d| get(d).iter()).sum::<f64>() / n;
            let v = data.iter().flat_map(|d| get(d).iter()).map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            (m, if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 })
        };
        let (m0, s0) = stat(&|d| &d.yaw_rate);
        let (m1, s1) = stat(&|d| &d.accel);
        let span = |get: &dyn Fn(&MotionParamSeq) -> &[f64], m: f64, sd: f64| {
            let it = || data.iter().flat_map(|d| get(d).iter()).map(|v| (v - m) / sd);
            [it().fold(f64::INFINITY, f64::min), it().fold(f64::NEG_INFINITY, f64::max)]
        };
        let range = (!data.is_empty()).then(|| [span(&|d| &d.yaw_rate, m0, s0), span(&|d| &d.accel, m1, s1)]);
        Self {
            mean: [m0, m1],
            std: [s0, s1],
            range,
        }
    }

    fn normalize(&self, p: &MotionParamSeq) -> Array2<f64> {
        let mut a = p.to_array();
        for c in 0..2 {
            a.row_mut(c).mapv_inplace(|v| (v - self.mean[c]) / self.std[c]);
        }
        a
    }

    fn denormalize(&self, a: ArrayView2<f64>) -> MotionParamSeq {
        let len = a.ncols();
        let mut out = a.to_owned();
        for c in 0..2 {
            out.row_mut(c).mapv_inplace(|v| v * self.std[c] + self.mean[c]);
        }
        MotionParamSeq::from_channels(out.as_slice().unwrap(), len)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: UNet,
    pub norm: ChannelNorm,
    pub hyper: DiffusionHyperParams,
    store: ParamStore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRequest {
    /// 1-based codebook index.
    pub condition: usize,
    pub w: f64,
    pub num_samples: usize,
    pub seed: u64,
}

/// Corrections applied to each guided clean-sample estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceAdjust {
    /// Blend factor pulling the guided estimate's spread back to the
    /// conditional one.
    pub rescale: f64,
    /// Clamps the estimate to the training data range.
    pub clip: bool,
}

impl GuidanceAdjust {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rescale) {
            return Err(Error::Config(format!("guidance rescale must lie in [0, 1], got {}", self.rescale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffEpochLoss {
    pub epoch: usize,
    pub loss: f64,
}

pub struct DiffusionTrainOutput {
    pub model: Denoiser,
    pub log: Vec<DiffEpochLoss>,
}

impl Denoiser {
    pub fn new(arch: UNetArch, norm: ChannelNorm, hyper: DiffusionHyperParams, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = UNet::new(arch, &mut store, &mut crate::rng::seeded(seed, "diffusion-init"))?;
        Ok(Self { net, norm, hyper, store })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn seq_len(&self) -> usize {
        self.net.arch.seq_len
    }

    /// Number of codebook conditions, excluding the unconditional token.
    pub fn codebook_size(&self) -> usize {
        self.net.arch.n_conditions - 1
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.hyper.steps, self.hyper.s)
    }

    /// Raw network output for a normalized batch `[B, 2, L]`.
    pub fn predict(&self, x: Array3<f64>, steps: &[usize], conds: &[usize]) -> Array3<f64> {
        let mut g = Graph::inference();
        let xv = g.leaf(x.into_dyn());
        let y = self.net.forward(&mut g, &self.store, xv, steps, conds);
        g.value(y).clone().into_dimensionality::<Ix3>().unwrap()
    }

    /// Mean squared noise-prediction error on a fixed evaluation draw.
    pub fn eval_loss(&self, data: &[(MotionParamSeq, usize)], seed: u64) -> Result<f64> {
        let sched = self.schedule()?;
        let mut rng = crate::rng::seeded(seed, "diffusion-eval");
        let xs: Vec<Array2<f64>> = data.iter().map(|(p, _)| self.norm.normalize(p)).collect();
        let idx: Vec<usize> = (0..data.len()).collect();
        let conds: Vec<usize> = data.iter().map(|d| d.1).collect();
        let (x, target, steps, c) = noised_batch(&xs, &idx, &conds, &sched, 0.0, self.hyper.prediction, &mut rng);
        let pred = self.predict(x, &steps, &c);
        Ok((&pred - &target).mapv(|v| v * v).mean().unwrap_or(f64::NAN))
    }

    pub fn save(&self, dir: &Path, seed: u64, epochs_trained: usize) -> Result<DiffusionManifest> {
        let bytes = self.store.to_blob();
        let m = DiffusionManifest {
            format: DIFFUSION_FORMAT.to_string(),
            arch: self.net.arch.clone(),
            hyper: self.hyper.clone(),
            norm: self.norm.clone(),
            seed,
            epochs_trained,
            params: self.store.specs(),
            params_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        blob::write_file(&dir.join(PARAMS_FILE), &bytes)?;
        blob::write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<(Self, DiffusionManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = DiffusionManifest::parse(&text)?;
        let bytes = blob::read_file(&dir.join(PARAMS_FILE))?;
        if hex::encode(Sha256::digest(&bytes)) != m.params_sha256 {
            return Err(Error::Decode(format!("{}: checksum mismatch", dir.join(PARAMS_FILE).display())));
        }
        let mut model = Self::new(m.arch.clone(), m.norm.clone(), m.hyper.clone(), m.seed)?;
        model.store.load_blob(&m.params, &bytes)?;
        if !model.store.is_finite() {
            return Err(Error::Decode("checkpoint contains non-finite parameters".into()));
        }
        Ok((model, m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionManifest {
    pub format: String,
    pub arch: UNetArch,
    pub hyper: DiffusionHyperParams,
    pub norm: ChannelNorm,
    pub seed: u64,
    pub epochs_trained: usize,
    pub params: Vec<ParamSpec>,
    pub params_sha256: String,
}

impl DiffusionManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != DIFFUSION_FORMAT {
            return Err(Error::Decode(format!("unsupported checkpoint format `{}`", m.format)));
        }
        m.arch.validate().map_err(|e| Error::Decode(e.to_string()))?;
        m.hyper.validate().map_err(|e| Error::Decode(e.to_string()))?;
        if m.arch.max_step != m.hyper.steps || m.arch.in_channels != 2 || m.hyper.steps > 100_000 {
            return Err(Error::Decode("denoiser architecture disagrees with its schedule".into()));
        }
        if m.norm.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || m.norm.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Decode("invalid channel normalization".into()));
        }
        Ok(m)
    }
}

type NoisedBatch = (Array3<f64>, Array3<f64>, Vec<usize>, Vec<usize>);

/// Draws steps, noise and condition dropout for the selected rows; returns
/// the noised input, the regression target, the steps and the conditions.
fn noised_batch(
    xs: &[Array2<f64>],
    idx: &[usize],
    conds: &[usize],
    sched: &NoiseSchedule,
    p_uncond: f64,
    target: PredictionTarget,
    rng: &mut crate::rng::Rng,
) -> NoisedBatch {
    let (c, l) = xs[0].dim();
    let mut x = Array3::zeros((idx.len(), c, l));
    let mut y = Array3::zeros((idx.len(), c, l));
    let mut steps = Vec::with_capacity(idx.len());
    let mut cs = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        let t = rng.random_range(1..=sched.steps);
        let eps = Array2::from_shape_fn((c, l), |_| rng.sample::<f64, _>(StandardNormal));
        let drop = p_uncond > 0.0 && rng.random_bool(p_uncond);
        x.slice_mut(s![r, .., ..]).assign(&noise_with(xs[i].view(), eps.view(), sched.alpha_bar[t]));
        match target {
            PredictionTarget::Epsilon => y.slice_mut(s![r, .., ..]).assign(&eps),
            PredictionTarget::Sample => y.slice_mut(s![r, .., ..]).assign(&xs[i]),
        }
        steps.push(t);
        cs.push(if drop { 0 } else { conds[i] });
    }
    (x, y, steps, cs)
}

/// Trains the conditional noise estimator on `(X0, q)` pairs, `q` in
/// `1..=codebook_size`.
pub fn train_diffusion(
    data: &[(MotionParamSeq, usize)],
    codebook_size: usize,
    hp: &DiffusionHyperParams,
    seed: u64,
) -> Result<DiffusionTrainOutput> {
    hp.validate()?;
    let first = data.first().ok_or_else(|| Error::Input("diffusion: training set is empty".into()))?;
    let len = first.0.len();
    if len == 0 {
        return Err(Error::Input("diffusion: empty motion sequences".into()));
    }
    for (p, q) in data {
        if p.len() != len || p.accel.len() != len {
            return Err(Error::shape("motion parameters", &[2, len], &[2, p.len()]));
        }
        if !(1..=codebook_size).contains(q) {
            return Err(Error::Input(format!("condition {q} outside 1..={codebook_size}")));
        }
        if p.yaw_rate.iter().chain(&p.accel).any(|v| !v.is_finite()) {
            return Err(Error::Input("diffusion: non-finite motion parameters".into()));
        }
    }
    let sched = build_schedule(hp.steps, hp.s)?;
    let params: Vec<MotionParamSeq> = data.iter().map(|d| d.0.clone()).collect();
    let norm = ChannelNorm::fit(&params);
    let arch = UNetArch {
        seq_len: len,
        in_channels: 2,
        channels: hp.channels,
        emb_dim: hp.emb_dim,
        n_conditions: codebook_size + 1,
        max_step: hp.steps,
    };
    let mut model = Denoiser::new(arch, norm, hp.clone(), seed)?;
    let xs: Vec<Array2<f64>> = params.iter().map(|p| model.norm.normalize(p)).collect();
    let conds: Vec<usize> = data.iter().map(|d| d.1).collect();

    let mut opt = Adam::new(&model.store, hp.lr);
    opt.clip_norm = hp.grad_clip;
    let mut rng = crate::rng::seeded(seed, "diffusion-train");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(hp.epochs);
    for epoch in 1..=hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let (x, target, steps, c) = noised_batch(&xs, batch, &conds, &sched, hp.p_uncond, hp.prediction, &mut rng);
            let mut g = Graph::new();
            let xv = g.leaf(x.into_dyn());
            let pred = model.net.forward(&mut g, &model.store, xv, &steps, &c);
            let tv = g.leaf(target.into_dyn());
            let d = g.sub(pred, tv);
            let sq = g.mul(d, d);
            let loss = g.mean(sq);
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: format!("non-finite diffusion loss {lv}"),
                });
            }
            sum += lv * batch.len() as f64;
            let grads = g.backward(loss, &model.store);
            opt.step(&mut model.store, &grads);
        }
        if !model.store.is_finite() {
            return Err(Error::Training {
                epoch,
                detail: "non-finite diffusion parameters".into(),
            });
        }
        log.push(DiffEpochLoss {
            epoch,
            loss: sum / data.len() as f64,
        });
    }
    Ok(DiffusionTrainOutput { model, log })
}

fn population_std(a: &Array2<f64>) -> f64 {
    let m = a.mean().unwrap_or(0.0);
    (a.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0)).sqrt()
}

/// Applies spread rescaling and range clipping to the clean-sample estimate
/// implied by a guided noise prediction.
fn adjust_guided(
    xi: ArrayView2<f64>,
    ec: ArrayView2<f64>,
    eps_hat: Array2<f64>,
    ab: f64,
    norm: &ChannelNorm,
    adjust: &GuidanceAdjust,
) -> Array2<f64> {
    let clip = adjust.clip && norm.range.is_some();
    if ab <= 0.0 || !(clip || adjust.rescale > 0.0) {
        return eps_hat;
    }
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let to_x0 = |e: ArrayView2<f64>| (&xi - &(&e * sb)) / sa;
    let mut x0 = to_x0(eps_hat.view());
    let phi = adjust.rescale;
    if phi > 0.0 {
        let sg = population_std(&x0);
        if sg > 0.0 {
            let sc = population_std(&to_x0(ec));
            x0 *= phi * sc / sg + 1.0 - phi;
        }
    }
    if let (true, Some(r)) = (clip, norm.range) {
        for (c, [lo, hi]) in r.into_iter().enumerate() {
            x0.row_mut(c).mapv_inplace(|v| v.clamp(lo, hi));
        }
    }
    if ab < 1.0 {
        (&xi - &(&x0 * sa)) / sb
    } else {
        Array2::zeros(x0.raw_dim())
    }
}

/// Runs the guided reverse chain for every request in one batch. Sample `k`
/// of a request draws from its own stream keyed by `(seed, k)`, so results
/// do not depend on how requests are grouped.
pub fn sample_many(
    model: &Denoiser,
    sched: &NoiseSchedule,
    reqs: &[GuidanceRequest],
    limits: &PhysicalLimits,
    adjust: &GuidanceAdjust,
) -> Result<Vec<Vec<MotionParamSeq>>> {
    adjust.validate()?;
    if sched.steps != model.hyper.steps || sched.s != model.hyper.s {
        return Err(Error::Config(format!(
            "schedule (T={}, s={}) differs from the one the denoiser was trained with (T={}, s={})",
            sched.steps, sched.s, model.hyper.steps, model.hyper.s
        )));
    }
    let q_max = model.codebook_size();
    for r in reqs {
        if r.num_samples == 0 {
            return Err(Error::Input("num_samples must be at least 1".into()));
        }
        if !(1..=q_max).contains(&r.condition) {
            return Err(Error::Input(format!("condition {} outside 1..={q_max}", r.condition)));
        }
        if !r.w.is_finite() {
            return Err(Error::Input("guidance scale must be finite".into()));
        }
    }
    let l = model.seq_len();
    let mut rngs = Vec::new();
    let mut owner = Vec::new();
    for (ri, r) in reqs.iter().enumerate() {
        for k in 0..r.num_samples {
            rngs.push(crate::rng::seeded_item(r.seed, "diffusion-sample", k as u64));
            owner.push(ri);
        }
    }
    let m = rngs.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut x = Array3::zeros((m, 2, l));
    for (i, rng) in rngs.iter_mut().enumerate() {
        x.slice_mut(s![i, .., ..]).mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
    }
    let conds: Vec<usize> = owner.iter().map(|&o| reqs[o].condition).chain(std::iter::repeat_n(0, m)).collect();
    for t in (1..=sched.steps).rev() {
        let both = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let out = model.predict(both, &vec![t; 2 * m], &conds);
        let (ab, a) = (sched.alpha_bar[t], sched.alpha[t]);
        let sigma = if t == 1 { 0.0 } else { sched.sigma2[t].sqrt() };
        let mut next = Array3::zeros((m, 2, l));
        for i in 0..m {
            let xi = x.slice(s![i, .., ..]);
            let to_eps = |o: ArrayView2<f64>| -> Array2<f64> {
                match model.hyper.prediction {
                    PredictionTarget::Epsilon => o.to_owned(),
                    PredictionTarget::Sample if ab < 1.0 => (&xi - &(&o * ab.sqrt())) / (1.0 - ab).sqrt(),
                    PredictionTarget::Sample => Array2::zeros(o.raw_dim()),
                }
            };
            let ec = to_eps(out.slice(s![i, .., ..]));
            let eu = to_eps(out.slice(s![m + i, .., ..]));
            let eps_hat = guided_noise(ec.view(), eu.view(), reqs[owner[i]].w)?;
            let eps_hat = adjust_guided(xi, ec.view(), eps_hat, ab, &model.norm, adjust);
            let noise = if t > 1 {
                Array2::from_shape_fn((2, l), |_| rngs[i].sample::<f64, _>(StandardNormal))
            } else {
                Array2::zeros((2, l))
            };
            next.slice_mut(s![i, .., ..]).assign(&denoise_with(xi, eps_hat.view(), a, ab, sigma, noise.view()));
        }
        x = next;
    }
    let mut out: Vec<Vec<MotionParamSeq>> = reqs.iter().map(|r| Vec::with_capacity(r.num_samples)).collect();
    for (i, &o) in owner.iter().enumerate() {
        let p = model.norm.denormalize(x.slice(s![i, .., ..]));
        out[o].push(clamp_params(&p, limits));
    }
    Ok(out)
}

pub fn sample(
    model: &Denoiser,
    sched: &NoiseSchedule,
    req: &GuidanceRequest,
    limits: &PhysicalLimits,
    adjust: &GuidanceAdjust,
) -> Result<Vec<MotionParamSeq>> {
    Ok(sample_many(model, sched, std::slice::from_ref(req), limits, adjust)?.remove(0))
}
