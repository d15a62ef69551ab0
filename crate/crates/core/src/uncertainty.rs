//! Per-entry Gaussians in latent space, Mahalanobis scoring and the
//! uncertainty-adaptive guidance scale.
//!
//! Each used codebook entry `q` gets `mu = z_q` and the mean outer product of
//! the residuals `z_hat - z_q` of its members, regularized by `eps * I`.
//! Small clusters (`h_q < 3 R_q`) keep only the diagonal.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, Ix1, Ix2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{self, BlobReader};
use crate::error::{Error, Result};
use crate::vqvae::{Assignment, Codebook};

pub const UQ_FORMAT: &str = "cvmd-uq/1";
const MANIFEST_FILE: &str = "uq.json";
const DATA_FILE: &str = "uq.bin";
pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub w_min: f64,
    pub w_max: f64,
    pub t_c: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w_min: 1.0,
            w_max: 7.0,
            t_c: 10.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_min.is_finite() && self.w_max.is_finite() && self.w_max >= self.w_min) {
            return Err(Error::Config(format!("guidance needs finite w_max >= w_min, got [{}, {}]", self.w_min, self.w_max)));
        }
        if !(self.t_c > 0.0 && self.t_c.is_finite()) {
            return Err(Error::Config(format!("t_c must be positive, got {}", self.t_c)));
        }
        Ok(())
    }
}

pub fn adaptive_guidance(delta: f64, cfg: &GuidanceConfig) -> f64 {
    let d = if delta.is_nan() { cfg.t_c } else { delta.clamp(0.0, cfg.t_c) };
    cfg.w_min + (1.0 - d / cfg.t_c) * (cfg.w_max - cfg.w_min)
}

pub fn outlier_flag(delta: f64, t_c: f64) -> bool {
    delta > t_c || delta.is_nan()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// Diagonal when `h_q < 3 R_q`, full otherwise.
    #[default]
    Auto,
    Full,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Full {
        cov: Array2<f64>,
        /// Lower Cholesky factor of `cov`.
        chol: DMatrix<f64>,
    },
    Diagonal(Array1<f64>),
}

impl Covariance {
    pub fn full(cov: Array2<f64>) -> Result<Self> {
        let n = cov.nrows();
        let m = DMatrix::from_fn(n, n, |i, j| cov[[i, j]]);
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Internal("cluster covariance is not positive definite".into()))?
            .l();
        Ok(Covariance::Full { cov, chol })
    }

    pub fn dense(&self) -> Array2<f64> {
        match self {
            Covariance::Full { cov, .. } => cov.clone(),
            Covariance::Diagonal(d) => Array2::from_diag(d),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Covariance::Diagonal(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    /// 1-based codebook index.
    pub q: usize,
    pub mu: Array1<f64>,
    pub cov: Covariance,
    pub count: usize,
    pub eps: f64,
}

impl ClusterStats {
    pub fn new(q: usize, mu: Array1<f64>, cov: Covariance, count: usize, eps: f64) -> Result<Self> {
        let n = mu.len();
        let ok = match &cov {
            Covariance::Full { cov, .. } => cov.shape() == [n, n],
            Covariance::Diagonal(d) => d.len() == n && d.iter().all(|v| *v > 0.0),
        };
        if !ok {
            return Err(Error::Internal(format!("cluster {q}: covariance does not match dimension {n}")));
        }
        Ok(Self { q, mu, cov, count, eps })
    }

    pub fn mahalanobis(&self, z_hat: ArrayView1<f64>) -> Result<f64> {
        mahalanobis(self, z_hat)
    }
}

pub fn mahalanobis(stats: &ClusterStats, z_hat: ArrayView1<f64>) -> Result<f64> {
    let n = stats.mu.len();
    if z_hat.len() != n {
        return Err(Error::shape("latent vector", &[n], &[z_hat.len()]));
    }
    let d = DVector::from_iterator(n, stats.mu.iter().zip(z_hat.iter()).map(|(m, z)| m - z));
    match &stats.cov {
        Covariance::Full { chol, .. } => {
            let y = chol
                .solve_lower_triangular(&d)
                .ok_or_else(|| Error::Internal(format!("cluster {}: singular Cholesky factor", stats.q)))?;
            Ok(y.norm())
        }
        Covariance::Diagonal(var) => Ok(d.iter().zip(var.iter()).map(|(x, v)| x * x / v).sum::<f64>().sqrt()),
    }
}

pub fn fit_cluster_stats(
    assignments: &[Assignment],
    codebook: &Codebook,
    eps: f64,
    mode: CovarianceMode,
) -> Result<BTreeMap<usize, ClusterStats>> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!("covariance regularization must be positive, got {eps}")));
    }
    let r = codebook.dim();
    let mut members: BTreeMap<usize, Vec<&Array1<f64>>> = BTreeMap::new();
    for a in assignments {
        if codebook.entry(a.q).is_none() {
            return Err(Error::Input(format!("assignment to entry {} outside 1..={}", a.q, codebook.size())));
        }
        if a.z_hat.len() != r {
            return Err(Error::shape("latent vector", &[r], &[a.z_hat.len()]));
        }
        members.entry(a.q).or_default().push(&a.z_hat);
    }
    let mut out = BTreeMap::new();
    for (q, zs) in members {
        let mu = codebook.entry(q).unwrap().to_owned();
        let h = zs.len();
        let diagonal = match mode {
            CovarianceMode::Auto => h < 3 * r,
            CovarianceMode::Full => false,
            CovarianceMode::Diagonal => true,
        };
        let cov = if diagonal {
            let mut var = Array1::<f64>::zeros(r);
            for z in &zs {
                for i in 0..r {
                    let e = z[i] - mu[i];
                    var[i] += e * e;
                }
            }
            Covariance::Diagonal(var.mapv(|v| v / h as f64 + eps))
        } else {
            let mut s = Array2::<f64>::zeros((r, r));
            for z in &zs {
                let e = *z - &mu;
                for i in 0..r {
                    for j in 0..=i {
                        s[[i, j]] += e[i] * e[j];
                    }
                }
            }
            for i in 0..r {
                for j in 0..=i {
                    let v = s[[i, j]] / h as f64;
                    s[[i, j]] = v;
                    s[[j, i]] = v;
                }
                s[[i, i]] += eps;
            }
            Covariance::full(s)?
        };
        out.insert(q, ClusterStats::new(q, mu, cov, h, eps)?);
    }
    Ok(out)
}

/// Fitted statistics bound to the codebook they were computed against.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyModel {
    pub clusters: BTreeMap<usize, ClusterStats>,
    pub codebook_sha256: String,
    pub latent_dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub delta: f64,
    pub outlier: bool,
    pub w: f64,
}

impl UncertaintyModel {
    pub fn fit(assignments: &[Assignment], codebook: &Codebook, eps: f64, mode: CovarianceMode) -> Result<Self> {
        Ok(Self {
            clusters: fit_cluster_stats(assignments, codebook, eps, mode)?,
            codebook_sha256: codebook.sha256(),
            latent_dim: codebook.dim(),
            eps,
        })
    }

    /// Distance of `z_hat` from cluster `q`; `+inf` when the entry was never
    /// used during fitting.
    pub fn delta(&self, q: usize, z_hat: ArrayView1<f64>) -> Result<f64> {
        match self.clusters.get(&q) {
            Some(c) => mahalanobis(c, z_hat),
            None if z_hat.len() == self.latent_dim => Ok(f64::INFINITY),
            None => Err(Error::shape("latent vector", &[self.latent_dim], &[z_hat.len()])),
        }
    }

    pub fn score(&self, q: usize, z_hat: ArrayView1<f64>, cfg: &GuidanceConfig) -> Result<Score> {
        let delta = self.delta(q, z_hat)?;
        Ok(Score {
            delta,
            outlier: outlier_flag(delta, cfg.t_c),
            w: adaptive_guidance(delta, cfg),
        })
    }

    pub fn check_codebook(&self, codebook: &Codebook) -> Result<()> {
        if codebook.sha256() != self.codebook_sha256 {
            return Err(Error::Config("uncertainty statistics were fitted against a different codebook".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<UqManifest> {
        let mut bytes = Vec::new();
        let mut records = Vec::new();
        for c in self.clusters.values() {
            blob::encode_ndarray(&c.mu.clone().into_dyn(), &mut bytes);
            let cov = match &c.cov {
                Covariance::Full { cov, .. } => cov.clone().into_dyn(),
                Covariance::Diagonal(d) => d.clone().into_dyn(),
            };
            blob::encode_ndarray(&cov, &mut bytes);
            records.push(UqClusterRecord {
                q: c.q,
                count: c.count,
                diagonal: c.cov.is_diagonal(),
            });
        }
        let m = UqManifest {
            format: UQ_FORMAT.to_string(),
            codebook_sha256: self.codebook_sha256.clone(),
            latent_dim: self.latent_dim,
            eps: self.eps,
            clusters: records,
            data_sha256: hex::encode(Sha256::digest(&bytes)),
        };
        blob::write_file(&dir.join(DATA_FILE), &bytes)?;
        blob::write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)?.as_bytes())?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m = UqManifest::parse(&text)?;
        let bytes = blob::read_file(&dir.join(DATA_FILE))?;
        if hex::encode(Sha256::digest(&bytes)) != m.data_sha256 {
            return Err(Error::Decode(format!("{}: checksum mismatch", dir.join(DATA_FILE).display())));
        }
        Self::from_parts(&m, &bytes)
    }

    pub fn from_parts(m: &UqManifest, bytes: &[u8]) -> Result<Self> {
        let mut rd = BlobReader::new(bytes);
        let mut clusters = BTreeMap::new();
        let r = m.latent_dim;
        for rec in &m.clusters {
            let mu = rd
                .next_ndarray()?
                .into_dimensionality::<Ix1>()
                .map_err(|e| Error::Decode(format!("cluster {}: {e}", rec.q)))?;
            if mu.len() != r || mu.iter().any(|v| !v.is_finite()) {
                return Err(Error::Decode(format!("cluster {}: bad mean", rec.q)));
            }
            let raw = rd.next_ndarray()?;
            let cov = if rec.diagonal {
                let d = raw.into_dimensionality::<Ix1>().map_err(|e| Error::Decode(format!("cluster {}: {e}", rec.q)))?;
                if d.len() != r || d.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::Decode(format!("cluster {}: bad variances", rec.q)));
                }
                Covariance::Diagonal(d)
            } else {
                let c = raw.into_dimensionality::<Ix2>().map_err(|e| Error::Decode(format!("cluster {}: {e}", rec.q)))?;
                if c.shape() != [r, r] || c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Decode(format!("cluster {}: bad covariance", rec.q)));
                }
                Covariance::full(c).map_err(|e| Error::Decode(format!("cluster {}: {e}", rec.q)))?
            };
            clusters.insert(rec.q, ClusterStats::new(rec.q, mu, cov, rec.count, m.eps).map_err(|e| Error::Decode(e.to_string()))?);
        }
        if !rd.is_empty() {
            return Err(Error::Decode("trailing bytes after cluster statistics".into()));
        }
        Ok(Self {
            clusters,
            codebook_sha256: m.codebook_sha256.clone(),
            latent_dim: r,
            eps: m.eps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqClusterRecord {
    pub q: usize,
    pub count: usize,
    pub diagonal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqManifest {
    pub format: String,
    pub codebook_sha256: String,
    pub latent_dim: usize,
    pub eps: f64,
    pub clusters: Vec<UqClusterRecord>,
    pub data_sha256: String,
}

impl UqManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.format != UQ_FORMAT {
            return Err(Error::Decode(format!("unsupported statistics format `{}`", m.format)));
        }
        if m.latent_dim == 0 || m.latent_dim > 4096 || !(m.eps > 0.0 && m.eps.is_finite()) {
            return Err(Error::Decode("invalid latent dimension or regularization".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if m.clusters.iter().any(|c| c.q == 0 || c.count == 0 || !seen.insert(c.q)) {
            return Err(Error::Decode("cluster records must have distinct 1-based indices and members".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    fn asg(q: usize, z: &[f64]) -> Assignment {
        Assignment {
            id: 0,
            q,
            z_hat: arr1(z),
        }
    }

    fn stats(mu: &[f64], cov: Array2<f64>) -> ClusterStats {
        ClusterStats::new(1, arr1(mu), Covariance::full(cov).unwrap(), 1, 0.0).unwrap()
    }

    #[test]
    fn fit_example_both_modes() {
        let cb = Codebook::new(arr2(&[[1.0, 0.0], [5.0, 5.0]])).unwrap();
        let a = [asg(1, &[0.0, 0.0]), asg(1, &[2.0, 0.0])];
        let eps = 1e-6;
        for mode in [CovarianceMode::Auto, CovarianceMode::Full, CovarianceMode::Diagonal] {
            let m = fit_cluster_stats(&a, &cb, eps, mode).unwrap();
            assert_eq!(m.keys().copied().collect::<Vec<_>>(), vec![1]);
            let c = &m[&1];
            assert_eq!(c.mu, arr1(&[1.0, 0.0]));
            assert_eq!(c.count, 2);
            assert_eq!(c.cov.dense(), arr2(&[[1.0 + eps, 0.0], [0.0, eps]]));
            assert_eq!(c.cov.is_diagonal(), mode != CovarianceMode::Full);
        }
    }

    #[test]
    fn single_sample_at_center_gives_eps_identity() {
        let cb = Codebook::new(arr2(&[[1.0, 2.0, 3.0]])).unwrap();
        let m = fit_cluster_stats(&[asg(1, &[1.0, 2.0, 3.0])], &cb, 1e-3, CovarianceMode::Full).unwrap();
        assert_eq!(m[&1].cov.dense(), Array2::<f64>::eye(3) * 1e-3);
    }

    #[test]
    fn fit_rejects_bad_eps() {
        let cb = Codebook::new(arr2(&[[1.0]])).unwrap();
        assert!(matches!(fit_cluster_stats(&[], &cb, 0.0, CovarianceMode::Auto), Err(Error::Config(_))));
    }

    #[test]
    fn mahalanobis_examples() {
        let s = stats(&[0.0, 0.0], Array2::eye(2));
        assert_eq!(mahalanobis(&s, arr1(&[0.0, 0.0]).view()).unwrap(), 0.0);
        assert_abs_diff_eq!(mahalanobis(&s, arr1(&[3.0, 4.0]).view()).unwrap(), 5.0, epsilon = 1e-12);
        let s = stats(&[0.0, 0.0], arr2(&[[4.0, 0.0], [0.0, 1.0]]));
        assert_abs_diff_eq!(mahalanobis(&s, arr1(&[2.0, 1.0]).view()).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        let d = ClusterStats::new(1, arr1(&[0.0, 0.0]), Covariance::Diagonal(arr1(&[4.0, 1.0])), 1, 0.0).unwrap();
        assert_abs_diff_eq!(mahalanobis(&d, arr1(&[2.0, 1.0]).view()).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        assert!(mahalanobis(&s, arr1(&[1.0]).view()).is_err());
    }

    #[test]
    fn non_spd_is_internal_error() {
        assert!(matches!(Covariance::full(arr2(&[[1.0, 2.0], [2.0, 1.0]])), Err(Error::Internal(_))));
    }

    #[test]
    fn guidance_examples() {
        let cfg = GuidanceConfig::default();
        assert_eq!(adaptive_guidance(0.0, &cfg), 7.0);
        assert_eq!(adaptive_guidance(5.0, &cfg), 4.0);
        assert_eq!(adaptive_guidance(10.0, &cfg), 1.0);
        assert_eq!(adaptive_guidance(1e9, &cfg), 1.0);
        assert_eq!(adaptive_guidance(f64::INFINITY, &cfg), 1.0);
        assert!(!outlier_flag(0.0, 10.0));
        assert!(!outlier_flag(10.0, 10.0));
        assert!(outlier_flag(10.5, 10.0));
        assert!(outlier_flag(f64::INFINITY, 10.0));
    }

    #[test]
    fn unused_entry_is_maximally_uncertain() {
        let cb = Codebook::new(arr2(&[[0.0, 0.0], [9.0, 9.0]])).unwrap();
        let m = UncertaintyModel::fit(&[asg(1, &[0.1, 0.0])], &cb, 1e-6, CovarianceMode::Auto).unwrap();
        let s = m.score(2, arr1(&[9.0, 9.0]).view(), &GuidanceConfig::default()).unwrap();
        assert!(s.delta.is_infinite() && s.outlier && s.w == 1.0);
    }

    #[test]
    fn persistence_round_trip() {
        let cb = Codebook::new(arr2(&[[0.0, 0.0], [9.0, 9.0], [3.0, 1.0]])).unwrap();
        let a: Vec<_> = (0..10).map(|i| asg(1 + i % 2, &[i as f64 * 0.1, -(i as f64) * 0.3])).collect();
        let m = UncertaintyModel::fit(&a, &cb, 1e-6, CovarianceMode::Full).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = UncertaintyModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        back.check_codebook(&cb).unwrap();
        let other = Codebook::new(arr2(&[[0.0, 0.0]])).unwrap();
        assert!(back.check_codebook(&other).is_err());
    }

    fn spd(n: usize, seed: &[f64]) -> Array2<f64> {
        let a = Array2::from_shape_fn((n, n), |(i, j)| seed[(i * n + j) % seed.len()]);
        a.t().dot(&a) + Array2::<f64>::eye(n) * 0.1
    }

    /// Orthogonal matrix from Gram-Schmidt on a seeded basis.
    fn orthogonal(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |i, j| seed[(i * 7 + j * 3) % seed.len()] + if i == j { 2.0 } else { 0.0 });
        m.qr().q()
    }

    proptest! {
        #[test]
        fn matches_explicit_inverse(n in 1usize..6, vals in proptest::collection::vec(-2f64..2.0, 36), z in proptest::collection::vec(-3f64..3.0, 6)) {
            let cov = spd(n, &vals);
            let mu = Array1::from_iter(vals.iter().take(n).map(|v| v * 0.5));
            let zh = Array1::from_iter(z.iter().take(n).copied());
            let s = stats(mu.as_slice().unwrap(), cov.clone());
            let got = mahalanobis(&s, zh.view()).unwrap();
            let inv = DMatrix::from_fn(n, n, |i, j| cov[[i, j]]).try_inverse().unwrap();
            let d = DVector::from_iterator(n, mu.iter().zip(zh.iter()).map(|(a, b)| a - b));
            let want = (d.transpose() * inv * &d)[(0, 0)].sqrt();
            prop_assert!((got - want).abs() <= 1e-6 * want.max(1e-12));
            prop_assert_eq!(mahalanobis(&s, mu.view()).unwrap(), 0.0);
        }

        #[test]
        fn rotation_invariant(vals in proptest::collection::vec(-2f64..2.0, 16), z in proptest::collection::vec(-3f64..3.0, 4)) {
            let n = 4;
            let cov = spd(n, &vals);
            let mu = Array1::from_iter(vals.iter().take(n).copied());
            let zh = Array1::from(z);
            let base = mahalanobis(&stats(mu.as_slice().unwrap(), cov.clone()), zh.view()).unwrap();
            let r = orthogonal(n, &vals);
            let to_nd = |m: &DMatrix<f64>| Array2::from_shape_fn((n, n), |(i, j)| m[(i, j)]);
            let rn = to_nd(&r);
            let cov_r = rn.dot(&cov).dot(&rn.t());
            let cov_r = (&cov_r + &cov_r.t()) * 0.5;
            let mu_r = rn.dot(&mu);
            let z_r = rn.dot(&zh);
            let rot = mahalanobis(&stats(mu_r.as_slice().unwrap(), cov_r), z_r.view()).unwrap();
            prop_assert!((rot - base).abs() <= 1e-8 * (1.0 + base));
        }

        #[test]
        fn fitted_covariance_is_symmetric_and_bounded_below(
            pts in proptest::collection::vec(proptest::collection::vec(-5f64..5.0, 3), 1..40),
        ) {
            let cb = Codebook::new(arr2(&[[0.5, -0.5, 1.0]])).unwrap();
            let a: Vec<_> = pts.iter().map(|p| asg(1, p)).collect();
            let eps = 1e-6;
            let m = fit_cluster_stats(&a, &cb, eps, CovarianceMode::Full).unwrap();
            let c = m[&1].cov.dense();
            let dm = DMatrix::from_fn(3, 3, |i, j| c[[i, j]]);
            prop_assert!((&dm - dm.transpose()).amax() <= 1e-12);
            let min_eig = dm.symmetric_eigen().eigenvalues.min();
            prop_assert!(min_eig >= eps - 1e-12);
        }

        #[test]
        fn guidance_is_clamped_and_monotone(a in 0f64..50.0, b in 0f64..50.0) {
            let cfg = GuidanceConfig::default();
            let (wa, wb) = (adaptive_guidance(a, &cfg), adaptive_guidance(b, &cfg));
            prop_assert!((1.0..=7.0).contains(&wa));
            if a <= b { prop_assert!(wa >= wb); }
        }
    }
}
