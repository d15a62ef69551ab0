//! Displacement errors, maneuver entropy, confidence bands and report
//! formatting.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Maneuver;
use crate::vmm::DrivabilityReport;

fn check_pair(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<()> {
    if truth.nrows() != 2 {
        return Err(Error::shape("trajectory", &[2, truth.ncols()], truth.shape()));
    }
    if truth.shape() != pred.shape() {
        return Err(Error::shape("predicted trajectory", truth.shape(), pred.shape()));
    }
    if truth.ncols() == 0 {
        return Err(Error::Input("empty trajectory".into()));
    }
    Ok(())
}

fn point_dist(truth: ArrayView2<f64>, pred: ArrayView2<f64>, k: usize) -> f64 {
    (truth[[0, k]] - pred[[0, k]]).hypot(truth[[1, k]] - pred[[1, k]])
}

/// Mean Euclidean distance over all steps of two `[2, T]` trajectories.
pub fn ade(truth: ArrayView2<f64>, pred: ArrayView2<f64>) -> Result<f64> {
    check_pair(truth, pred)?;
    let t = truth.ncols();
    Ok((0..t).map(|k| point_dist(truth, pred, k)).sum::<f64>() / t as f64)
}

/// Step index of a horizon: `round(horizon * rate) - 1`.
pub fn horizon_index(horizon_s: f64, rate_hz: f64, len: usize) -> Result<usize> {
    let steps = (horizon_s * rate_hz).round();
    if !(steps >= 1.0 && steps <= len as f64) {
        return Err(Error::Input(format!(
            "horizon {horizon_s} s at {rate_hz} Hz does not fall inside a {len}-step trajectory"
        )));
    }
    Ok(steps as usize - 1)
}

/// Euclidean distance at the step reached after `horizon_s` seconds.
pub fn fde(truth: ArrayView2<f64>, pred: ArrayView2<f64>, horizon_s: f64, rate_hz: f64) -> Result<f64> {
    check_pair(truth, pred)?;
    let k = horizon_index(horizon_s, rate_hz, truth.ncols())?;
    Ok(point_dist(truth, pred, k))
}

/// Shannon entropy in bits of a class histogram (counts or proportions).
pub fn shannon_entropy(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
        return Err(Error::Input("entropy counts must be finite and non-negative".into()));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::Input("entropy of an all-zero histogram".into()));
    }
    let h = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.log2()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Mean entropy over rows with at least one member.
pub fn avg_entropy(counts: &[[u64; 3]]) -> Result<f64> {
    let hs: Vec<f64> = counts
        .iter()
        .filter(|r| r.iter().sum::<u64>() > 0)
        .map(|r| shannon_entropy(&r.map(|c| c as f64)))
        .collect::<Result<_>>()?;
    if hs.is_empty() {
        return Err(Error::Input("no used codebook entries".into()));
    }
    Ok(hs.iter().sum::<f64>() / hs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    /// Row `q - 1` holds the `[lcl, kl, lcr]` member counts of entry `q`.
    pub counts: Vec<[u64; 3]>,
    /// `None` for unused entries.
    pub per_condition: Vec<Option<f64>>,
    pub h_avg: f64,
    pub used_entries: usize,
}

/// Entropy of the maneuver mix of every codebook entry, from 1-based
/// assignments.
pub fn entropy_report(assignments: &[(usize, Maneuver)], codebook_size: usize) -> Result<EntropyReport> {
    let mut counts = vec![[0u64; 3]; codebook_size];
    for &(q, m) in assignments {
        if !(1..=codebook_size).contains(&q) {
            return Err(Error::Input(format!("entry {q} outside 1..={codebook_size}")));
        }
        counts[q - 1][m.index()] += 1;
    }
    let per_condition = counts
        .iter()
        .map(|r| {
            if r.iter().sum::<u64>() > 0 {
                shannon_entropy(&r.map(|c| c as f64)).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let used_entries = per_condition.iter().flatten().count();
    Ok(EntropyReport {
        h_avg: avg_entropy(&counts)?,
        counts,
        per_condition,
        used_entries,
    })
}

/// Pointwise mean and population standard deviation over `K` trajectories.
pub fn confidence_band(trajs: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let first = trajs.first().ok_or_else(|| Error::Input("confidence band of zero trajectories".into()))?;
    for t in trajs {
        if t.shape() != first.shape() {
            return Err(Error::shape("trajectory", first.shape(), t.shape()));
        }
    }
    let k = trajs.len() as f64;
    let mut mean = Array2::zeros(first.raw_dim());
    for t in trajs {
        mean += t;
    }
    mean /= k;
    let mut var = Array2::<f64>::zeros(first.raw_dim());
    for t in trajs {
        let d = t - &mean;
        var += &(&d * &d);
    }
    Ok((mean, (var / k).mapv(f64::sqrt)))
}

/// Mean ADE and FDE of the individual draws of a sample set against one
/// truth, i.e. the expected error of a single sampled prediction.
pub fn sample_set_errors(truth: ArrayView2<f64>, trajs: &[Array2<f64>], horizon_s: f64, rate_hz: f64) -> Result<(f64, f64)> {
    if trajs.is_empty() {
        return Err(Error::Input("empty sample set".into()));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for t in trajs {
        a += ade(truth, t.view())?;
        f += fde(truth, t.view(), horizon_s, rate_hz)?;
    }
    let k = trajs.len() as f64;
    Ok((a / k, f / k))
}

/// Mean pairwise ADE between the members of a sample set; 0 for fewer than
/// two members.
pub fn mean_pairwise_distance(trajs: &[Array2<f64>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            sum += ade(trajs[i].view(), trajs[j].view())?;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// `[2, T]` trajectory as separate coordinate lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XY {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl XY {
    pub fn from_array(a: ArrayView2<f64>) -> Self {
        Self {
            x: a.row(0).to_vec(),
            y: a.row(1).to_vec(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        let t = self.x.len();
        let mut a = Array2::zeros((2, t));
        for k in 0..t {
            a[[0, k]] = self.x[k];
            a[[1, k]] = self.y[k];
        }
        a
    }
}

/// `f64` that writes non-finite values as `"inf"`, `"-inf"` or `"nan"`.
pub mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("expected a number, got `{s}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub sample_id: u64,
    /// 1-based codebook index.
    pub condition: usize,
    /// Maneuver the classifier assigns to the condition.
    pub condition_maneuver: Maneuver,
    pub truth_maneuver: Maneuver,
    /// Infinite when the entry has no statistics.
    #[serde(with = "extended_f64")]
    pub delta: f64,
    pub w: f64,
    pub outlier: bool,
    /// Target frame.
    pub trajectories: Vec<XY>,
    /// Re-labeled maneuver of every draw; `None` when a draw leaves the road.
    pub sampled_maneuvers: Vec<Option<Maneuver>>,
    pub mean: XY,
    pub std: XY,
    /// Mean over the draws of each draw's error.
    pub ade: f64,
    pub fde: f64,
    pub drivable: bool,
    pub worst_audit: DrivabilityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub samples: usize,
    pub mean_ade: f64,
    pub mean_fde: f64,
    pub mean_w: f64,
    pub outlier_fraction: f64,
    pub drivable_fraction: f64,
    /// Fraction of draws whose re-labeled maneuver equals the condition's.
    pub condition_agreement: f64,
    pub mean_spread: f64,
}

pub fn summarize(reports: &[PredictionReport]) -> Result<MetricsSummary> {
    if reports.is_empty() {
        return Err(Error::Input("no prediction reports to summarize".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&PredictionReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let draws: usize = reports.iter().map(|r| r.sampled_maneuvers.len()).sum();
    let agree = reports
        .iter()
        .flat_map(|r| r.sampled_maneuvers.iter().map(move |m| *m == Some(r.condition_maneuver)))
        .filter(|&b| b)
        .count();
    let mut spread = 0.0;
    for r in reports {
        let t: Vec<Array2<f64>> = r.trajectories.iter().map(XY::to_array).collect();
        spread += mean_pairwise_distance(&t)?;
    }
    Ok(MetricsSummary {
        samples: reports.len(),
        mean_ade: mean(&|r| r.ade),
        mean_fde: mean(&|r| r.fde),
        mean_w: mean(&|r| r.w),
        outlier_fraction: mean(&|r| r.outlier as u8 as f64),
        drivable_fraction: mean(&|r| r.drivable as u8 as f64),
        condition_agreement: if draws == 0 { 0.0 } else { agree as f64 / draws as f64 },
        mean_spread: spread / n,
    })
}

/// One row per sample.
pub fn metrics_csv(reports: &[PredictionReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["sample_id", "condition", "delta", "w", "outlier", "ade", "fde", "drivable"])?;
    for r in reports {
        w.write_record([
            r.sample_id.to_string(),
            r.condition.to_string(),
            format!("{}", r.delta),
            format!("{}", r.w),
            r.outlier.to_string(),
            format!("{}", r.ade),
            format!("{}", r.fde),
            r.drivable.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// Guidance scale label, a number or `uc`.
    pub w: String,
    pub summary: MetricsSummary,
}

/// Aligned plain-text table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            width[i] = width[i].max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:>w$}", w = width[i]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.w.clone(),
                format!("{:.4}", r.summary.mean_ade),
                format!("{:.4}", r.summary.mean_fde),
                format!("{:.3}", r.summary.mean_w),
                format!("{:.3}", r.summary.condition_agreement),
                format!("{:.4}", r.summary.mean_spread),
                format!("{:.3}", r.summary.drivable_fraction),
            ]
        })
        .collect();
    render_table(&["w", "ADE", "FDE", "mean_w", "agreement", "spread", "drivable"], &body)
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["w", "samples", "mean_ade", "mean_fde", "mean_w", "outlier_fraction", "drivable_fraction", "condition_agreement", "mean_spread"])?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.w.clone(),
            s.samples.to_string(),
            format!("{}", s.mean_ade),
            format!("{}", s.mean_fde),
            format!("{}", s.mean_w),
            format!("{}", s.outlier_fraction),
            format!("{}", s.drivable_fraction),
            format!("{}", s.condition_agreement),
            format!("{}", s.mean_spread),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
}
