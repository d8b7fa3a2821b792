//! Overlap and boundary-distance metrics on binary masks, and their
//! aggregation into per-fold and overall summaries.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::bd::boundary_gt;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::TensorError;

pub const METRIC_NAMES: [&str; 7] = ["dice", "jaccard", "accuracy", "recall", "precision", "hd", "abd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OverlapMetrics {
    pub dice: f64,
    pub jaccard: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
}

fn same_dims(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(TensorError::Dimension {
            op: "metrics",
            lhs: vec![pred.height(), pred.width()],
            rhs: vec![gt.height(), gt.width()],
        }
        .into());
    }
    Ok(())
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    same_dims(pred, gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Ratio with the empty-mask convention: `0/0` is 1 when both masks are
/// empty and 0 otherwise.
fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn overlap_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<OverlapMetrics> {
    let c = confusion(pred, gt)?;
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    Ok(OverlapMetrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        jaccard: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
        accuracy: ratio(c.tp + c.tn, c.total(), both_empty),
        recall: ratio(c.tp, c.tp + c.fn_, both_empty),
        precision: ratio(c.tp, c.tp + c.fp, both_empty),
    })
}

const FAR: i64 = 1 << 40;

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel of `features`, by separable lower envelopes of parabolas.
pub fn squared_distance_transform(features: &BinaryMask) -> Vec<i64> {
    let (h, w) = features.dims();
    let mut d: Vec<i64> = features.data().iter().map(|&f| if f { 0 } else { FAR }).collect();
    let mut line = Vec::new();
    for c in 0..w {
        line.clear();
        line.extend((0..h).map(|r| d[r * w + c]));
        let out = envelope_1d(&line);
        for r in 0..h {
            d[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        let out = envelope_1d(&d[r * w..(r + 1) * w]);
        d[r * w..(r + 1) * w].copy_from_slice(&out);
    }
    d
}

fn envelope_1d(f: &[i64]) -> Vec<i64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let inter = |q: usize, p: usize| -> f64 {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] as f64 + qf * qf) - (f[p] as f64 + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = inter(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = inter(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut out = vec![0i64; n];
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as i64 - v[k] as i64;
        *o = dq * dq + f[v[k]];
    }
    out
}

/// Distances from each boundary pixel of `from` to the boundary of `to`,
/// in row-major order of `from`'s boundary.
fn directed_boundary_distances(from: &BinaryMask, to_edt: &[i64]) -> Vec<f64> {
    boundary_gt(from)
        .points()
        .into_iter()
        .map(|(r, c)| (to_edt[r * from.width() + c] as f64).sqrt())
        .collect()
}

fn boundary_distance_sets(pred: &BinaryMask, gt: &BinaryMask, name: &'static str) -> Result<(Vec<f64>, Vec<f64>)> {
    same_dims(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::UndefinedMetric(name));
    }
    let gt_edt = squared_distance_transform(&boundary_gt(gt));
    let pred_edt = squared_distance_transform(&boundary_gt(pred));
    Ok((directed_boundary_distances(pred, &gt_edt), directed_boundary_distances(gt, &pred_edt)))
}

/// Symmetric Hausdorff distance between the boundary pixel sets, in pixels.
pub fn hausdorff(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b) = boundary_distance_sets(pred, gt, "hausdorff distance")?;
    Ok(a.iter().chain(&b).copied().fold(0.0, f64::max))
}

/// Average boundary distance: mean nearest distance from each boundary to
/// the other, averaged over both directions.
pub fn abd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (a, b) = boundary_distance_sets(pred, gt, "average boundary distance")?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&a) + mean(&b)) / 2.0)
}

/// All seven metrics of one image. Boundary distances are `None` when a
/// mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub fold: usize,
    pub dice: f64,
    pub jaccard: f64,
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub hd: Option<f64>,
    pub abd: Option<f64>,
}

impl ImageMetrics {
    pub fn values(&self) -> [Option<f64>; 7] {
        [
            Some(self.dice),
            Some(self.jaccard),
            Some(self.accuracy),
            Some(self.recall),
            Some(self.precision),
            self.hd,
            self.abd,
        ]
    }
}

fn defined_or_missing(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn evaluate(id: impl Into<String>, fold: usize, pred: &BinaryMask, gt: &BinaryMask) -> Result<ImageMetrics> {
    let o = overlap_metrics(pred, gt)?;
    Ok(ImageMetrics {
        id: id.into(),
        fold,
        dice: o.dice,
        jaccard: o.jaccard,
        accuracy: o.accuracy,
        recall: o.recall,
        precision: o.precision,
        hd: defined_or_missing(hausdorff(pred, gt))?,
        abd: defined_or_missing(abd(pred, gt))?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single value.
    pub std: Option<f64>,
    pub count: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub images: usize,
    pub metrics: Vec<MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: usize,
    pub overall: Vec<MetricSummary>,
    pub folds: Vec<FoldSummary>,
    #[serde(skip)]
    pub per_image: Vec<ImageMetrics>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn summarize(records: &[&ImageMetrics]) -> Vec<MetricSummary> {
    METRIC_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.values()[k]).collect();
            let (mean, std) = if vals.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&vals);
                (Some(m), Some(s))
            };
            MetricSummary {
                metric: (*name).to_string(),
                mean,
                std,
                count: vals.len(),
                missing: records.len() - vals.len(),
            }
        })
        .collect()
}

/// Per-fold and overall summaries. Undefined values are excluded and counted
/// as missing.
pub fn aggregate(per_image: &[ImageMetrics]) -> Result<MetricsReport> {
    if per_image.is_empty() {
        return Err(Error::Config("cannot aggregate an empty metric list".into()));
    }
    let all: Vec<&ImageMetrics> = per_image.iter().collect();
    let mut by_fold: BTreeMap<usize, Vec<&ImageMetrics>> = BTreeMap::new();
    for r in per_image {
        by_fold.entry(r.fold).or_default().push(r);
    }
    Ok(MetricsReport {
        images: per_image.len(),
        overall: summarize(&all),
        folds: by_fold
            .into_iter()
            .map(|(fold, recs)| FoldSummary { fold, images: recs.len(), metrics: summarize(&recs) })
            .collect(),
        per_image: per_image.to_vec(),
    })
}

impl MetricsReport {
    pub fn summary(&self, metric: &str) -> Option<&MetricSummary> {
        self.overall.iter().find(|s| s.metric == metric)
    }

    /// One row per image: `id,fold,dice,jaccard,accuracy,recall,precision,hd,abd`.
    /// Undefined distances are empty fields.
    pub fn write_csv<W: Write>(&self, out: W) -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id", "fold"];
        header.extend(METRIC_NAMES);
        w.write_record(&header)?;
        for r in &self.per_image {
            let mut row = vec![r.id.clone(), r.fold.to_string()];
            row.extend(r.values().iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
