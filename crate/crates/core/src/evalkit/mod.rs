//! By-event scoring: IoU matching between annotations and detections,
//! precision/recall/F1 per IoU threshold, AF1, and Welch's t-test.

mod hungarian;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::sigio::{Event, EventList};

pub use hungarian::max_weight_assignment;

/// Threshold used for the headline scores.
pub const DEFAULT_IOU: f64 = 0.2;

/// IoU thresholds `0.05, 0.10, ..., 0.95`.
pub fn default_iou_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

pub fn iou(a: &Event, b: &Event) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.end.max(b.end) - a.start.min(b.start);
    inter / union
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(truth index, prediction index, IoU)`, sorted by truth index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_truth: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
    pub n_truth: usize,
    pub n_pred: usize,
}

impl MatchResult {
    /// Sum of pair IoUs in truth order.
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

/// One-to-one matching of maximum total IoU over overlapping pairs. The
/// overlap graph is split into connected components, each solved exactly.
pub fn match_events(truth: &EventList, pred: &EventList) -> MatchResult {
    let (t, p) = (truth.events(), pred.events());
    // overlapping pairs; both lists are sorted and disjoint, so a sweep finds them
    let mut edges = Vec::new();
    let mut j0 = 0;
    for (i, a) in t.iter().enumerate() {
        while j0 < p.len() && p[j0].end <= a.start {
            j0 += 1;
        }
        let mut j = j0;
        while j < p.len() && p[j].start < a.end {
            let v = iou(a, &p[j]);
            if v > 0.0 {
                edges.push((i, j, v));
            }
            j += 1;
        }
    }
    // union-find over truth nodes 0..t and prediction nodes t..t+p
    let mut parent: Vec<usize> = (0..t.len() + p.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(i, j, _) in &edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, t.len() + j));
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> = Default::default();
    for &e in &edges {
        let root = find(&mut parent, e.0);
        groups.entry(root).or_default().push(e);
    }
    let mut pairs = Vec::new();
    for comp in groups.values() {
        let mut rows: Vec<usize> = comp.iter().map(|e| e.0).collect();
        let mut cols: Vec<usize> = comp.iter().map(|e| e.1).collect();
        rows.sort_unstable();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        let mut w = vec![vec![0.0; cols.len()]; rows.len()];
        for &(i, j, v) in comp {
            let r = rows.binary_search(&i).expect("row present");
            let c = cols.binary_search(&j).expect("col present");
            w[r][c] = v;
        }
        for (r, c) in max_weight_assignment(&w) {
            if w[r][c] > 0.0 {
                pairs.push((rows[r], cols[c], w[r][c]));
            }
        }
    }
    pairs.sort_by_key(|p| p.0);
    let mut t_used = vec![false; t.len()];
    let mut p_used = vec![false; p.len()];
    for &(i, j, _) in &pairs {
        t_used[i] = true;
        p_used[j] = true;
    }
    MatchResult {
        unmatched_truth: (0..t.len()).filter(|&i| !t_used[i]).collect(),
        unmatched_pred: (0..p.len()).filter(|&j| !p_used[j]).collect(),
        pairs,
        n_truth: t.len(),
        n_pred: p.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let f1 = if recall + precision == 0.0 {
            0.0
        } else {
            2.0 * recall * precision / (recall + precision)
        };
        Metrics {
            tp,
            fp,
            fn_,
            recall,
            precision,
            f1,
        }
    }
}

/// Pairs with IoU at or above `tau` are true positives.
pub fn metrics(m: &MatchResult, tau: f64) -> Metrics {
    let tp = m.pairs.iter().filter(|p| p.2 >= tau).count();
    Metrics::from_counts(tp, m.n_pred - tp, m.n_truth - tp)
}

/// F1 at each threshold of `grid` on one matching, and its mean.
pub fn af1_from_match(m: &MatchResult, grid: &[f64]) -> (Vec<f64>, f64) {
    let curve: Vec<f64> = grid.iter().map(|&tau| metrics(m, tau).f1).collect();
    let mean = curve.iter().sum::<f64>() / curve.len().max(1) as f64;
    (curve, mean)
}

pub fn af1(truth: &EventList, pred: &EventList, grid: &[f64]) -> (Vec<f64>, f64) {
    af1_from_match(&match_events(truth, pred), grid)
}

/// Scores of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingReport {
    pub name: String,
    pub n_truth: usize,
    pub n_pred: usize,
    /// One entry per threshold of the report grid.
    pub per_threshold: Vec<Metrics>,
    pub af1: f64,
    /// IoU of every matched pair, for histograms.
    pub matched_iou: Vec<f64>,
}

pub fn evaluate_recording(name: &str, truth: &EventList, pred: &EventList, grid: &[f64]) -> RecordingReport {
    let m = match_events(truth, pred);
    let per_threshold = grid.iter().map(|&t| metrics(&m, t)).collect();
    let (_, af1) = af1_from_match(&m, grid);
    RecordingReport {
        name: name.to_string(),
        n_truth: m.n_truth,
        n_pred: m.n_pred,
        per_threshold,
        af1,
        matched_iou: m.pairs.iter().map(|p| p.2).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSummary {
    pub iou: f64,
    /// Summed over recordings.
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Unweighted means over recordings.
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_grid: Vec<f64>,
    pub thresholds: Vec<ThresholdSummary>,
    pub af1: f64,
    pub recordings: Vec<RecordingReport>,
}

impl MetricsReport {
    /// Summary row at `iou`, if it is on the grid.
    pub fn at(&self, iou: f64) -> Option<&ThresholdSummary> {
        self.thresholds.iter().find(|t| (t.iou - iou).abs() < 1e-9)
    }

    pub fn f1_curve(&self) -> Vec<(f64, f64)> {
        self.thresholds.iter().map(|t| (t.iou, t.f1)).collect()
    }

    /// CSV with one row per threshold.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("iou,tp,fp,fn,recall,precision,f1\n");
        for t in &self.thresholds {
            s.push_str(&format!(
                "{:.2},{},{},{},{:.6},{:.6},{:.6}\n",
                t.iou, t.tp, t.fp, t.fn_, t.recall, t.precision, t.f1
            ));
        }
        s
    }
}

/// Average recordings with equal weight.
pub fn aggregate(recordings: Vec<RecordingReport>, grid: &[f64]) -> Result<MetricsReport> {
    if recordings.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let n = recordings.len() as f64;
    let thresholds = grid
        .iter()
        .enumerate()
        .map(|(k, &iou)| {
            let rows = recordings.iter().map(|r| &r.per_threshold[k]);
            let mut s = ThresholdSummary {
                iou,
                tp: 0,
                fp: 0,
                fn_: 0,
                recall: 0.0,
                precision: 0.0,
                f1: 0.0,
            };
            for m in rows {
                s.tp += m.tp;
                s.fp += m.fp;
                s.fn_ += m.fn_;
                s.recall += m.recall / n;
                s.precision += m.precision / n;
                s.f1 += m.f1 / n;
            }
            s
        })
        .collect();
    let af1 = recordings.iter().map(|r| r.af1).sum::<f64>() / n;
    Ok(MetricsReport {
        iou_grid: grid.to_vec(),
        thresholds,
        af1,
        recordings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (m, x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
}

/// Two-sided Welch's t-test with Welch-Satterthwaite degrees of freedom.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate("each sample needs at least two values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::Degenerate("a sample has zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let dof = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchResult { t, dof, p })
}
