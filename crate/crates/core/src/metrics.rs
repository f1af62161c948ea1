//! Threshold-matched point cloud metrics.
//!
//! With `P_R` the prediction and `P_L` the ground truth:
//!
//! * TP / FP count predicted points whose nearest ground-truth point lies
//!   within / beyond `τ`; FN counts ground-truth points with no prediction
//!   within `τ`.
//! * `D1 = Σ_{p ∈ P_R} nn(p, P_L) / (TP + FP)`,
//!   `D2 = Σ_{q ∈ P_L} nn(q, P_R) / (TP + FN)`, `CD = (D1 + D2) / 2`.
//!   Note that D2 is normalized by `TP + FN`, not by `|P_L|`.
//! * precision `TP/(TP+FP)`, recall `TP/(TP+FN)`, IoU `TP/(TP+FP+FN)`.
//! * per-class IoU restricts both clouds to one label before matching;
//!   mIoU averages over classes present in at least one of the clouds.
//!
//! Ratios with a zero denominator are `None`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ClassLabel, Point3, SemanticPointCloud};
use crate::par;

/// Default matching thresholds in meters.
pub const DEFAULT_TAUS: [f64; 2] = [0.25, 0.5];

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Exact nearest-neighbour index (KD-tree over a private copy of the points).
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Point3>,
    nodes: Vec<Node>,
}

#[inline]
fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

impl NnIndex {
    pub fn build(points: &[Point3]) -> Self {
        let mut idx = NnIndex {
            points: points.to_vec(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            idx.build_node(0, points.len());
        }
        idx
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let slice = &mut self.points[start..end];
        let mut lo = slice[0];
        let mut hi = slice[0];
        for p in slice.iter() {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let axis = (hi - lo).imax();
        if hi[axis] == lo[axis] {
            return id;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let value = slice[mid][axis];
        let left = self.build_node(start, start + mid);
        let right = self.build_node(start + mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distance from `q` to the closest indexed point; `None` for an empty index.
    pub fn nearest(&self, q: &Point3) -> Option<f64> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        let mut stack = vec![(0usize, 0.0f64)];
        while let Some((node, bound)) = stack.pop() {
            if bound > best {
                continue;
            }
            match self.nodes[node] {
                Node::Leaf { start, end } => {
                    for p in &self.points[start..end] {
                        best = best.min(dist2(p, q));
                    }
                }
                Node::Split { axis, value, left, right } => {
                    let d = q[axis] - value;
                    let (near, far) = if d < 0.0 { (left, right) } else { (right, left) };
                    stack.push((far, d * d));
                    stack.push((near, bound));
                }
            }
        }
        Some(best.sqrt())
    }
}

/// Nearest-neighbour search strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Search {
    Indexed,
    BruteForce,
}

pub fn brute_force_nearest(points: &[Point3], q: &Point3) -> Option<f64> {
    points
        .iter()
        .map(|p| dist2(p, q))
        .min_by(f64::total_cmp)
        .map(f64::sqrt)
}

/// Nearest distance from every query into `points`; empty `points` yields an empty result.
pub fn nearest_distances(points: &[Point3], queries: &[Point3], search: Search) -> Vec<f64> {
    if points.is_empty() {
        return Vec::new();
    }
    match search {
        Search::Indexed => {
            let index = NnIndex::build(points);
            par::map_slice(queries, |q| index.nearest(q).unwrap_or(f64::INFINITY))
        }
        Search::BruteForce => par::map_slice(queries, |q| brute_force_nearest(points, q).unwrap_or(f64::INFINITY)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tau: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("threshold must be positive, got {tau}")))
    }
}

/// Nearest distances in both directions: prediction → GT and GT → prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDistances {
    pub pred_to_gt: Vec<f64>,
    pub gt_to_pred: Vec<f64>,
}

impl PairDistances {
    pub fn compute(pred: &[Point3], gt: &[Point3], search: Search) -> Self {
        let pred_to_gt = if gt.is_empty() {
            vec![f64::INFINITY; pred.len()]
        } else {
            nearest_distances(gt, pred, search)
        };
        let gt_to_pred = if pred.is_empty() {
            vec![f64::INFINITY; gt.len()]
        } else {
            nearest_distances(pred, gt, search)
        };
        PairDistances { pred_to_gt, gt_to_pred }
    }

    pub fn counts(&self, tau: f64) -> Result<MatchCounts> {
        check_tau(tau)?;
        let tp = self.pred_to_gt.iter().filter(|&&d| d <= tau).count();
        Ok(MatchCounts {
            tp,
            fp: self.pred_to_gt.len() - tp,
            fn_: self.gt_to_pred.iter().filter(|&&d| d > tau).count(),
            tau,
        })
    }

    pub fn chamfer(&self, tau: f64) -> Result<f64> {
        if self.pred_to_gt.is_empty() || self.gt_to_pred.is_empty() {
            return Err(Error::UndefinedMetric("chamfer distance needs two non-empty clouds".into()));
        }
        let c = self.counts(tau)?;
        if c.tp + c.fn_ == 0 {
            return Err(Error::UndefinedMetric("TP + FN is zero".into()));
        }
        let d1 = self.pred_to_gt.iter().sum::<f64>() / (c.tp + c.fp) as f64;
        let d2 = self.gt_to_pred.iter().sum::<f64>() / (c.tp + c.fn_) as f64;
        Ok(0.5 * (d1 + d2))
    }
}

pub fn match_counts(pred: &[Point3], gt: &[Point3], tau: f64) -> Result<MatchCounts> {
    check_tau(tau)?;
    PairDistances::compute(pred, gt, Search::Indexed).counts(tau)
}

pub fn chamfer(pred: &[Point3], gt: &[Point3], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    PairDistances::compute(pred, gt, Search::Indexed).chamfer(tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub iou: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn prf_iou(c: &MatchCounts) -> Prf {
    Prf {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: ClassLabel,
    pub counts: MatchCounts,
    /// `None` when the class is absent from both clouds.
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    /// Mean over classes with a defined IoU; `None` if there are none.
    pub mean: Option<f64>,
}

pub fn miou_with(
    pred: &SemanticPointCloud,
    gt: &SemanticPointCloud,
    tau: f64,
    classes: &[ClassLabel],
    search: Search,
) -> Result<MiouReport> {
    check_tau(tau)?;
    if classes.contains(&ClassLabel::Free) {
        return Err(Error::input("the free class is not evaluated"));
    }
    let mut per_class = Vec::with_capacity(classes.len());
    for &class in classes {
        let d = PairDistances::compute(&pred.points_of(class), &gt.points_of(class), search);
        let counts = d.counts(tau)?;
        per_class.push(ClassIou {
            class,
            counts,
            iou: prf_iou(&counts).iou,
        });
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.iou).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MiouReport { per_class, mean })
}

pub fn miou(pred: &SemanticPointCloud, gt: &SemanticPointCloud, tau: f64, classes: &[ClassLabel]) -> Result<MiouReport> {
    miou_with(pred, gt, tau, classes, Search::Indexed)
}

/// Every metric at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub counts: MatchCounts,
    pub chamfer: Option<f64>,
    pub prf: Prf,
    pub miou: MiouReport,
}

/// One `(metric, τ, class, value)` row of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub tau: f64,
    pub class: Option<String>,
    pub value: Option<f64>,
}

pub fn evaluate_with(pred: &SemanticPointCloud, gt: &SemanticPointCloud, tau: f64, search: Search) -> Result<EvalReport> {
    check_tau(tau)?;
    let d = PairDistances::compute(&pred.points, &gt.points, search);
    let counts = d.counts(tau)?;
    let chamfer = match d.chamfer(tau) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        tau,
        counts,
        chamfer,
        prf: prf_iou(&counts),
        miou: miou_with(pred, gt, tau, &ClassLabel::EVALUATED, search)?,
    })
}

pub fn evaluate(pred: &SemanticPointCloud, gt: &SemanticPointCloud, tau: f64) -> Result<EvalReport> {
    evaluate_with(pred, gt, tau, Search::Indexed)
}

impl EvalReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, class: Option<ClassLabel>, value: Option<f64>| MetricRecord {
            metric: metric.to_string(),
            tau: self.tau,
            class: class.map(|c| c.name().to_string()),
            value,
        };
        let mut out = vec![
            rec("tp", None, Some(self.counts.tp as f64)),
            rec("fp", None, Some(self.counts.fp as f64)),
            rec("fn", None, Some(self.counts.fn_ as f64)),
            rec("chamfer", None, self.chamfer),
            rec("precision", None, self.prf.precision),
            rec("recall", None, self.prf.recall),
            rec("iou", None, self.prf.iou),
        ];
        for c in &self.miou.per_class {
            out.push(rec("class_iou", Some(c.class), c.iou));
        }
        out.push(rec("miou", None, self.miou.mean));
        out
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Plain-text table with one column per threshold.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:<12}", "metric");
    for r in reports {
        let _ = write!(s, " {:>10}", format!("tau={}", r.tau));
    }
    s.push('\n');
    let Some(first) = reports.first() else {
        return s;
    };
    let rows = first.records();
    let all: Vec<Vec<MetricRecord>> = reports.iter().map(|r| r.records()).collect();
    for (i, row) in rows.iter().enumerate() {
        let name = match &row.class {
            Some(c) => format!("iou[{c}]"),
            None => row.metric.clone(),
        };
        let _ = write!(s, "{name:<12}");
        for recs in &all {
            let _ = write!(s, " {:>10}", cell(recs[i].value));
        }
        s.push('\n');
    }
    s
}
