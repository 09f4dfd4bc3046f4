//! Evaluation metrics: instance matching and detection rates, average
//! precision, semantic IoU/accuracy, and classification Jaccard/accuracy.
//! All rates are percentages.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::cloudio::PointCloud;
use crate::error::{Error, Result};
use crate::instseg::InstancePrediction;

/// IoU thresholds averaged by mAP: 0.50, 0.55, …, 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for DetectionCounts {
    type Output = DetectionCounts;
    fn add(self, o: DetectionCounts) -> DetectionCounts {
        DetectionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for DetectionCounts {
    fn sum<I: Iterator<Item = DetectionCounts>>(iter: I) -> Self {
        iter.fold(DetectionCounts::default(), |a, b| a + b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub commission: f64,
    pub omission: f64,
    /// Set when some rate had a zero denominator and was reported as 0.
    pub degenerate: bool,
}

fn pct(num: usize, den: usize, degenerate: &mut bool) -> f64 {
    if den == 0 {
        *degenerate = true;
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn detection_metrics(c: DetectionCounts) -> DetectionMetrics {
    let mut degenerate = false;
    DetectionMetrics {
        precision: pct(c.tp, c.tp + c.fp, &mut degenerate),
        recall: pct(c.tp, c.tp + c.fn_, &mut degenerate),
        f1: pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_, &mut degenerate),
        commission: pct(c.fp, c.tp + c.fp, &mut degenerate),
        omission: pct(c.fn_, c.tp + c.fn_, &mut degenerate),
        degenerate,
    }
}

/// One accepted prediction/ground-truth pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred: i64,
    pub gt: i64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: DetectionCounts,
    pub pairs: Vec<MatchedPair>,
}

/// Point-set overlaps between predicted clusters and gt instances.
struct Overlaps {
    pred_size: BTreeMap<i64, usize>,
    gt_size: BTreeMap<i64, usize>,
    inter: HashMap<(i64, i64), usize>,
}

impl Overlaps {
    fn new(pred: &[i64], gt: &[i64]) -> Self {
        let mut pred_size = BTreeMap::new();
        let mut gt_size = BTreeMap::new();
        let mut inter = HashMap::new();
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= 0 {
                *pred_size.entry(p).or_insert(0) += 1;
            }
            if g >= 0 {
                *gt_size.entry(g).or_insert(0) += 1;
            }
            if p >= 0 && g >= 0 {
                *inter.entry((p, g)).or_insert(0) += 1;
            }
        }
        Overlaps {
            pred_size,
            gt_size,
            inter,
        }
    }

    fn iou(&self, p: i64, g: i64, i: usize) -> f64 {
        let union = self.pred_size[&p] + self.gt_size[&g] - i;
        i as f64 / union as f64
    }

    /// Nonzero-IoU candidate pairs, best first; ties broken by ids.
    fn ranked(&self) -> Vec<MatchedPair> {
        let mut v: Vec<MatchedPair> = self
            .inter
            .iter()
            .map(|(&(p, g), &i)| MatchedPair {
                pred: p,
                gt: g,
                iou: self.iou(p, g, i),
            })
            .collect();
        v.sort_by(|a, b| {
            b.iou
                .total_cmp(&a.iou)
                .then(a.pred.cmp(&b.pred))
                .then(a.gt.cmp(&b.gt))
        });
        v
    }
}

fn check_len(pred: &InstancePrediction, gt: &PointCloud) -> Result<()> {
    if pred.instance_id.len() != gt.len() {
        return Err(Error::Input(format!(
            "prediction covers {} points, ground truth {}",
            pred.instance_id.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Greedy one-to-one matching in descending IoU; a pair is accepted when
/// its IoU is at least `iou_threshold`.
pub fn match_instances(
    pred: &InstancePrediction,
    gt: &PointCloud,
    iou_threshold: f64,
) -> Result<MatchResult> {
    check_len(pred, gt)?;
    let ov = Overlaps::new(&pred.instance_id, &gt.instance);
    let mut used_p = BTreeMap::new();
    let mut used_g = BTreeMap::new();
    let mut pairs = Vec::new();
    for cand in ov.ranked() {
        if cand.iou < iou_threshold {
            break;
        }
        if used_p.contains_key(&cand.pred) || used_g.contains_key(&cand.gt) {
            continue;
        }
        used_p.insert(cand.pred, ());
        used_g.insert(cand.gt, ());
        pairs.push(cand);
    }
    let tp = pairs.len();
    Ok(MatchResult {
        counts: DetectionCounts {
            tp,
            fp: ov.pred_size.len() - tp,
            fn_: ov.gt_size.len() - tp,
        },
        pairs,
    })
}

/// Average precision (percent) over a set of scenes at one IoU threshold.
///
/// Predictions from all scenes are ranked by confidence; each is matched to
/// the unmatched ground-truth instance of its scene with the highest IoU at
/// or above the threshold. AP is the area under the monotone precision
/// envelope (all-point interpolation).
pub fn average_precision(scenes: &[(&InstancePrediction, &PointCloud)], iou_threshold: f64) -> Result<f64> {
    struct Det {
        scene: usize,
        pred: i64,
        conf: f64,
    }
    let mut dets = Vec::new();
    let mut overlaps = Vec::with_capacity(scenes.len());
    let mut n_gt = 0;
    for (s, (pred, gt)) in scenes.iter().enumerate() {
        check_len(pred, gt)?;
        let ov = Overlaps::new(&pred.instance_id, &gt.instance);
        n_gt += ov.gt_size.len();
        for &p in ov.pred_size.keys() {
            dets.push(Det {
                scene: s,
                pred: p,
                conf: pred.confidence_of(p),
            });
        }
        overlaps.push(ov);
    }
    if n_gt == 0 || dets.is_empty() {
        return Ok(0.0);
    }
    dets.sort_by(|a, b| {
        b.conf
            .total_cmp(&a.conf)
            .then(a.scene.cmp(&b.scene))
            .then(a.pred.cmp(&b.pred))
    });
    // Candidate gt per (scene, pred), best IoU first.
    let mut cands: HashMap<(usize, i64), Vec<(i64, f64)>> = HashMap::new();
    for (s, ov) in overlaps.iter().enumerate() {
        for m in ov.ranked() {
            cands.entry((s, m.pred)).or_default().push((m.gt, m.iou));
        }
    }
    let mut matched: Vec<BTreeMap<i64, ()>> = vec![BTreeMap::new(); scenes.len()];
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(dets.len());
    for (k, d) in dets.iter().enumerate() {
        let hit = cands.get(&(d.scene, d.pred)).and_then(|c| {
            c.iter()
                .find(|(g, iou)| *iou >= iou_threshold && !matched[d.scene].contains_key(g))
                .map(|(g, _)| *g)
        });
        if let Some(g) = hit {
            matched[d.scene].insert(g, ());
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(100.0 * area_under_envelope(&curve))
}

/// All-point interpolated area under a (recall, precision) curve listed in
/// ranking order.
pub fn area_under_envelope(curve: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = curve.iter().map(|c| c.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in curve.iter().enumerate() {
        area += (r - prev_r) * env[i];
        prev_r = r;
    }
    area
}

/// Mean AP over [`map_thresholds`].
pub fn mean_average_precision(scenes: &[(&InstancePrediction, &PointCloud)]) -> Result<f64> {
    let th = map_thresholds();
    let mut total = 0.0;
    for &t in &th {
        total += average_precision(scenes, t)?;
    }
    Ok(total / th.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMetrics {
    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub miou: f64,
    pub macc: f64,
    pub overall_accuracy: f64,
}

/// Square confusion matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(Confusion {
            k,
            counts: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    #[inline]
    pub fn add(&mut self, gt: usize, pred: usize) {
        self.counts[gt * self.k + pred] += 1;
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

pub fn semantic_metrics(conf: &Confusion) -> Result<SemanticMetrics> {
    let k = conf.k;
    let total: u64 = conf.counts.iter().sum();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let row = |c: usize| (0..k).map(|j| conf.get(c, j)).sum::<u64>();
    let col = |c: usize| (0..k).map(|i| conf.get(i, c)).sum::<u64>();
    let mut iou = Vec::with_capacity(k);
    let mut acc = Vec::with_capacity(k);
    let mut trace = 0;
    for c in 0..k {
        let d = conf.get(c, c);
        trace += d;
        let r = row(c);
        if r == 0 {
            iou.push(None);
            acc.push(None);
            continue;
        }
        iou.push(Some(100.0 * d as f64 / (r + col(c) - d) as f64));
        acc.push(Some(100.0 * d as f64 / r as f64));
    }
    Ok(SemanticMetrics {
        miou: mean_present(&iou),
        macc: mean_present(&acc),
        overall_accuracy: 100.0 * trace as f64 / total as f64,
        iou,
        accuracy: acc,
    })
}

fn mean_present(v: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = v.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Arithmetic mean of per-class scores.
pub fn class_mean(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub jaccard: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub mean_jaccard: f64,
    pub mean_accuracy: f64,
    pub overall_accuracy: f64,
}

/// Per-class Jaccard `tp/(tp+fp+fn)` and accuracy (recall); means over the
/// classes present in the ground truth.
pub fn classification_metrics(pred: &[usize], gt: &[usize], k: usize) -> Result<ClassificationMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        )));
    }
    let mut conf = Confusion::new(k);
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= k || g >= k {
            return Err(Error::Range(format!("class id beyond {k}")));
        }
        conf.add(g, p);
    }
    let mut jac = Vec::with_capacity(k);
    let mut acc = Vec::with_capacity(k);
    let mut correct = 0;
    for c in 0..k {
        let tp = conf.get(c, c);
        correct += tp;
        let row: u64 = (0..k).map(|j| conf.get(c, j)).sum();
        let col: u64 = (0..k).map(|i| conf.get(i, c)).sum();
        if row == 0 {
            jac.push(None);
            acc.push(None);
            continue;
        }
        jac.push(Some(100.0 * tp as f64 / (row + col - tp) as f64));
        acc.push(Some(100.0 * tp as f64 / row as f64));
    }
    Ok(ClassificationMetrics {
        mean_jaccard: mean_present(&jac),
        mean_accuracy: mean_present(&acc),
        overall_accuracy: if gt.is_empty() { 0.0 } else { 100.0 * correct as f64 / gt.len() as f64 },
        jaccard: jac,
        accuracy: acc,
    })
}

/// Everything measured in one evaluation run. Fields irrelevant to a task
/// are left empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_scene: Vec<DetectionCounts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap50: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic: Option<SemanticMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
}

impl MetricsReport {
    /// Instance-segmentation report: per-scene counts at IoU 0.5, pooled
    /// detection rates, AP50 and mAP.
    pub fn instance(scenes: &[(&InstancePrediction, &PointCloud)]) -> Result<Self> {
        let mut per_scene = Vec::with_capacity(scenes.len());
        for (p, g) in scenes {
            per_scene.push(match_instances(p, g, 0.5)?.counts);
        }
        let total: DetectionCounts = per_scene.iter().copied().sum();
        Ok(MetricsReport {
            detection: Some(detection_metrics(total)),
            ap50: Some(average_precision(scenes, 0.5)?),
            map: Some(mean_average_precision(scenes)?),
            per_scene,
            ..Default::default()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloudio::SemanticClass;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn gt_cloud(instance: &[i64]) -> PointCloud {
        let mut c = PointCloud::default();
        for (i, &id) in instance.iter().enumerate() {
            let class = if id >= 0 { SemanticClass::Crown } else { SemanticClass::Terrain };
            c.push([i as f64, 0.0, 0.0], 0.0, 0.0, class, id);
        }
        c
    }

    #[test]
    fn counts_reference_rows() {
        let m = detection_metrics(DetectionCounts { tp: 20, fp: 0, fn_: 0 });
        assert_eq!((m.precision, m.recall, m.f1), (100.0, 100.0, 100.0));
        let m = detection_metrics(DetectionCounts { tp: 39, fp: 7, fn_: 25 });
        assert!(close(m.precision, 84.78, 0.05));
        assert!(close(m.recall, 60.94, 0.05));
        assert!(close(m.f1, 70.91, 0.05));
        assert!(close(m.commission, 15.2, 0.1));
        assert!(close(m.omission, 39.1, 0.1));
        assert!(!m.degenerate);
        let m = detection_metrics(DetectionCounts::default());
        assert!(m.degenerate);
        assert_eq!((m.precision, m.recall, m.f1, m.commission, m.omission), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn perfect_and_empty_matching() {
        let gt = gt_cloud(&[0, 0, 1, 1, -1]);
        let perfect = InstancePrediction::from_ids(gt.instance.clone());
        let r = match_instances(&perfect, &gt, 0.5).unwrap();
        assert_eq!(r.counts, DetectionCounts { tp: 2, fp: 0, fn_: 0 });
        let empty = InstancePrediction::from_ids(vec![-1; 5]);
        let r = match_instances(&empty, &gt, 0.5).unwrap();
        assert_eq!(r.counts, DetectionCounts { tp: 0, fp: 0, fn_: 2 });
        let short = InstancePrediction::from_ids(vec![-1; 4]);
        assert!(match_instances(&short, &gt, 0.5).is_err());
    }

    #[test]
    fn equal_halves_match_at_threshold() {
        let gt = gt_cloud(&[0, 0, 0, 0]);
        let pred = InstancePrediction::from_ids(vec![0, 0, 1, 1]);
        let r = match_instances(&pred, &gt, 0.5).unwrap();
        assert_eq!(r.counts, DetectionCounts { tp: 1, fp: 1, fn_: 0 });
        assert_eq!(r.pairs[0].iou, 0.5);
    }

    #[test]
    fn hand_computed_precision_recall_curve() {
        // Two trees; clusters: correct (0.9), spurious (0.8), correct (0.7).
        let gt = gt_cloud(&[0, 0, 1, 1, -1, -1]);
        let mut pred = InstancePrediction::from_ids(vec![0, 0, 2, 2, 1, 1]);
        pred.confidence = vec![0.9, 0.8, 0.7];
        let ap = average_precision(&[(&pred, &gt)], 0.5).unwrap();
        assert!(close(ap, (0.5 + 2.0 / 3.0 * 0.5) * 100.0, 1e-9), "{ap}");

        let perfect = InstancePrediction::from_ids(gt.instance.clone());
        assert_eq!(average_precision(&[(&perfect, &gt)], 0.5).unwrap(), 100.0);
        let none = InstancePrediction::from_ids(vec![-1; 6]);
        assert_eq!(average_precision(&[(&none, &gt)], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn two_class_confusion() {
        let c = Confusion::from_rows(&[&[8, 2], &[1, 9]]).unwrap();
        let m = semantic_metrics(&c).unwrap();
        assert!(close(m.iou[0].unwrap(), 72.73, 0.005));
        assert!(close(m.iou[1].unwrap(), 75.0, 1e-12));
        assert!(close(m.miou, 73.86, 0.005));
        assert!(close(m.overall_accuracy, 85.0, 1e-12));
        assert!(close(m.macc, 85.0, 1e-12));
        assert!(semantic_metrics(&Confusion::new(3)).is_err());
    }

    #[test]
    fn single_present_class_drives_means() {
        let c = Confusion::from_rows(&[&[0, 0], &[3, 7]]).unwrap();
        let m = semantic_metrics(&c).unwrap();
        assert_eq!(m.iou[0], None);
        assert!(close(m.miou, 70.0, 1e-12));
        assert!(close(m.macc, 70.0, 1e-12));
        let perfect = Confusion::from_rows(&[&[5, 0], &[0, 5]]).unwrap();
        let m = semantic_metrics(&perfect).unwrap();
        assert_eq!((m.miou, m.macc, m.overall_accuracy), (100.0, 100.0, 100.0));
    }

    #[test]
    fn classification_means() {
        let m = classification_metrics(&[0, 1, 1, 0], &[0, 1, 1, 0], 2).unwrap();
        assert_eq!((m.mean_jaccard, m.mean_accuracy), (100.0, 100.0));
        assert!(close(class_mean(&[82.07, 67.21]), 74.64, 1e-9));
        assert!(close(class_mean(&[86.67, 85.37]), 86.02, 1e-9));
        // gt 0 0 1 1, pred 0 1 1 1: class0 J=1/2, class1 J=2/3
        let m = classification_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert!(close(m.jaccard[0].unwrap(), 50.0, 1e-12));
        assert!(close(m.jaccard[1].unwrap(), 200.0 / 3.0, 1e-12));
    }
}
