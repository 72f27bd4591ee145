//! Detection metrics: axis-aligned IoU, AP at an IoU threshold, recall, and
//! base/novel aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::scene::Box3D;

/// Intersection over union of two axis-aligned boxes.
pub fn iou_aabb(a: &Box3D, b: &Box3D) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min(), a.max(), b.min(), b.max());
    let mut inter = 1.0;
    // Volumes from the same corner coordinates as the overlap, so that a box
    // against itself gives exactly 1.
    let (mut va, mut vb) = (1.0, 1.0);
    for k in 0..3 {
        let side = amax[k].min(bmax[k]) - amin[k].max(bmin[k]);
        if side <= 0.0 {
            return 0.0;
        }
        inter *= side;
        va *= amax[k] - amin[k];
        vb *= bmax[k] - bmin[k];
    }
    let union = va + vb - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// AP and recall of one class, both in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScore {
    pub ap: f64,
    pub recall: f64,
}

/// Scores one class over a set of scenes.
///
/// Detections of `class_id` from all scenes are ranked by confidence (ties keep
/// scene order, then list order). Each takes the unmatched ground-truth box of
/// the same class in its scene with the highest IoU, if that IoU reaches
/// `iou_threshold`. AP is the area under the all-point interpolated
/// precision/recall curve. Returns `None` when the class has no ground truth.
pub fn match_and_ap(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Box3D>],
    class_id: usize,
    iou_threshold: f64,
) -> Result<Option<ClassScore>> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Input(format!(
            "{} detection lists for {} scenes",
            detections.len(),
            ground_truth.len()
        )));
    }
    let gt: Vec<Vec<&Box3D>> = ground_truth
        .iter()
        .map(|s| s.iter().filter(|b| b.class_id == class_id).collect())
        .collect();
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return Ok(None);
    }
    let mut ranked: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|d| d.class_id == class_id).map(move |d| (s, d)))
        .collect();
    ranked.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));

    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    for (n, (s, det)) in ranked.iter().enumerate() {
        let best = gt[*s]
            .iter()
            .enumerate()
            .filter(|(g, _)| !used[*s][*g])
            .map(|(g, b)| (g, iou_aabb(&det.box3d, b)))
            .filter(|(_, iou)| *iou >= iou_threshold)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best {
            used[*s][g] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (n + 1) as f64);
        recall.push(tp as f64 / total as f64);
    }
    // Running maximum from the right gives the interpolated precision.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Ok(Some(ClassScore {
        ap,
        recall: tp as f64 / total as f64,
    }))
}

/// Per-class and grouped metrics, in percent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub per_class_recall: BTreeMap<usize, f64>,
    pub base_map: Option<f64>,
    pub novel_map: Option<f64>,
    pub avg_map: Option<f64>,
    pub base_recall: Option<f64>,
    pub novel_recall: Option<f64>,
    pub avg_recall: Option<f64>,
    pub forgetting: BTreeMap<usize, f64>,
}

fn mean_over(values: &BTreeMap<usize, f64>, classes: &BTreeSet<usize>) -> Option<f64> {
    let picked: Vec<f64> = classes.iter().filter_map(|c| values.get(c).copied()).collect();
    (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups per-class AP and recall (percent) into base/novel/average figures.
///
/// The average is the mean of the two group means, or the single present group.
pub fn aggregate_report(
    per_class_ap: &BTreeMap<usize, f64>,
    per_class_recall: &BTreeMap<usize, f64>,
    base_classes: &[usize],
    novel_classes: &[usize],
) -> Result<MetricsReport> {
    let base: BTreeSet<usize> = base_classes.iter().copied().collect();
    let novel: BTreeSet<usize> = novel_classes.iter().copied().collect();
    if !base.is_disjoint(&novel) {
        return Err(Error::Input("base and novel class groups overlap".into()));
    }
    let base_map = mean_over(per_class_ap, &base);
    let novel_map = mean_over(per_class_ap, &novel);
    let base_recall = mean_over(per_class_recall, &base);
    let novel_recall = mean_over(per_class_recall, &novel);
    Ok(MetricsReport {
        per_class_ap: per_class_ap.clone(),
        per_class_recall: per_class_recall.clone(),
        base_map,
        novel_map,
        avg_map: mean_present(&[base_map, novel_map]),
        base_recall,
        novel_recall,
        avg_recall: mean_present(&[base_recall, novel_recall]),
        forgetting: BTreeMap::new(),
    })
}

/// Per-class AP lost between two reports (`before - after`), for classes both cover.
pub fn forgetting_delta(before: &MetricsReport, after: &MetricsReport) -> BTreeMap<usize, f64> {
    before
        .per_class_ap
        .iter()
        .filter_map(|(c, b)| after.per_class_ap.get(c).map(|a| (*c, b - a)))
        .collect()
}

/// Scores every class in `classes` and aggregates with the given grouping.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Box3D>],
    base_classes: &[usize],
    novel_classes: &[usize],
    iou_threshold: f64,
) -> Result<MetricsReport> {
    let mut ap = BTreeMap::new();
    let mut recall = BTreeMap::new();
    for &c in base_classes.iter().chain(novel_classes) {
        if let Some(s) = match_and_ap(detections, ground_truth, c, iou_threshold)? {
            ap.insert(c, 100.0 * s.ap);
            recall.insert(c, 100.0 * s.recall);
        }
    }
    aggregate_report(&ap, &recall, base_classes, novel_classes)
}
