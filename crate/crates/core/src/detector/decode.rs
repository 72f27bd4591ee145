use super::ProposalSet;
use crate::eval::iou_aabb;
use crate::scene::Box3D;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub box3d: Box3D,
    pub class_id: usize,
    pub confidence: f64,
}

/// Turns proposals into detections.
///
/// Each proposal takes its argmax class with confidence `objectness · max
/// score`; proposals with objectness below `objectness_threshold` are dropped.
/// Greedy per-class NMS then removes any box overlapping a kept, more confident
/// box of the same class by more than `iou_threshold`. The result is sorted by
/// confidence, highest first; equal confidences keep proposal order.
pub fn decode_and_nms(
    proposals: &ProposalSet,
    objectness_threshold: f64,
    iou_threshold: f64,
) -> Vec<Detection> {
    let mut candidates: Vec<Detection> = (0..proposals.len())
        .filter(|&i| proposals.objectness[i] >= objectness_threshold)
        .map(|i| {
            let row = proposals.class_scores.row(i);
            let (class_id, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &s)| if s > acc.1 { (c, s) } else { acc });
            Detection {
                box3d: proposals.box_at(i, class_id),
                class_id,
                confidence: proposals.objectness[i] * best,
            }
        })
        .collect();
    candidates.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut kept: Vec<Detection> = Vec::new();
    for d in candidates {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou_aabb(&k.box3d, &d.box3d) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
