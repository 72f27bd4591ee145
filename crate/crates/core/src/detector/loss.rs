use super::{DetectorConfig, Forward, PreparedScene};
use crate::error::{Error, Result};
use crate::numeric::{Tensor, Var};

/// The supervised objective and its parts.
pub struct SupervisedTerms<'t> {
    pub total: Var<'t>,
    pub pgb: Var<'t>,
    pub objectness: Var<'t>,
    pub box_regression: Var<'t>,
    pub classification: Var<'t>,
    pub positives: usize,
    pub negatives: usize,
}

/// Center-refinement loss plus weighted objectness, box and class terms.
///
/// A proposal is positive when its cluster center lies within
/// `positive_radius` of a ground-truth center and negative when it is farther
/// than `negative_radius` from all of them; proposals in between are ignored.
/// Box and class terms use positives only, matched to the nearest center.
///
/// The class term is a softmax cross-entropy over classifier columns
/// `first_class..`; pass 0 to normalise over every class. Ground truth below
/// `first_class` is a contract error.
pub fn supervised_loss<'t>(
    fwd: &Forward<'t>,
    prep: &PreparedScene,
    pgb: Var<'t>,
    cfg: &DetectorConfig,
    first_class: usize,
) -> Result<SupervisedTerms<'t>> {
    let tape = pgb.tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let centers = fwd.centers.value();
    let classes = fwd.class_logits.shape()[1];
    let k = centers.rows();

    let mut pos = Vec::new();
    let mut matched = Vec::new();
    let mut obj_idx = Vec::new();
    let mut obj_target = Vec::new();
    for i in 0..k {
        let c = centers.row(i);
        let nearest = prep
            .boxes
            .iter()
            .enumerate()
            .map(|(b, bx)| {
                let d2: f64 = (0..3).map(|a| (c[a] - bx.center[a]).powi(2)).sum();
                (d2.sqrt(), b)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match nearest {
            Some((d, b)) if d < cfg.positive_radius => {
                pos.push(i);
                matched.push(b);
                obj_idx.push(i);
                obj_target.push(1.0);
            }
            Some((d, _)) if d <= cfg.negative_radius => {}
            _ => {
                obj_idx.push(i);
                obj_target.push(0.0);
            }
        }
    }
    let negatives = obj_target.iter().filter(|t| **t == 0.0).count();

    let objectness = if obj_idx.is_empty() {
        zero()
    } else {
        fwd.objectness_logits
            .gather_rows(&obj_idx)?
            .bce_with_logits(&obj_target)?
    };

    let (box_regression, classification) = if pos.is_empty() {
        (zero(), zero())
    } else {
        let mut target_centers = Vec::with_capacity(pos.len());
        let mut target_logs = Vec::with_capacity(pos.len());
        let mut labels = Vec::with_capacity(pos.len());
        for &b in &matched {
            let bx = &prep.boxes[b];
            if bx.class_id >= classes || bx.class_id < first_class {
                return Err(Error::Contract(format!(
                    "ground-truth class {} outside classifier columns {first_class}..{classes}",
                    bx.class_id
                )));
            }
            target_centers.push(bx.center);
            target_logs.push(bx.size.map(f64::ln));
            labels.push(bx.class_id - first_class);
        }
        let n = pos.len() as f64;
        let centre_err = fwd
            .box_centers
            .gather_rows(&pos)?
            .sub(tape.constant(Tensor::from_rows(&target_centers)))?
            .l1()?;
        let size_err = fwd
            .box_log_sizes
            .gather_rows(&pos)?
            .sub(tape.constant(Tensor::from_rows(&target_logs)))?
            .l1()?;
        (
            centre_err.add(size_err)?.scale(1.0 / n)?,
            fwd.class_logits
                .gather_rows(&pos)?
                .narrow(1, first_class, classes - first_class)?
                .cross_entropy(&labels)?,
        )
    };

    let total = pgb
        .add(objectness.scale(cfg.objectness_weight)?)?
        .add(box_regression.scale(cfg.box_weight)?)?
        .add(classification.scale(cfg.class_weight)?)?;
    Ok(SupervisedTerms {
        total,
        pgb,
        objectness,
        box_regression,
        classification,
        positives: pos.len(),
        negatives,
    })
}
