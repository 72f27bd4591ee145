//! Distillation terms for incremental training: confidence-filtered box
//! distillation, pairwise feature-relation distillation, and old-class logit
//! distillation. Teacher values always enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tensor, Var};

/// Offset inside the square root of the literal (unsquared) norm.
pub const LITERAL_NORM_EPS: f64 = 1e-12;

/// Penalty applied to teacher/student differences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Squared Euclidean norm; smooth at zero.
    #[default]
    Squared,
    /// Plain Euclidean norm, evaluated as `sqrt(x² + 1e-12)`.
    Literal,
}

/// Proposals judged reliable enough for box distillation.
#[derive(Clone, Debug, PartialEq)]
pub struct ReliableSelection {
    /// Threshold; infinite when no proposal has an old-class argmax.
    pub tau: f64,
    /// Selected proposal indices, ascending.
    pub indices: Vec<usize>,
    /// Mean confidence of the old-class-argmax proposals.
    pub mean: Option<f64>,
    /// Population standard deviation of the same confidences.
    pub std_dev: Option<f64>,
    /// Number of proposals whose argmax class is old.
    pub filtered: usize,
}

impl ReliableSelection {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Confidence threshold over proposals whose top class is an old class.
///
/// With `s_i` the top score of each such proposal, `tau = mean + zeta · std`
/// (population std) and a proposal is selected when `s_i > tau`.
pub fn compute_threshold(
    class_scores: &Tensor,
    old_classes: &[usize],
    zeta: f64,
) -> Result<ReliableSelection> {
    if class_scores.ndim() != 2 {
        return Err(Error::shape("compute_threshold", format!("scores {:?}", class_scores.shape())));
    }
    let c = class_scores.cols();
    if old_classes.is_empty() || old_classes.iter().any(|&k| k >= c) {
        return Err(Error::Input(format!("old classes {old_classes:?} invalid for {c} columns")));
    }
    if !(zeta >= 0.0) {
        return Err(Error::Config(format!("zeta must be non-negative, got {zeta}")));
    }
    let mut kept = Vec::new();
    for i in 0..class_scores.rows() {
        let row = class_scores.row(i);
        let (arg, top) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &s)| if s > acc.1 { (k, s) } else { acc });
        if old_classes.contains(&arg) {
            kept.push((i, top));
        }
    }
    if kept.is_empty() {
        return Ok(ReliableSelection {
            tau: f64::INFINITY,
            indices: Vec::new(),
            mean: None,
            std_dev: None,
            filtered: 0,
        });
    }
    let n = kept.len() as f64;
    let mean = kept.iter().map(|(_, s)| s).sum::<f64>() / n;
    let var = kept.iter().map(|(_, s)| (s - mean).powi(2)).sum::<f64>() / n;
    let std_dev = var.sqrt();
    let tau = mean + zeta * std_dev;
    Ok(ReliableSelection {
        tau,
        indices: kept.iter().filter(|(_, s)| *s > tau).map(|(i, _)| *i).collect(),
        mean: Some(mean),
        std_dev: Some(std_dev),
        filtered: kept.len(),
    })
}

fn penalty<'t>(diff: Var<'t>, norm: NormKind) -> Result<Var<'t>> {
    match norm {
        NormKind::Squared => diff.square(),
        NormKind::Literal => {
            let eps = diff.tape().constant(Tensor::full(&diff.shape(), LITERAL_NORM_EPS));
            diff.square()?.add(eps)?.sqrt()
        }
    }
}

/// Mean box discrepancy over the selected proposals; zero when none are selected.
pub fn rdd_loss<'t>(
    student_boxes: Var<'t>,
    teacher_boxes: &Tensor,
    selection: &ReliableSelection,
    norm: NormKind,
) -> Result<Var<'t>> {
    let tape = student_boxes.tape();
    if student_boxes.shape() != teacher_boxes.shape() {
        return Err(Error::shape(
            "rdd_loss",
            format!("student {:?} vs teacher {:?}", student_boxes.shape(), teacher_boxes.shape()),
        ));
    }
    if selection.indices.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let idx = &selection.indices;
    let rows: Vec<f64> = idx.iter().flat_map(|&i| teacher_boxes.row(i).to_vec()).collect();
    let teacher = tape.constant(Tensor::matrix(idx.len(), teacher_boxes.cols(), rows)?);
    let sq = student_boxes.gather_rows(idx)?.sub(teacher)?.square()?.sum_cols()?;
    let per = match norm {
        NormKind::Squared => sq,
        NormKind::Literal => {
            let eps = tape.constant(Tensor::full(&[idx.len()], LITERAL_NORM_EPS));
            sq.add(eps)?.sqrt()?
        }
    };
    per.mean()
}

fn cosine_rows(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na.max(crate::numeric::COSINE_EPS) * nb.max(crate::numeric::COSINE_EPS))
}

/// Unordered sample pairs `(i, j)`, `i < j`, in row-major order, at most `cap` of them.
pub fn sample_pairs(n: usize, cap: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .take(cap)
        .collect()
}

/// Mean over sample pairs of the penalized change in pairwise cosine
/// similarity between student rows and teacher rows (`n × D` each).
/// Fewer than two samples give zero.
pub fn rfd_loss<'t>(
    student: Var<'t>,
    teacher: &Tensor,
    norm: NormKind,
    pair_cap: usize,
) -> Result<Var<'t>> {
    let tape = student.tape();
    if student.shape() != teacher.shape() || teacher.ndim() != 2 {
        return Err(Error::shape(
            "rfd_loss",
            format!("student {:?} vs teacher {:?}", student.shape(), teacher.shape()),
        ));
    }
    let pairs = sample_pairs(teacher.rows(), pair_cap);
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<Var<'t>> = (0..teacher.rows()).map(|i| student.row(i)).collect::<Result<_>>()?;
    let mut total: Option<Var<'t>> = None;
    for &(i, j) in &pairs {
        let target = cosine_rows(teacher.row(i), teacher.row(j));
        let diff = rows[i]
            .cosine_similarity(rows[j])?
            .sub(tape.constant(Tensor::scalar(target)))?;
        let term = penalty(diff, norm)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.expect("at least one pair").scale(1.0 / pairs.len() as f64)
}

/// Temperature-softened KL from teacher old-class logits to the student's
/// logits restricted to the same (leading) old-class columns, times `T²`,
/// averaged over proposals. No old classes gives zero.
pub fn logit_distillation_loss<'t>(
    student_logits: Var<'t>,
    teacher_logits: &Tensor,
    temperature: f64,
) -> Result<Var<'t>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let shape = student_logits.shape();
    if teacher_logits.ndim() != 2 || teacher_logits.rows() != shape[0] || teacher_logits.cols() > shape[1] {
        return Err(Error::shape(
            "logit_distillation_loss",
            format!("student {:?} vs teacher {:?}", shape, teacher_logits.shape()),
        ));
    }
    if teacher_logits.cols() == 0 {
        return Ok(student_logits.tape().constant(Tensor::scalar(0.0)));
    }
    student_logits
        .narrow(1, 0, teacher_logits.cols())?
        .kl_divergence(teacher_logits, temperature)
}
