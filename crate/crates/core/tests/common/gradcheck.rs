//! Finite-difference checks of every training loss on miniature models.

use std::collections::BTreeMap;

use incdet::detector::{
    classifier_bias, expand_classifier, forward, pgb_loss_for, supervised_loss, Model, PreparedScene, Refiner,
};
use incdet::distill::{compute_threshold, logit_distillation_loss, rdd_loss, rfd_loss, NormKind};
use incdet::numeric::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};
use incdet::trainer::{total_loss, LossSetup, LossWeights};
use incdet::Result;

use super::{mini_detector, mini_prepared};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Term {
    Pgb,
    Supervised,
    Rdd,
    Rfd,
    Logit,
    Total,
}

pub const TERMS: [Term; 6] = [Term::Pgb, Term::Supervised, Term::Rdd, Term::Rfd, Term::Logit, Term::Total];

struct TeacherView {
    boxes: Tensor,
    logits: Tensor,
    pooled: Tensor,
}

/// Student with four classes, an independently initialised two-class
/// teacher, and three scenes with pinned proposal centers.
pub struct Fixture {
    student: Model,
    teacher: Model,
    batch: Vec<PreparedScene>,
    proposals: Vec<Vec<usize>>,
    teacher_views: Vec<TeacherView>,
    norm: NormKind,
}

impl Fixture {
    /// `None` when no proposal passes the reliability threshold, which would
    /// leave the box distillation term identically zero.
    pub fn new(seed: u64) -> Option<Fixture> {
        let cfg = mini_detector();
        let root = SeededRng::new(seed);
        let mut student =
            Model::new(cfg.clone(), Refiner::Prompt, 2, 10, 4, &mut root.substream_named("student")).unwrap();
        expand_classifier(&mut student.params, 4, &mut root.substream_named("expand")).unwrap();
        // Zero-initialised biases put ReLU inputs exactly on the kink for points
        // whose local offset is zero; move to a generic point first.
        let mut jitter = root.substream_named("jitter");
        for (_, t) in student.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01 * jitter.normal());
        }
        // Tilt the old block so that some proposals rank an old class first.
        let bias = student.params.get_mut(&classifier_bias(0)).unwrap();
        bias.data_mut().copy_from_slice(&[0.08, 0.04]);
        let teacher =
            Model::new(cfg.clone(), Refiner::Prompt, 2, 10, 4, &mut root.substream_named("teacher")).unwrap();
        let batch: Vec<PreparedScene> = (0..3)
            .map(|i| mini_prepared(&[0, 1, 2, 3], seed, &format!("grad-{i}")))
            .collect();

        let run = |model: &Model, prep: &PreparedScene, fixed: Option<&[usize]>| {
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, &model.params);
            let prompts = tape.constant(model.prompts.as_ref().unwrap().active().clone());
            let out = forward(&bound, Some(prompts), prep, &cfg, Refiner::Prompt, fixed).unwrap();
            let scores = out.class_logits.softmax(1).unwrap().value();
            (out.proposal_index.clone(), scores, TeacherView {
                boxes: out.boxes.value(),
                logits: out.class_logits.value(),
                pooled: out.pooled_feature.value(),
            })
        };
        let mut proposals = Vec::new();
        let mut teacher_views = Vec::new();
        let mut selected = 0;
        for prep in &batch {
            let (idx, scores, _) = run(&student, prep, None);
            selected += compute_threshold(&scores, &[0, 1], 0.0).unwrap().indices.len();
            teacher_views.push(run(&teacher, prep, Some(&idx)).2);
            proposals.push(idx);
        }
        if selected == 0 {
            return None;
        }
        let norm = if seed.is_multiple_of(2) { NormKind::Squared } else { NormKind::Literal };
        Some(Fixture {
            student,
            teacher,
            batch,
            proposals,
            teacher_views,
            norm,
        })
    }

    fn prompts(&self) -> &Tensor {
        self.student.prompts.as_ref().unwrap().active()
    }

    /// Records `term` on `tape` for the given parameter values.
    fn record<'t>(&self, bound: &Bound<'t>, prompts: Var<'t>, term: Term) -> Result<Var<'t>> {
        let cfg = &self.student.config;
        if term == Term::Total {
            let old = [0, 1];
            let setup = LossSetup {
                task_index: 2,
                teacher: Some(&self.teacher),
                old_classes: &old,
                weights: LossWeights {
                    alpha: 10.0,
                    beta: 0.8,
                    gamma: 1.0,
                    xi: 1.0,
                },
                zeta: 0.0,
                temperature: 2.0,
                norm: self.norm,
                pair_cap: 64,
                first_supervised_class: 0,
                proposals: Some(&self.proposals),
            };
            let refs: Vec<&PreparedScene> = self.batch.iter().collect();
            let mut calls = 0;
            return Ok(total_loss(bound, Some(prompts), &refs, &self.student, &setup, &mut calls)?.0);
        }
        let mut terms = Vec::new();
        let mut pooled = Vec::new();
        for (i, prep) in self.batch.iter().enumerate() {
            let out = forward(bound, Some(prompts), prep, cfg, Refiner::Prompt, Some(&self.proposals[i]))?;
            let view = &self.teacher_views[i];
            match term {
                Term::Pgb => terms.push(pgb_loss_for(&out, prep)?),
                Term::Supervised => {
                    let pgb = pgb_loss_for(&out, prep)?;
                    terms.push(supervised_loss(&out, prep, pgb, cfg, 0)?.total)
                }
                Term::Rdd => {
                    let scores = out.class_logits.softmax(1)?.value();
                    let sel = compute_threshold(&scores, &[0, 1], 0.0)?;
                    terms.push(rdd_loss(out.boxes, &view.boxes, &sel, self.norm)?)
                }
                Term::Logit => terms.push(logit_distillation_loss(out.class_logits, &view.logits, 2.0)?),
                Term::Rfd => pooled.push(out.pooled_feature),
                Term::Total => unreachable!(),
            }
        }
        if term == Term::Rfd {
            let student = Var::concat(&pooled, 0)?;
            let rows: Vec<f64> = self.teacher_views.iter().flat_map(|v| v.pooled.data().to_vec()).collect();
            let teacher = Tensor::matrix(pooled.len(), rows.len() / pooled.len(), rows)?;
            return rfd_loss(student, &teacher, self.norm, 64);
        }
        let n = terms.len() as f64;
        let mut it = terms.into_iter();
        let first = it.next().expect("non-empty batch");
        it.try_fold(first, |a, b| a.add(b))?.scale(1.0 / n)
    }

    fn value_at(&self, params: &ParamSet, prompts: &Tensor, term: Term) -> (f64, u64) {
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, params);
        let p = tape.constant(prompts.clone());
        let v = self.record(&bound, p, term).unwrap().item();
        (v, tape.branch_signature())
    }
}

/// Outcome of checking one loss term on one fixture.
///
/// Each parameter tensor contributes one directional derivative. `relative`
/// compares the analytic and numeric vectors of these derivatives:
/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
#[derive(Clone, Debug, Default)]
pub struct TermReport {
    pub relative: f64,
    /// Largest per-tensor relative error among derivatives above 1e-3 of the
    /// vector norm; smaller ones are dominated by rounding in the loss value.
    pub worst_tensor: f64,
    pub nonzero: usize,
    pub checked: usize,
    /// Directions discarded because the step crossed a branch (ReLU, max, grouping).
    pub redrawn: usize,
}

const REDRAWS: usize = 12;
const PROMPT_KEY: &str = "<prompts>";

/// Directional derivative check along one random direction per parameter
/// tensor (and one for the prompts). Directions whose ±step pass takes a
/// different branch than the base pass are redrawn.
///
/// Returns `None` when some tensor has no smooth direction, i.e. the fixture
/// sits within one step of a kink.
pub fn check_term(fx: &Fixture, term: Term, rng: &mut SeededRng) -> Option<TermReport> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &fx.student.params, |_| true);
    let prompts = tape.param(fx.prompts());
    let loss = fx.record(&bound, prompts, term).unwrap();
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss).unwrap();
    let mut analytic: BTreeMap<String, Tensor> = bound.collect_grads(&grads);
    analytic.insert(PROMPT_KEY.into(), grads.wrt(prompts));

    let mut report = TermReport::default();
    let mut pairs = Vec::new();
    for (name, grad) in &analytic {
        let mut accepted = false;
        for _ in 0..REDRAWS {
            let dir: Vec<f64> = (0..grad.len()).map(|_| rng.normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir: Vec<f64> = dir.iter().map(|v| v / norm).collect();
            let shifted = |sign: f64| {
                let mut params = fx.student.params.clone();
                let mut prompts = fx.prompts().clone();
                let target = if name == PROMPT_KEY {
                    &mut prompts
                } else {
                    params.get_mut(name).unwrap()
                };
                for (x, d) in target.data_mut().iter_mut().zip(&dir) {
                    *x += sign * STEP * d;
                }
                fx.value_at(&params, &prompts, term)
            };
            let (plus, sig_plus) = shifted(1.0);
            let (minus, sig_minus) = shifted(-1.0);
            if sig_plus != base_sig || sig_minus != base_sig {
                report.redrawn += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let exact: f64 = grad.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
            report.checked += 1;
            if exact != 0.0 {
                report.nonzero += 1;
            }
            pairs.push((exact, numeric));
            accepted = true;
            break;
        }
        if !accepted {
            return None;
        }
    }
    let norm = |f: fn(&(f64, f64)) -> f64| pairs.iter().map(|p| f(p).powi(2)).sum::<f64>().sqrt();
    let scale = norm(|p| p.0).max(norm(|p| p.1));
    if scale > 0.0 {
        report.relative = norm(|p| p.0 - p.1) / scale;
        for (a, n) in &pairs {
            let m = a.abs().max(n.abs());
            if m > 1e-3 * scale {
                report.worst_tensor = report.worst_tensor.max((a - n).abs() / m);
            }
        }
    }
    Some(report)
}

/// Summary of [`run_suite`].
#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub fixtures_checked: usize,
    /// Fixtures dropped because a term had no smooth direction or nothing
    /// was selected for box distillation.
    pub fixtures_skipped: usize,
    /// Largest error over all checked fixtures, per term.
    pub worst: BTreeMap<Term, TermReport>,
    pub failures: Vec<String>,
}

/// Checks every term on fixtures seeded 0, 1, ... until `wanted` fixtures
/// were checked in full or `wanted * 2` seeds were tried.
pub fn run_suite(wanted: usize) -> SuiteReport {
    let mut out = SuiteReport::default();
    for seed in 0..(2 * wanted) as u64 {
        if out.fixtures_checked == wanted {
            break;
        }
        let Some(fx) = Fixture::new(seed) else {
            out.fixtures_skipped += 1;
            continue;
        };
        let mut rng = SeededRng::new(seed).substream_named("directions");
        let reports: Option<Vec<(Term, TermReport)>> =
            TERMS.iter().map(|&t| check_term(&fx, t, &mut rng).map(|r| (t, r))).collect();
        let Some(reports) = reports else {
            out.fixtures_skipped += 1;
            continue;
        };
        out.fixtures_checked += 1;
        for (term, r) in reports {
            if r.relative >= TOLERANCE || r.worst_tensor >= TOLERANCE || r.nonzero == 0 {
                out.failures.push(format!("seed {seed} {term:?}: {r:?}"));
            }
            let w = out.worst.entry(term).or_default();
            w.relative = w.relative.max(r.relative);
            w.worst_tensor = w.worst_tensor.max(r.worst_tensor);
            w.checked += r.checked;
            w.nonzero += r.nonzero;
            w.redrawn += r.redrawn;
        }
    }
    out
}
