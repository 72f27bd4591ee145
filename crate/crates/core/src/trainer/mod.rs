//! Incremental training: the combined objective, per-task training with a
//! frozen teacher, baselines, and metrics documents.

mod config;
mod report;

pub use config::{ExperimentConfig, OptimizerConfig, Variant};
pub use report::{
    ablation_summary, comparison_csv, comparison_rows, comparison_text, ComparisonRow,
};

use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::detector::{
    classifier_bias, classifier_weight, class_blocks, expand_classifier, forward, pgb_loss_for,
    prepare_scene, supervised_loss, Model, PreparedScene, Refiner,
};
use crate::distill::{compute_threshold, logit_distillation_loss, rdd_loss, rfd_loss, NormKind};
use crate::error::{Error, Result};
use crate::eval::{evaluate, forgetting_delta, MetricsReport};
use crate::numeric::{Adam, Bound, SeededRng, Tape, Tensor, Var};
use crate::scene::TaskStream;

/// IoU threshold used for every reported AP and recall.
pub const EVAL_IOU: f64 = 0.25;

/// One task with its scenes already prepared for the detector.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub index: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<PreparedScene>,
    pub eval: Vec<PreparedScene>,
}

#[derive(Clone, Debug)]
pub struct PreparedStream {
    pub tasks: Vec<PreparedTask>,
}

impl PreparedStream {
    pub fn new(stream: &TaskStream, cfg: &ExperimentConfig) -> Result<Self> {
        stream.validate()?;
        let prep = |scenes: &[crate::scene::Scene]| -> Result<Vec<PreparedScene>> {
            scenes.iter().map(|s| prepare_scene(s, &cfg.detector)).collect()
        };
        let tasks = stream
            .tasks
            .iter()
            .map(|t| {
                Ok(PreparedTask {
                    index: t.index,
                    class_ids: t.class_ids.clone(),
                    train: prep(&t.train)?,
                    eval: prep(&t.eval)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedStream { tasks })
    }

    /// Eval scenes of tasks `1..=t`.
    pub fn eval_up_to(&self, t: usize) -> Vec<&PreparedScene> {
        self.tasks.iter().take(t).flat_map(|k| k.eval.iter()).collect()
    }
}

/// Effective loss weights for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
}

/// Everything the objective needs besides the student and the batch.
pub struct LossSetup<'a> {
    /// 1-based index of the task being trained.
    pub task_index: usize,
    pub teacher: Option<&'a Model>,
    /// Classes the teacher knows; their columns lead the student's classifier.
    pub old_classes: &'a [usize],
    pub weights: LossWeights,
    pub zeta: f64,
    pub temperature: f64,
    pub norm: NormKind,
    pub pair_cap: usize,
    /// First classifier column the supervised class term normalises over.
    pub first_supervised_class: usize,
    /// Fixed proposal centers per batch scene instead of sampling them.
    pub proposals: Option<&'a [Vec<usize>]>,
}

/// Values of the objective's parts for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub supervised: f64,
    pub rdd: f64,
    pub rfd: f64,
    pub logit: f64,
    /// Proposals selected for box distillation across the batch.
    pub selected: usize,
}

struct TeacherOutput {
    boxes: Tensor,
    logits: Tensor,
    pooled: Tensor,
}

fn teacher_forward(teacher: &Model, prep: &PreparedScene, index: &[usize]) -> Result<TeacherOutput> {
    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &teacher.params);
    let prompts = teacher.prompts.as_ref().map(|p| tape.constant(p.active().clone()));
    let out = forward(&bound, prompts, prep, &teacher.config, teacher.refiner, Some(index))?;
    Ok(TeacherOutput {
        boxes: out.boxes.value(),
        logits: out.class_logits.value(),
        pooled: out.pooled_feature.value(),
    })
}

fn batch_mean<'t>(tape: &'t Tape, terms: Vec<Var<'t>>) -> Result<Var<'t>> {
    let n = terms.len();
    let mut it = terms.into_iter();
    let Some(first) = it.next() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    it.try_fold(first, |acc, v| acc.add(v))?.scale(1.0 / n as f64)
}

/// The training objective for one batch:
/// `alpha·L_S + beta·L_RDD + gamma·L_RFD + xi·L_Dis`.
///
/// On task 1 only the supervised term is built. A distillation term is only
/// evaluated when its weight is positive; `distill_calls` counts those
/// evaluations. Teacher outputs come from a separate tape and are constants.
pub fn total_loss<'t>(
    bound: &Bound<'t>,
    prompts: Option<Var<'t>>,
    batch: &[&PreparedScene],
    model: &Model,
    setup: &LossSetup<'_>,
    distill_calls: &mut usize,
) -> Result<(Var<'t>, LossBreakdown)> {
    let tape = bound.get("backbone.point.w")?.tape();
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let w = setup.weights;
    let distill = setup.task_index > 1;
    if distill && setup.teacher.is_none() {
        return Err(Error::State(format!("task {} needs a teacher model", setup.task_index)));
    }
    let use_rdd = distill && w.beta > 0.0;
    let use_rfd = distill && w.gamma > 0.0;
    let use_logit = distill && w.xi > 0.0;

    let mut supervised = Vec::with_capacity(batch.len());
    let mut rdd = Vec::new();
    let mut logit = Vec::new();
    let mut pooled_student = Vec::new();
    let mut pooled_teacher = Vec::new();
    let mut selected = 0;
    if setup.proposals.is_some_and(|p| p.len() != batch.len()) {
        return Err(Error::Input("one proposal index list per batch scene required".into()));
    }
    for (i, prep) in batch.iter().enumerate() {
        let fixed = setup.proposals.map(|p| p[i].as_slice());
        let out = forward(bound, prompts, prep, &model.config, model.refiner, fixed)?;
        let pgb = pgb_loss_for(&out, prep)?;
        supervised.push(supervised_loss(&out, prep, pgb, &model.config, setup.first_supervised_class)?.total);
        if !(use_rdd || use_rfd || use_logit) {
            continue;
        }
        let teacher = setup.teacher.expect("checked above");
        let t_out = teacher_forward(teacher, prep, &out.proposal_index)?;
        if use_rdd {
            *distill_calls += 1;
            let scores = out.class_logits.softmax(1)?.value();
            let sel = compute_threshold(&scores, setup.old_classes, setup.zeta)?;
            selected += sel.indices.len();
            rdd.push(rdd_loss(out.boxes, &t_out.boxes, &sel, setup.norm)?);
        }
        if use_logit {
            *distill_calls += 1;
            logit.push(logit_distillation_loss(out.class_logits, &t_out.logits, setup.temperature)?);
        }
        if use_rfd {
            pooled_student.push(out.pooled_feature);
            pooled_teacher.push(t_out.pooled);
        }
    }

    let l_s = batch_mean(tape, supervised)?;
    let mut total = l_s.scale(w.alpha)?;
    let mut parts = LossBreakdown {
        supervised: l_s.item(),
        selected,
        ..LossBreakdown::default()
    };
    if use_rdd {
        let v = batch_mean(tape, rdd)?;
        parts.rdd = v.item();
        total = total.add(v.scale(w.beta)?)?;
    }
    if use_rfd {
        *distill_calls += 1;
        let student = Var::concat(&pooled_student, 0)?;
        let rows: Vec<f64> = pooled_teacher.iter().flat_map(|t| t.data().to_vec()).collect();
        let teacher = Tensor::matrix(pooled_teacher.len(), pooled_teacher[0].cols(), rows)?;
        let v = rfd_loss(student, &teacher, setup.norm, setup.pair_cap)?;
        parts.rfd = v.item();
        total = total.add(v.scale(w.gamma)?)?;
    }
    if use_logit {
        let v = batch_mean(tape, logit)?;
        parts.logit = v.item();
        total = total.add(v.scale(w.xi)?)?;
    }
    parts.total = total.item();
    Ok((total, parts))
}

/// Metrics after one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    pub classes_seen: Vec<usize>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub metrics: MetricsReport,
    /// Objective of the last training batch.
    pub final_loss: LossBreakdown,
}

/// Model, teacher and history of an experiment in progress.
#[derive(Clone, Debug)]
pub struct RunState {
    pub model: Model,
    pub teacher: Option<Model>,
    /// Tasks completed so far.
    pub tasks_done: usize,
    pub classes_seen: Vec<usize>,
    pub base_classes: Vec<usize>,
    pub history: Vec<TaskReport>,
    /// Number of distillation-term evaluations performed.
    pub distill_calls: usize,
}

impl RunState {
    pub fn new(cfg: &ExperimentConfig, refiner: Refiner, first_classes: usize) -> Result<Self> {
        let model = Model::new(
            cfg.detector.clone(),
            refiner,
            first_classes,
            cfg.prompts,
            cfg.prompt_capacity,
            &mut SeededRng::new(cfg.seed).substream_named("model"),
        )?;
        Ok(RunState {
            model,
            teacher: None,
            tasks_done: 0,
            classes_seen: Vec::new(),
            base_classes: Vec::new(),
            history: Vec::new(),
            distill_calls: 0,
        })
    }
}

/// Which parameters a variant trains on a given task.
fn trainable_filter(variant: Variant, task_index: usize, old_blocks: usize) -> impl Fn(&str) -> bool {
    let new_w = classifier_weight(old_blocks);
    let new_b = classifier_bias(old_blocks);
    let old: Vec<String> = (0..old_blocks)
        .flat_map(|k| [classifier_weight(k), classifier_bias(k)])
        .collect();
    move |name: &str| {
        if task_index == 1 {
            return true;
        }
        match variant {
            Variant::FreezeAdd => name == new_w || name == new_b,
            Variant::Finetune => !old.iter().any(|o| o == name),
            _ => true,
        }
    }
}

fn weights_at(cfg: &ExperimentConfig, variant: Variant, step: usize, total: usize) -> LossWeights {
    let ramp_steps = cfg.ramp_fraction * total as f64;
    let ramp = if ramp_steps <= 0.0 {
        1.0
    } else {
        (step as f64 / ramp_steps).min(1.0)
    };
    LossWeights {
        alpha: cfg.alpha,
        beta: if variant.uses_rdd() { cfg.beta * ramp } else { 0.0 },
        gamma: if variant.uses_rfd() { cfg.gamma * ramp } else { 0.0 },
        xi: if variant.uses_logit_distillation() { cfg.xi * ramp } else { 0.0 },
    }
}

/// Detections of `model` on every scene, scored against their boxes.
pub fn evaluate_model(
    model: &Model,
    scenes: &[&PreparedScene],
    base: &[usize],
    novel: &[usize],
    objectness_threshold: f64,
) -> Result<MetricsReport> {
    let mut detections = Vec::with_capacity(scenes.len());
    let mut truth = Vec::with_capacity(scenes.len());
    for s in scenes {
        detections.push(model.detect(s, objectness_threshold)?);
        truth.push(s.boxes.clone());
    }
    evaluate(&detections, &truth, base, novel, EVAL_IOU)
}

/// Trains `state` on one task and appends its report.
///
/// Steps: grow the classifier for the new classes, restore prompts from the
/// previous snapshot, train, archive the prompts, keep a frozen copy as the
/// next teacher, and evaluate on the eval scenes of every task seen so far.
pub fn run_task(
    state: &mut RunState,
    task: &PreparedTask,
    eval_scenes: &[&PreparedScene],
    cfg: &ExperimentConfig,
    variant: Variant,
) -> Result<TaskReport> {
    let t = state.tasks_done + 1;
    if task.class_ids.iter().any(|c| state.classes_seen.contains(c)) {
        return Err(Error::Config(format!("task {t} repeats classes seen earlier")));
    }
    let root = SeededRng::new(cfg.seed);
    let old_classes = state.classes_seen.clone();
    let old_blocks = class_blocks(&state.model.params).len();
    if t > 1 {
        if state.teacher.is_none() {
            return Err(Error::State(format!("task {t} started without a teacher")));
        }
        let total = old_classes.len() + task.class_ids.len();
        expand_classifier(
            &mut state.model.params,
            total,
            &mut root.substream_named(&format!("expand/{t}")),
        )?;
    }
    if let Some(pool) = state.model.prompts.as_mut() {
        pool.select(t)?;
    }
    let expected: Vec<usize> = old_classes.iter().chain(&task.class_ids).copied().collect();
    if state.model.num_classes() != expected.len() || expected.iter().enumerate().any(|(i, c)| i != *c) {
        return Err(Error::Config(format!(
            "classes {expected:?} must be the consecutive ids 0..{}",
            expected.len()
        )));
    }

    let trainable = trainable_filter(variant, t, if t == 1 { 0 } else { old_blocks });
    let prompts_trainable = t == 1 || !matches!(variant, Variant::FreezeAdd);
    let n = task.train.len();
    let bs = cfg.optimizer.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = steps_per_epoch * cfg.optimizer.epochs;
    let mut adam = Adam::new(cfg.optimizer.lr, total_steps);
    let teacher = state.teacher.clone();
    let mut last = LossBreakdown::default();
    let mut step = 0;
    for epoch in 0..cfg.optimizer.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.substream_named(&format!("order/{t}/{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(bs) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &task.train[i]).collect();
            let setup = LossSetup {
                task_index: t,
                teacher: teacher.as_ref(),
                old_classes: &old_classes,
                weights: weights_at(cfg, variant, step, total_steps),
                zeta: cfg.zeta,
                temperature: cfg.temperature,
                norm: cfg.norm,
                pair_cap: cfg.pair_cap,
                first_supervised_class: if variant == Variant::FreezeAdd {
                    old_classes.len()
                } else {
                    0
                },
                proposals: None,
            };
            let tape = Tape::new();
            let bound = Bound::new(&tape, &state.model.params, &trainable);
            let prompt_var = state
                .model
                .prompts
                .as_ref()
                .map(|p| tape.leaf(p.active().clone(), prompts_trainable));
            let (loss, parts) = total_loss(
                &bound,
                prompt_var,
                &batch,
                &state.model,
                &setup,
                &mut state.distill_calls,
            )?;
            let grads = tape.backward(loss)?;
            let param_grads = bound.collect_grads(&grads);
            let prompt_grad = prompt_var.filter(|v| v.requires_grad()).map(|v| grads.wrt(v));
            let model = &mut state.model;
            let updates = model
                .params
                .iter_mut()
                .filter_map(|(name, p)| param_grads.get(name).map(|g| (name, p, g)));
            match (model.prompts.as_mut(), prompt_grad.as_ref()) {
                (Some(pool), Some(g)) => {
                    adam.step(updates.chain(std::iter::once(("prompt.active", pool.active_mut(), g))))?
                }
                _ => adam.step(updates)?,
            }
            last = parts;
            step += 1;
        }
        debug!(
            "task {t} epoch {epoch}: total {:.4} sup {:.4} rdd {:.4} rfd {:.4} dis {:.4}",
            last.total, last.supervised, last.rdd, last.rfd, last.logit
        );
    }

    if let Some(pool) = state.model.prompts.as_mut() {
        pool.store(t)?;
    }
    state.teacher = Some(state.model.clone());
    state.classes_seen.extend(task.class_ids.iter().copied());
    if t == 1 {
        state.base_classes = task.class_ids.clone();
    }
    state.tasks_done = t;
    let novel: Vec<usize> = state
        .classes_seen
        .iter()
        .copied()
        .filter(|c| !state.base_classes.contains(c))
        .collect();
    let mut metrics = evaluate_model(
        &state.model,
        eval_scenes,
        &state.base_classes,
        &novel,
        cfg.objectness_threshold,
    )?;
    if let Some(prev) = state.history.last() {
        metrics.forgetting = forgetting_delta(&prev.metrics, &metrics);
    }
    info!(
        "{} task {t}: base mAP {:?} novel mAP {:?}",
        variant.name(),
        metrics.base_map,
        metrics.novel_map
    );
    let report = TaskReport {
        task: t,
        classes_seen: state.classes_seen.clone(),
        base_classes: state.base_classes.clone(),
        novel_classes: novel,
        metrics,
        final_loss: last,
    };
    state.history.push(report.clone());
    Ok(report)
}

/// Trains the first task. The result depends only on the refiner, so it can
/// be shared by every variant that uses the same refiner.
pub fn first_task(cfg: &ExperimentConfig, data: &PreparedStream, refiner: Refiner) -> Result<RunState> {
    cfg.validate()?;
    let task = data
        .tasks
        .first()
        .ok_or_else(|| Error::Input("stream has no tasks".into()))?;
    let mut state = RunState::new(cfg, refiner, task.class_ids.len())?;
    let variant = match refiner {
        Refiner::Prompt => Variant::Full,
        Refiner::Vote => Variant::NoPgb,
    };
    run_task(&mut state, task, &data.eval_up_to(1), cfg, variant)?;
    Ok(state)
}

/// Runs the remaining tasks with `cfg.variant`.
pub fn continue_experiment(mut state: RunState, cfg: &ExperimentConfig, data: &PreparedStream) -> Result<RunState> {
    if state.model.refiner != cfg.variant.refiner() {
        return Err(Error::Config(format!(
            "variant {} cannot continue a {:?} model",
            cfg.variant.name(),
            state.model.refiner
        )));
    }
    for (k, task) in data.tasks.iter().enumerate().skip(state.tasks_done) {
        run_task(&mut state, task, &data.eval_up_to(k + 1), cfg, cfg.variant)?;
    }
    Ok(state)
}

/// Single run over all classes and all training scenes of the stream.
pub fn run_joint(cfg: &ExperimentConfig, data: &PreparedStream) -> Result<RunState> {
    cfg.validate()?;
    let first = data
        .tasks
        .first()
        .ok_or_else(|| Error::Input("stream has no tasks".into()))?;
    let pooled = PreparedTask {
        index: 1,
        class_ids: data.tasks.iter().flat_map(|t| t.class_ids.iter().copied()).collect(),
        train: data.tasks.iter().flat_map(|t| t.train.iter().cloned()).collect(),
        eval: Vec::new(),
    };
    let mut state = RunState::new(cfg, Variant::Joint.refiner(), pooled.class_ids.len())?;
    run_task(&mut state, &pooled, &data.eval_up_to(data.tasks.len()), cfg, Variant::Joint)?;
    // Report against the stream's own base/novel split.
    let report = state.history.last_mut().expect("one report");
    let base = first.class_ids.clone();
    let novel: Vec<usize> = pooled.class_ids.iter().copied().filter(|c| !base.contains(c)).collect();
    report.metrics = crate::eval::aggregate_report(
        &report.metrics.per_class_ap,
        &report.metrics.per_class_recall,
        &base,
        &novel,
    )?;
    report.base_classes = base.clone();
    report.novel_classes = novel;
    state.base_classes = base;
    Ok(state)
}

/// Full experiment for `cfg.variant`.
pub fn run_experiment(cfg: &ExperimentConfig, data: &PreparedStream) -> Result<RunState> {
    match cfg.variant {
        Variant::Joint => run_joint(cfg, data),
        v => continue_experiment(first_task(cfg, data, v.refiner())?, cfg, data),
    }
}

/// Baseline runs share the experiment machinery; this picks the variant.
pub fn run_baseline(variant: Variant, data: &PreparedStream, cfg: &ExperimentConfig) -> Result<Vec<TaskReport>> {
    let cfg = ExperimentConfig {
        variant,
        ..cfg.clone()
    };
    Ok(run_experiment(&cfg, data)?.history)
}

pub const METRICS_FORMAT: &str = "incdet-metrics";
pub const METRICS_VERSION: u32 = 1;

/// The persisted result of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsDocument {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskReport>,
}

impl MetricsDocument {
    pub fn new(cfg: &ExperimentConfig, tasks: Vec<TaskReport>) -> Self {
        MetricsDocument {
            format: METRICS_FORMAT.into(),
            version: METRICS_VERSION,
            variant: cfg.variant,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            tasks,
        }
    }

    pub fn final_report(&self) -> Option<&TaskReport> {
        self.tasks.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: MetricsDocument =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if doc.format != METRICS_FORMAT || doc.version != METRICS_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported metrics document {} v{}", doc.format, doc.version),
            ));
        }
        Ok(doc)
    }
}
