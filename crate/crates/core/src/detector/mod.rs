//! A small vote-style 3D detector: point-MLP backbone over farthest-point
//! seeds, center refinement, proposal aggregation and detection heads.

mod checkpoint;
mod decode;
mod fps;
mod loss;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use decode::{decode_and_nms, Detection};
pub use fps::farthest_point_sample;
pub use loss::{supervised_loss, SupervisedTerms};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};
use crate::prompt::{self, PromptPool};
use crate::scene::{seed_center_targets, Box3D, Scene};

/// Architecture and supervised-loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Points kept per scene (P).
    pub num_points: usize,
    /// Seeds per scene (M).
    pub num_seeds: usize,
    /// Seed feature width (D).
    pub feature_dim: usize,
    /// Proposals per scene (K).
    pub num_proposals: usize,
    /// Attention heads (H).
    pub heads: usize,
    pub neighbor_radius: f64,
    pub neighbor_cap: usize,
    pub point_hidden: usize,
    pub seed_hidden: usize,
    pub proposal_hidden: usize,
    /// Radius for grouping refined centers into a proposal.
    pub group_radius: f64,
    /// Proposal is positive when its center lies within this distance of a GT center.
    pub positive_radius: f64,
    /// Proposal is negative when every GT center is farther than this.
    pub negative_radius: f64,
    pub objectness_weight: f64,
    pub box_weight: f64,
    pub class_weight: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            num_points: 2048,
            num_seeds: 64,
            feature_dim: 32,
            num_proposals: 16,
            heads: 2,
            neighbor_radius: 0.4,
            neighbor_cap: 32,
            point_hidden: 32,
            seed_hidden: 64,
            proposal_hidden: 64,
            group_radius: 0.3,
            positive_radius: 0.3,
            negative_radius: 0.6,
            objectness_weight: 0.5,
            box_weight: 1.0,
            class_weight: 0.1,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_points", self.num_points),
            ("num_seeds", self.num_seeds),
            ("feature_dim", self.feature_dim),
            ("num_proposals", self.num_proposals),
            ("heads", self.heads),
            ("neighbor_cap", self.neighbor_cap),
            ("point_hidden", self.point_hidden),
            ("seed_hidden", self.seed_hidden),
            ("proposal_hidden", self.proposal_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.num_seeds > self.num_points {
            return Err(Error::Config("num_seeds exceeds num_points".into()));
        }
        if self.num_proposals > self.num_seeds {
            return Err(Error::Config("num_proposals exceeds num_seeds".into()));
        }
        if !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config("feature_dim must be divisible by heads".into()));
        }
        let radii = [self.neighbor_radius, self.group_radius, self.positive_radius];
        if radii.iter().any(|r| !(*r > 0.0)) || self.negative_radius < self.positive_radius {
            return Err(Error::Config("radii must be positive and negative_radius >= positive_radius".into()));
        }
        let w = [self.objectness_weight, self.box_weight, self.class_weight];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// How seeds are moved toward object centers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refiner {
    /// Prompt-guided attention followed by MLP and convolution residuals.
    Prompt,
    /// Plain per-seed vote MLP.
    Vote,
}

fn he(rng: &mut SeededRng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let s = gain * (2.0 / rows as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| s * rng.normal()).collect()).unwrap()
}

fn linear(params: &mut ParamSet, name: &str, rows: usize, cols: usize, gain: f64, rng: &mut SeededRng) {
    params.insert(format!("{name}.w"), he(rng, rows, cols, gain));
    params.insert(format!("{name}.b"), Tensor::zeros(&[cols]));
}

fn apply<'t>(bound: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(bound.get(&format!("{name}.w"))?)?
        .add_bias(bound.get(&format!("{name}.b"))?)
}

/// Parameter name of classifier block `k` (0-based, one block per task).
pub fn classifier_weight(k: usize) -> String {
    format!("cls.w.{k}")
}

pub fn classifier_bias(k: usize) -> String {
    format!("cls.b.{k}")
}

/// Widths of the classifier blocks, in order.
pub fn class_blocks(params: &ParamSet) -> Vec<usize> {
    (0..)
        .map_while(|k| params.get(&classifier_weight(k)).ok().map(|w| w.cols()))
        .collect()
}

pub fn num_classes(params: &ParamSet) -> usize {
    class_blocks(params).iter().sum()
}

/// Fresh detector parameters with a single classifier block of `classes` outputs.
pub fn init_params(
    cfg: &DetectorConfig,
    refiner: Refiner,
    classes: usize,
    rng: &mut SeededRng,
) -> Result<ParamSet> {
    cfg.validate()?;
    if classes == 0 {
        return Err(Error::Config("detector needs at least one class".into()));
    }
    let mut p = ParamSet::new();
    let (d, hp, hs, hq) = (cfg.feature_dim, cfg.point_hidden, cfg.seed_hidden, cfg.proposal_hidden);
    linear(&mut p, "backbone.point", 4, hp, 1.0, rng);
    linear(&mut p, "backbone.seed1", hp + 3, hs, 1.0, rng);
    linear(&mut p, "backbone.seed2", hs, d, 0.5, rng);
    match refiner {
        Refiner::Prompt => prompt::init_params(&mut p, d, cfg.heads, rng)?,
        Refiner::Vote => {
            linear(&mut p, "vote.mlp1", d, prompt::REFINE_HIDDEN, 1.0, rng);
            linear(&mut p, "vote.mlp2", prompt::REFINE_HIDDEN, 3, 0.05, rng);
        }
    }
    linear(&mut p, "proposal.point", d + 6, hq, 1.0, rng);
    linear(&mut p, "proposal.agg", hq, hq, 1.0, rng);
    linear(&mut p, "head.obj", hq, 1, 0.1, rng);
    linear(&mut p, "head.box", hq, 6, 0.1, rng);
    p.insert(classifier_weight(0), he(rng, hq, classes, 0.1));
    p.insert(classifier_bias(0), Tensor::zeros(&[classes]));
    Ok(p)
}

/// Grows the classifier to `new_total` outputs by appending a fresh block.
/// Existing blocks are left untouched.
pub fn expand_classifier(params: &mut ParamSet, new_total: usize, rng: &mut SeededRng) -> Result<()> {
    let blocks = class_blocks(params);
    let current: usize = blocks.iter().sum();
    if new_total <= current {
        return Err(Error::Contract(format!(
            "classifier cannot shrink or stay put: {current} -> {new_total}"
        )));
    }
    let hq = params.get(&classifier_weight(0))?.rows();
    let k = blocks.len();
    let add = new_total - current;
    params.insert(classifier_weight(k), he(rng, hq, add, 0.1));
    params.insert(classifier_bias(k), Tensor::zeros(&[add]));
    Ok(())
}

/// Geometry computed once per scene: kept points, seeds, and seed neighborhoods.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub scene_id: String,
    pub points: Vec<[f64; 3]>,
    /// Indices into `points` of the farthest-point seeds.
    pub seed_index: Vec<usize>,
    pub seeds: Vec<[f64; 3]>,
    neighbor_rows: Tensor,
    neighbor_groups: Vec<Vec<usize>>,
    pub center_targets: Vec<[f64; 3]>,
    pub center_mask: Vec<bool>,
    pub boxes: Vec<Box3D>,
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Seeds and neighborhoods for an explicit point list (no subsampling).
pub fn prepare_points(
    scene_id: &str,
    points: Vec<[f64; 3]>,
    boxes: Vec<Box3D>,
    cfg: &DetectorConfig,
) -> Result<PreparedScene> {
    if points.len() < cfg.num_seeds {
        return Err(Error::Input(format!(
            "scene {scene_id} has {} points, need at least {}",
            points.len(),
            cfg.num_seeds
        )));
    }
    let seed_index = farthest_point_sample(&points, cfg.num_seeds);
    let seeds: Vec<[f64; 3]> = seed_index.iter().map(|&i| points[i]).collect();
    let r = cfg.neighbor_radius;
    let mut rows = Vec::new();
    let mut groups = Vec::with_capacity(seeds.len());
    for s in &seeds {
        let mut near: Vec<(f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(j, p)| (dist2(p, s), j))
            .filter(|(d, _)| *d <= r * r)
            .collect();
        near.sort_by(|a, b| {
            a.0.total_cmp(&b.0).then_with(|| {
                let (p, q) = (points[a.1], points[b.1]);
                p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(p[2].total_cmp(&q[2]))
            })
        });
        if near.len() > cfg.neighbor_cap {
            // Spread the kept neighbours over the whole ball.
            let n = near.len();
            near = (0..cfg.neighbor_cap).map(|i| near[i * n / cfg.neighbor_cap]).collect();
        }
        let start = rows.len() / 4;
        for (_, j) in &near {
            let p = points[*j];
            rows.extend_from_slice(&[(p[0] - s[0]) / r, (p[1] - s[1]) / r, (p[2] - s[2]) / r, p[2]]);
        }
        groups.push((start..start + near.len()).collect());
    }
    let n_rows = rows.len() / 4;
    let scene_stub = Scene {
        scene_id: scene_id.to_string(),
        points: Vec::new(),
        point_instance: Vec::new(),
        boxes: boxes.clone(),
    };
    let (center_targets, center_mask) = seed_center_targets(&scene_stub, &seeds);
    Ok(PreparedScene {
        scene_id: scene_id.to_string(),
        points,
        seed_index,
        seeds,
        neighbor_rows: Tensor::matrix(n_rows, 4, rows)?,
        neighbor_groups: groups,
        center_targets,
        center_mask,
        boxes,
    })
}

/// Keeps `num_points` points (a fixed random subset per scene id when the
/// scene is larger) and prepares them.
pub fn prepare_scene(scene: &Scene, cfg: &DetectorConfig) -> Result<PreparedScene> {
    let points = if scene.points.len() > cfg.num_points {
        let mut idx: Vec<usize> = (0..scene.points.len()).collect();
        SeededRng::new(0)
            .substream_named(&scene.scene_id)
            .shuffle(&mut idx);
        idx.truncate(cfg.num_points);
        idx.sort_unstable();
        idx.iter().map(|&i| scene.points[i]).collect()
    } else {
        scene.points.clone()
    };
    prepare_points(&scene.scene_id, points, scene.boxes.clone(), cfg)
}

/// Everything one forward pass produces, still on the tape.
pub struct Forward<'t> {
    /// Seed coordinates `z` (`M × 3`, constant).
    pub seeds: Var<'t>,
    /// Seed features `f` (`M × D`).
    pub features: Var<'t>,
    /// Intermediate refined centers `ż`.
    pub votes_mid: Var<'t>,
    /// Refined centers `z̈`.
    pub votes: Var<'t>,
    /// Attention weights per head; absent for the vote refiner.
    pub attention: Option<Vec<Var<'t>>>,
    /// Seed indices chosen as proposal centers.
    pub proposal_index: Vec<usize>,
    /// Seeds aggregated into each proposal.
    pub proposal_groups: Vec<Vec<usize>>,
    /// Proposal cluster centers (`K × 3`).
    pub centers: Var<'t>,
    pub objectness_logits: Var<'t>,
    pub class_logits: Var<'t>,
    /// Predicted box centers (`K × 3`).
    pub box_centers: Var<'t>,
    /// Predicted log-sizes (`K × 3`).
    pub box_log_sizes: Var<'t>,
    /// Decoded boxes `[center, size]` (`K × 6`).
    pub boxes: Var<'t>,
    pub proposal_features: Var<'t>,
    /// Mean of the seed features (`1 × D`).
    pub pooled_feature: Var<'t>,
}

/// Runs the detector on a prepared scene.
///
/// `proposal_index` overrides proposal-center sampling so that a second model
/// can produce proposals aligned index-for-index with a first one.
pub fn forward<'t>(
    bound: &Bound<'t>,
    prompts: Option<Var<'t>>,
    prep: &PreparedScene,
    cfg: &DetectorConfig,
    refiner: Refiner,
    proposal_index: Option<&[usize]>,
) -> Result<Forward<'t>> {
    let tape = bound.get("backbone.point.w")?.tape();
    let m = prep.seeds.len();
    let seeds = tape.constant(Tensor::from_rows(&prep.seeds));
    let local = apply(bound, "backbone.point", tape.constant(prep.neighbor_rows.clone()))?
        .relu()?
        .segment_max(&prep.neighbor_groups)?;
    let features = apply(
        bound,
        "backbone.seed1",
        Var::concat(&[local, seeds], 1)?,
    )?
    .relu()?;
    let features = apply(bound, "backbone.seed2", features)?;

    let (votes_mid, votes, attention) = match refiner {
        Refiner::Prompt => {
            let att = prompt::prompting_attention(features, prompts, bound, cfg.heads)?;
            let (mid, refined) = prompt::refine_centers(seeds, &att.heads, bound)?;
            (mid, refined, Some(att.weights))
        }
        Refiner::Vote => {
            let offset = apply(bound, "vote.mlp1", features)?.relu()?;
            let refined = seeds.add(apply(bound, "vote.mlp2", offset)?)?;
            (refined, refined, None)
        }
    };

    let vote_values = votes.value();
    let vote_rows: Vec<[f64; 3]> = (0..m)
        .map(|i| {
            let r = vote_values.row(i);
            [r[0], r[1], r[2]]
        })
        .collect();
    let index = match proposal_index {
        Some(idx) => {
            if idx.iter().any(|&i| i >= m) || idx.is_empty() {
                return Err(Error::Contract("proposal index out of range".into()));
            }
            idx.to_vec()
        }
        None => farthest_point_sample(&vote_rows, cfg.num_proposals.min(m)),
    };
    let radius2 = cfg.group_radius * cfg.group_radius;
    let mut members = Vec::new();
    let mut owners = Vec::new();
    let mut groups = Vec::with_capacity(index.len());
    let mut row_groups = Vec::with_capacity(index.len());
    for (k, &c) in index.iter().enumerate() {
        let centre = vote_rows[c];
        let group: Vec<usize> = (0..m)
            .filter(|&j| j == c || dist2(&vote_rows[j], &centre) <= radius2)
            .collect();
        let start = members.len();
        members.extend_from_slice(&group);
        owners.extend(std::iter::repeat_n(k, group.len()));
        row_groups.push((start..members.len()).collect::<Vec<_>>());
        groups.push(group);
    }
    let centers = votes.gather_rows(&index)?;
    let inv_r = 1.0 / cfg.group_radius;
    let owner_centers = centers.gather_rows(&owners)?;
    let rows = Var::concat(
        &[
            features.gather_rows(&members)?,
            votes.gather_rows(&members)?.sub(owner_centers)?.scale(inv_r)?,
            seeds.gather_rows(&members)?.sub(owner_centers)?.scale(inv_r)?,
        ],
        1,
    )?;
    let pooled = apply(bound, "proposal.point", rows)?
        .relu()?
        .segment_max(&row_groups)?;
    let proposal_features = apply(bound, "proposal.agg", pooled)?.relu()?;

    let objectness_logits = apply(bound, "head.obj", proposal_features)?;
    let box_params = apply(bound, "head.box", proposal_features)?;
    let box_centers = centers.add(box_params.narrow(1, 0, 3)?)?;
    let box_log_sizes = box_params.narrow(1, 3, 3)?;
    let boxes = Var::concat(&[box_centers, box_log_sizes.exp()?], 1)?;
    let mut blocks = Vec::new();
    for k in 0.. {
        if !bound.has(&classifier_weight(k)) {
            break;
        }
        blocks.push(
            proposal_features
                .matmul(bound.get(&classifier_weight(k))?)?
                .add_bias(bound.get(&classifier_bias(k))?)?,
        );
    }
    if blocks.is_empty() {
        return Err(Error::State("detector has no classifier".into()));
    }
    let class_logits = if blocks.len() == 1 {
        blocks[0]
    } else {
        Var::concat(&blocks, 1)?
    };
    let pooled_feature = features
        .segment_mean(&[(0..m).collect()])?;

    Ok(Forward {
        seeds,
        features,
        votes_mid,
        votes,
        attention,
        proposal_index: index,
        proposal_groups: groups,
        centers,
        objectness_logits,
        class_logits,
        box_centers,
        box_log_sizes,
        boxes,
        proposal_features,
        pooled_feature,
    })
}

/// Center-refinement loss of a forward pass against the scene's seed targets.
pub fn pgb_loss_for<'t>(out: &Forward<'t>, prep: &PreparedScene) -> Result<Var<'t>> {
    prompt::pgb_loss(out.votes, &prep.center_targets, &prep.center_mask)
}

/// Plain-value view of a forward pass.
#[derive(Clone, Debug)]
pub struct ProposalSet {
    /// Cluster centers, `K × 3`.
    pub centers: Tensor,
    /// Decoded boxes `[center, size]`, `K × 6`.
    pub boxes: Tensor,
    /// Softmax class scores, `K × C`.
    pub class_scores: Tensor,
    /// Objectness probabilities in (0, 1).
    pub objectness: Vec<f64>,
    /// Aggregated proposal features.
    pub features: Tensor,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.objectness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectness.is_empty()
    }

    pub fn box_at(&self, i: usize, class_id: usize) -> Box3D {
        let r = self.boxes.row(i);
        Box3D {
            center: [r[0], r[1], r[2]],
            size: [r[3], r[4], r[5]],
            class_id,
        }
    }
}

impl Forward<'_> {
    pub fn proposals(&self) -> Result<ProposalSet> {
        Ok(ProposalSet {
            centers: self.centers.value(),
            boxes: self.boxes.value(),
            class_scores: self.class_logits.softmax(1)?.value(),
            objectness: self.objectness_logits.sigmoid()?.value().into_data(),
            features: self.proposal_features.value(),
        })
    }
}

/// A detector together with its prompt pool (prompt refiner only).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: DetectorConfig,
    pub refiner: Refiner,
    pub params: ParamSet,
    pub prompts: Option<PromptPool>,
}

impl Model {
    pub fn new(
        config: DetectorConfig,
        refiner: Refiner,
        classes: usize,
        prompt_count: usize,
        prompt_capacity: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let params = init_params(&config, refiner, classes, &mut rng.substream_named("params"))?;
        let prompts = match refiner {
            Refiner::Prompt => Some(PromptPool::new(
                prompt_count,
                config.feature_dim,
                prompt_capacity,
                &mut rng.substream_named("prompts"),
            )?),
            Refiner::Vote => None,
        };
        Ok(Model {
            config,
            refiner,
            params,
            prompts,
        })
    }

    pub fn num_classes(&self) -> usize {
        num_classes(&self.params)
    }

    /// Forward pass with every parameter constant.
    pub fn infer(&self, prep: &PreparedScene, proposal_index: Option<&[usize]>) -> Result<ProposalSet> {
        let tape = Tape::new();
        let bound = Bound::frozen(&tape, &self.params);
        let prompts = self.prompts.as_ref().map(|p| tape.constant(p.active().clone()));
        forward(&bound, prompts, prep, &self.config, self.refiner, proposal_index)?.proposals()
    }

    /// Detections for one scene.
    pub fn detect(&self, prep: &PreparedScene, objectness_threshold: f64) -> Result<Vec<Detection>> {
        Ok(decode_and_nms(&self.infer(prep, None)?, objectness_threshold, 0.25))
    }
}
