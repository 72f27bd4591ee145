use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{DetectorConfig, Refiner};
use crate::distill::NormKind;
use crate::error::{Error, Result};
use crate::scene::{GeneratorConfig, ScenesPerTask};

/// Training method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Prompt guidance plus box, relation and logit distillation.
    Full,
    /// Vote refiner with all three distillation terms.
    NoPgb,
    /// Vote refiner with relation and logit distillation.
    NoPgbRdd,
    /// Vote refiner with logit distillation only.
    NoPgbRddRfd,
    /// Old model frozen; only a new classifier block is trained.
    FreezeAdd,
    /// Everything but the old classifier blocks trained on new data alone.
    Finetune,
    /// One run over all classes and all training data.
    Joint,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPgb,
        Variant::NoPgbRdd,
        Variant::NoPgbRddRfd,
        Variant::FreezeAdd,
        Variant::Finetune,
        Variant::Joint,
    ];

    /// The ablation ladder, strongest first.
    pub const LADDER: [Variant; 4] = [
        Variant::Full,
        Variant::NoPgb,
        Variant::NoPgbRdd,
        Variant::NoPgbRddRfd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPgb => "no_pgb",
            Variant::NoPgbRdd => "no_pgb_rdd",
            Variant::NoPgbRddRfd => "no_pgb_rdd_rfd",
            Variant::FreezeAdd => "freeze_add",
            Variant::Finetune => "finetune",
            Variant::Joint => "joint",
        }
    }

    pub fn parse(name: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant {name:?}; expected one of {known:?}"))
            })
    }

    pub fn refiner(self) -> Refiner {
        match self {
            Variant::Full => Refiner::Prompt,
            _ => Refiner::Vote,
        }
    }

    pub fn uses_rdd(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPgb)
    }

    pub fn uses_rfd(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPgb | Variant::NoPgbRdd)
    }

    pub fn uses_logit_distillation(self) -> bool {
        Variant::LADDER.contains(&self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            epochs: 60,
            batch_size: 8,
        }
    }
}

/// Everything that determines one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Classes per task, taken as consecutive blocks of the catalog.
    pub split: Vec<usize>,
    pub scenes_per_task: ScenesPerTask,
    pub generator: GeneratorConfig,
    pub detector: DetectorConfig,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub xi: f64,
    pub zeta: f64,
    /// Number of shared prompts (S); must be even.
    pub prompts: usize,
    /// Maximum number of archived prompt snapshots.
    pub prompt_capacity: usize,
    pub temperature: f64,
    /// Cap on sample pairs used by relation distillation per batch.
    pub pair_cap: usize,
    pub norm: NormKind,
    /// Fraction of a task's steps over which distillation weights ramp from 0.
    pub ramp_fraction: f64,
    pub optimizer: OptimizerConfig,
    /// Minimum objectness for a proposal to become a detection.
    pub objectness_threshold: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            split: vec![2, 2],
            scenes_per_task: ScenesPerTask {
                train: 200,
                eval: 50,
            },
            generator: GeneratorConfig::default(),
            detector: DetectorConfig::default(),
            alpha: 10.0,
            beta: 0.8,
            gamma: 1.0,
            xi: 1.0,
            zeta: 1.2,
            prompts: 10,
            prompt_capacity: 16,
            temperature: 1.0,
            pair_cap: 64,
            norm: NormKind::Squared,
            ramp_fraction: 0.2,
            optimizer: OptimizerConfig::default(),
            objectness_threshold: 0.05,
            variant: Variant::Full,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.detector.validate()?;
        if self.split.is_empty() || self.split.contains(&0) {
            return Err(Error::Config(format!("invalid split {:?}", self.split)));
        }
        let weights = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("xi", self.xi),
            ("zeta", self.zeta),
        ];
        if let Some((name, v)) = weights.iter().find(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
        }
        if self.prompts == 0 || !self.prompts.is_multiple_of(2) {
            return Err(Error::Config(format!("prompts must be even and positive, got {}", self.prompts)));
        }
        if self.prompt_capacity < self.split.len() {
            return Err(Error::Config("prompt_capacity smaller than the task count".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(Error::Config("ramp_fraction must lie in [0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0) || o.epochs == 0 || o.batch_size == 0 {
            return Err(Error::Config("optimizer needs lr > 0, epochs > 0, batch_size > 0".into()));
        }
        if self.scenes_per_task.train == 0 || self.scenes_per_task.eval == 0 {
            return Err(Error::Config("scenes_per_task must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
