use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{load_scene, save_scene};
use super::{generate_scene, GeneratorConfig, Scene};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::numeric::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenesPerTask {
    pub train: usize,
    pub eval: usize,
}

/// One incremental task: its new classes plus its own train and eval scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based task index.
    pub index: usize,
    pub class_ids: Vec<usize>,
    /// Scenes holding only this task's classes.
    pub train: Vec<Scene>,
    /// Scenes over every class seen up to and including this task.
    pub eval: Vec<Scene>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub total_classes: usize,
}

impl TaskStream {
    /// Classes of tasks `1..=t`.
    pub fn classes_up_to(&self, t: usize) -> Vec<usize> {
        self.tasks
            .iter()
            .take(t)
            .flat_map(|task| task.class_ids.iter().copied())
            .collect()
    }

    /// Eval scenes of tasks `1..=t`, pooled in task order.
    pub fn eval_scenes_up_to(&self, t: usize) -> Vec<&Scene> {
        self.tasks.iter().take(t).flat_map(|task| task.eval.iter()).collect()
    }

    /// Checks class and train-scene disjointness across tasks plus the
    /// per-scene class constraints.
    pub fn validate(&self) -> Result<()> {
        let mut seen_classes = BTreeSet::new();
        let mut seen_scenes = BTreeSet::new();
        for task in &self.tasks {
            let classes: BTreeSet<usize> = task.class_ids.iter().copied().collect();
            if classes.len() != task.class_ids.len() {
                return Err(Error::Config(format!("task {} repeats a class", task.index)));
            }
            if !seen_classes.is_disjoint(&classes) {
                return Err(Error::Config(format!(
                    "task {} reuses classes of an earlier task",
                    task.index
                )));
            }
            if let Some(c) = classes.iter().find(|&&c| c >= self.total_classes) {
                return Err(Error::Config(format!("class {c} beyond total {}", self.total_classes)));
            }
            seen_classes.extend(classes.iter().copied());
            for s in &task.train {
                if !seen_scenes.insert(s.scene_id.clone()) {
                    return Err(Error::Config(format!("train scene {} shared across tasks", s.scene_id)));
                }
                if !s.boxes.iter().any(|b| classes.contains(&b.class_id)) {
                    return Err(Error::Config(format!("train scene {} lacks a task class", s.scene_id)));
                }
                if s.boxes.iter().any(|b| !classes.contains(&b.class_id)) {
                    return Err(Error::Config(format!(
                        "train scene {} holds a class outside task {}",
                        s.scene_id, task.index
                    )));
                }
            }
            for s in &task.eval {
                if s.boxes.iter().any(|b| !seen_classes.contains(&b.class_id)) {
                    return Err(Error::Config(format!(
                        "eval scene {} holds a class not yet seen",
                        s.scene_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Builds a stream whose tasks take consecutive class blocks of the catalog:
/// split `[5, 5]` gives classes `0..5` then `5..10`.
pub fn build_task_stream(
    cfg: &GeneratorConfig,
    split: &[usize],
    scenes: ScenesPerTask,
    seed: u64,
) -> Result<TaskStream> {
    cfg.validate()?;
    let total: usize = split.iter().sum();
    if split.is_empty() || split.contains(&0) {
        return Err(Error::Config(format!("invalid class split {split:?}")));
    }
    if total > cfg.catalog.len() {
        return Err(Error::Config(format!(
            "split {split:?} needs {total} classes, catalog has {}",
            cfg.catalog.len()
        )));
    }
    let root = SeededRng::new(seed);
    let mut tasks = Vec::with_capacity(split.len());
    let mut next = 0;
    for (k, &n) in split.iter().enumerate() {
        let index = k + 1;
        let class_ids: Vec<usize> = (next..next + n).collect();
        next += n;
        let seen: Vec<usize> = (0..next).collect();
        let train = (0..scenes.train)
            .map(|i| {
                let id = format!("t{index}-train-{i:05}");
                generate_scene(cfg, &class_ids, &id, &mut root.substream_named(&id))
            })
            .collect::<Result<Vec<_>>>()?;
        let eval = (0..scenes.eval)
            .map(|i| {
                let id = format!("t{index}-eval-{i:05}");
                generate_scene(cfg, &seen, &id, &mut root.substream_named(&id))
            })
            .collect::<Result<Vec<_>>>()?;
        tasks.push(Task {
            index,
            class_ids,
            train,
            eval,
        });
    }
    let stream = TaskStream {
        tasks,
        total_classes: total,
    };
    stream.validate()?;
    Ok(stream)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamManifest {
    version: u32,
    total_classes: usize,
    tasks: Vec<TaskManifest>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskManifest {
    index: usize,
    class_ids: Vec<usize>,
    train: Vec<String>,
    eval: Vec<String>,
}

const MANIFEST: &str = "stream.json";

/// Writes `stream.json` plus one scene container per scene under `dir/scenes/`.
pub fn save_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
    let mut tasks = Vec::new();
    for task in &stream.tasks {
        let names = |scenes: &[Scene]| -> Result<Vec<String>> {
            scenes
                .iter()
                .map(|s| {
                    let file = format!("scenes/{}.scn", s.scene_id);
                    save_scene(s, &dir.join(&file))?;
                    Ok(file)
                })
                .collect()
        };
        tasks.push(TaskManifest {
            index: task.index,
            class_ids: task.class_ids.clone(),
            train: names(&task.train)?,
            eval: names(&task.eval)?,
        });
    }
    let manifest = StreamManifest {
        version: 1,
        total_classes: stream.total_classes,
        tasks,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(&dir.join(MANIFEST), json.as_bytes())
}

pub fn load_stream(dir: &Path) -> Result<TaskStream> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: StreamManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != 1 {
        return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
    }
    let load = |files: &[String]| -> Result<Vec<Scene>> {
        files.iter().map(|f| load_scene(&dir.join(f))).collect()
    };
    let tasks = manifest
        .tasks
        .iter()
        .map(|t| {
            Ok(Task {
                index: t.index,
                class_ids: t.class_ids.clone(),
                train: load(&t.train)?,
                eval: load(&t.eval)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let stream = TaskStream {
        tasks,
        total_classes: manifest.total_classes,
    };
    stream.validate()?;
    Ok(stream)
}
