//! Model checkpoints: config, named parameter tensors and the prompt pool.

use std::collections::BTreeMap;
use std::path::Path;

use super::{class_blocks, expand_classifier, init_params, DetectorConfig, Model, Refiner};
use crate::container::{read_file, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::numeric::{ParamSet, SeededRng};
use crate::prompt::PromptPool;

const MAGIC: &[u8; 4] = b"IDCK";
const VERSION: u32 = 1;
const PROMPT_SECTION: &[u8; 4] = b"PRMT";

fn encode(model: &Model) -> Result<Vec<u8>> {
    let mut e = Encoder::new(MAGIC, VERSION);
    e.str(&serde_json::to_string(&model.config)?);
    e.str(&serde_json::to_string(&model.refiner)?);
    e.len(model.params.len());
    for (name, t) in model.params.iter() {
        e.str(name);
        e.tensor(t);
    }
    e.tag(PROMPT_SECTION);
    match &model.prompts {
        None => e.u32(0),
        Some(pool) => {
            e.u32(1);
            e.len(pool.capacity());
            e.tensor(pool.active());
            e.len(pool.archive().len());
            for (task, t) in pool.archive() {
                e.len(*task);
                e.tensor(t);
            }
        }
    }
    Ok(e.finish())
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

/// Loads a checkpoint and checks every parameter name and shape against the
/// architecture its stored config describes.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = read_file(path)?;
    let mut d = Decoder::open(path, &bytes, MAGIC, VERSION)?;
    let bad = |detail: String| Error::format(path, detail);
    let config: DetectorConfig =
        serde_json::from_str(&d.str()?).map_err(|e| bad(format!("config: {e}")))?;
    let refiner: Refiner =
        serde_json::from_str(&d.str()?).map_err(|e| bad(format!("refiner: {e}")))?;
    let n = d.len()?;
    let mut params = ParamSet::new();
    for _ in 0..n {
        let name = d.str()?;
        params.insert(name, d.tensor()?);
    }
    d.expect_tag(PROMPT_SECTION)?;
    let prompts = match d.u32()? {
        0 => None,
        1 => {
            let capacity = d.len()?;
            let active = d.tensor()?;
            let count = d.len()?;
            let mut archive = BTreeMap::new();
            for _ in 0..count {
                let task = d.len()?;
                archive.insert(task, d.tensor()?);
            }
            Some(PromptPool::from_parts(active, archive, capacity).map_err(|e| bad(e.to_string()))?)
        }
        other => return Err(bad(format!("bad prompt flag {other}"))),
    };
    d.finish()?;

    let blocks = class_blocks(&params);
    let first = *blocks.first().ok_or_else(|| bad("no classifier".into()))?;
    let mut expected = init_params(&config, refiner, first, &mut SeededRng::new(0))
        .map_err(|e| bad(e.to_string()))?;
    let mut total = first;
    for w in &blocks[1..] {
        total += w;
        expand_classifier(&mut expected, total, &mut SeededRng::new(0))?;
    }
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| bad(format!("missing parameter {name}")))?;
        if got.shape() != t.shape() {
            return Err(bad(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !expected.contains(n)) {
        return Err(bad(format!("unexpected parameter {extra}")));
    }
    match (&prompts, refiner) {
        (Some(pool), Refiner::Prompt) if pool.active().cols() == config.feature_dim => {}
        (None, Refiner::Vote) => {}
        _ => return Err(bad("prompt section does not match the refiner".into())),
    }
    Ok(Model {
        config,
        refiner,
        params,
        prompts,
    })
}
