//! Prompt guidance: a shared prompt set prepended to seed-feature attention,
//! residual center refinement, and per-task prompt snapshots.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::{Bound, ParamSet, SeededRng, Tensor, Var};

/// Width of the hidden layer in the refinement MLP.
pub const REFINE_HIDDEN: usize = 64;
/// Kernel length of the seed-axis convolution.
pub const CONV_KERNEL: usize = 3;

/// The active prompt set plus immutable per-task snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    active: Tensor,
    archive: BTreeMap<usize, Tensor>,
    capacity: usize,
}

impl PromptPool {
    /// `count` random prompts of width `dim`; `count` must be even and positive.
    pub fn new(count: usize, dim: usize, capacity: usize, rng: &mut SeededRng) -> Result<Self> {
        if count == 0 || !count.is_multiple_of(2) {
            return Err(Error::Config(format!("prompt count must be even and positive, got {count}")));
        }
        let data = (0..count * dim).map(|_| 0.5 * rng.normal()).collect();
        Ok(PromptPool {
            active: Tensor::matrix(count, dim, data)?,
            archive: BTreeMap::new(),
            capacity,
        })
    }

    pub(crate) fn from_parts(
        active: Tensor,
        archive: BTreeMap<usize, Tensor>,
        capacity: usize,
    ) -> Result<Self> {
        let s = active.rows();
        if active.ndim() != 2 || !s.is_multiple_of(2) {
            return Err(Error::Config(format!("bad prompt shape {:?}", active.shape())));
        }
        if archive.values().any(|t| t.shape() != active.shape()) {
            return Err(Error::Config("archived prompts differ in shape from the active set".into()));
        }
        Ok(PromptPool {
            active,
            archive,
            capacity,
        })
    }

    pub fn count(&self) -> usize {
        self.active.rows()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn active(&self) -> &Tensor {
        &self.active
    }

    pub fn active_mut(&mut self) -> &mut Tensor {
        &mut self.active
    }

    pub fn archive(&self) -> &BTreeMap<usize, Tensor> {
        &self.archive
    }

    pub fn snapshot(&self, task_index: usize) -> Option<&Tensor> {
        self.archive.get(&task_index)
    }

    /// Prompts to train with on task `task_index` (1-based).
    ///
    /// Task 1 keeps the random initialization; later tasks restart from the
    /// snapshot stored after the previous task.
    pub fn select(&mut self, task_index: usize) -> Result<&Tensor> {
        if task_index > 1 {
            let prev = self.archive.get(&(task_index - 1)).ok_or_else(|| {
                Error::State(format!("no prompt snapshot for task {}", task_index - 1))
            })?;
            self.active = prev.clone();
        }
        Ok(&self.active)
    }

    /// Archives a copy of the active set under `task_index`.
    pub fn store(&mut self, task_index: usize) -> Result<()> {
        if self.archive.contains_key(&task_index) {
            return Err(Error::State(format!("prompts for task {task_index} already stored")));
        }
        if self.archive.len() >= self.capacity {
            return Err(Error::State(format!("prompt archive full ({} snapshots)", self.capacity)));
        }
        self.archive.insert(task_index, self.active.clone());
        Ok(())
    }
}

fn glorot(rng: &mut SeededRng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let s = gain * (2.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| s * rng.normal()).collect()).unwrap()
}

/// Adds attention projections, the refinement MLP and the convolution.
///
/// The last MLP layer starts near zero and the convolution starts as a small
/// identity on the center tap, so refined centers begin close to the seeds.
pub fn init_params(params: &mut ParamSet, dim: usize, heads: usize, rng: &mut SeededRng) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("feature width {dim} not divisible by {heads} heads")));
    }
    let d = dim / heads;
    for h in 0..heads {
        for kind in ["q", "k", "v"] {
            params.insert(format!("pgb.{kind}.{h}"), glorot(rng, dim, d, 1.0));
        }
    }
    params.insert("pgb.mlp1.w", glorot(rng, dim, REFINE_HIDDEN, 1.0));
    params.insert("pgb.mlp1.b", Tensor::zeros(&[REFINE_HIDDEN]));
    params.insert("pgb.mlp2.w", glorot(rng, REFINE_HIDDEN, 3, 0.1));
    params.insert("pgb.mlp2.b", Tensor::zeros(&[3]));
    let mut conv = Tensor::zeros(&[3, 3, CONV_KERNEL]);
    let centre = CONV_KERNEL / 2;
    for o in 0..3 {
        conv.data_mut()[(o * 3 + o) * CONV_KERNEL + centre] = 0.1;
    }
    params.insert("pgb.conv.w", conv);
    Ok(())
}

/// Per-head attention outputs and the normalized attention weights behind them.
pub struct Attention<'t> {
    /// `H` tensors of shape `M × d`.
    pub heads: Vec<Var<'t>>,
    /// `H` tensors of shape `M × (S/2 + M)`; each row sums to 1.
    pub weights: Vec<Var<'t>>,
}

/// Multi-head attention over seed features with prompt keys and values prepended.
///
/// Queries, keys and values all come from `features` (`M × D`). The first half
/// of the prompt rows is prepended to the keys and the second half to the
/// values, so every query attends over `S/2 + M` entries. `None` means no prompts.
pub fn prompting_attention<'t>(
    features: Var<'t>,
    prompts: Option<Var<'t>>,
    bound: &Bound<'t>,
    heads: usize,
) -> Result<Attention<'t>> {
    let (keys_in, values_in) = match prompts {
        Some(p) => {
            let shape = p.shape();
            let s = shape[0];
            if s % 2 != 0 {
                return Err(Error::Config(format!("prompt count must be even, got {s}")));
            }
            let half = s / 2;
            (
                Var::concat(&[p.narrow(0, 0, half)?, features], 0)?,
                Var::concat(&[p.narrow(0, half, half)?, features], 0)?,
            )
        }
        None => (features, features),
    };
    let mut out = Attention {
        heads: Vec::with_capacity(heads),
        weights: Vec::with_capacity(heads),
    };
    for h in 0..heads {
        let wq = bound.get(&format!("pgb.q.{h}"))?;
        let d = wq.shape()[1];
        let q = features.matmul(wq)?;
        let k = keys_in.matmul(bound.get(&format!("pgb.k.{h}"))?)?;
        let v = values_in.matmul(bound.get(&format!("pgb.v.{h}"))?)?;
        let w = q
            .matmul(k.transpose()?)?
            .scale(1.0 / (d as f64).sqrt())?
            .softmax(1)?;
        out.heads.push(w.matmul(v)?);
        out.weights.push(w);
    }
    Ok(out)
}

/// Residual refinement of seed positions.
///
/// Returns `(ż, z̈)` with `ż = z + MLP(concat(heads))` and
/// `z̈ = z + Conv(ż)`; both residuals are taken on the original seeds `z`.
pub fn refine_centers<'t>(
    seeds: Var<'t>,
    heads: &[Var<'t>],
    bound: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let joined = Var::concat(heads, 1)?;
    let offset = joined
        .matmul(bound.get("pgb.mlp1.w")?)?
        .add_bias(bound.get("pgb.mlp1.b")?)?
        .relu()?
        .matmul(bound.get("pgb.mlp2.w")?)?
        .add_bias(bound.get("pgb.mlp2.b")?)?;
    let mid = seeds.add(offset)?;
    let refined = seeds.add(mid.conv1d(bound.get("pgb.conv.w")?)?)?;
    Ok((mid, refined))
}

/// Mean over masked seeds of the L1 distance between refined centers and
/// their object centers; zero when no seed is masked.
pub fn pgb_loss<'t>(refined: Var<'t>, targets: &[[f64; 3]], mask: &[bool]) -> Result<Var<'t>> {
    let m = refined.shape()[0];
    if targets.len() != m || mask.len() != m {
        return Err(Error::shape(
            "pgb_loss",
            format!("{m} seeds, {} targets, {} mask entries", targets.len(), mask.len()),
        ));
    }
    let tape = refined.tape();
    let idx: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let picked: Vec<[f64; 3]> = idx.iter().map(|&i| targets[i]).collect();
    let target = tape.constant(Tensor::from_rows(&picked));
    refined
        .gather_rows(&idx)?
        .sub(target)?
        .l1()?
        .scale(1.0 / idx.len() as f64)
}
