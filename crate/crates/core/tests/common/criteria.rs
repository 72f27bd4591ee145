//! Oracle checks shared by the integration tests and the acceptance report.
//! Every oracle here is written from the definitions, not from the library.

use std::collections::BTreeMap;

use incdet::detector::Detection;
use incdet::distill::{compute_threshold, rfd_loss, NormKind};
use incdet::eval::{aggregate_report, iou_aabb, match_and_ap};
use incdet::numeric::{Bound, ParamSet, SeededRng, Tape, Tensor};
use incdet::prompt::prompting_attention;
use incdet::scene::Box3D;

/// Result of one check, with a short human-readable detail.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(pass: bool, detail: String) -> Check {
        Check { pass, detail }
    }
}

// ---------------------------------------------------------------- threshold

/// Mean plus `zeta` population standard deviations over the top scores of
/// rows whose top class is old; `E[x²] − mean²` form.
pub fn threshold_oracle(rows: &[Vec<f64>], old: &[usize], zeta: f64) -> (f64, Vec<usize>) {
    let mut tops = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let mut arg = 0;
        for k in 1..r.len() {
            if r[k] > r[arg] {
                arg = k;
            }
        }
        if old.contains(&arg) {
            tops.push((i, r[arg]));
        }
    }
    if tops.is_empty() {
        return (f64::INFINITY, Vec::new());
    }
    let n = tops.len() as f64;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for &(_, x) in tops.iter().rev() {
        s += x;
        s2 += x * x;
    }
    let mean = s / n;
    let var = (s2 / n - mean * mean).max(0.0);
    let tau = mean + zeta * var.sqrt();
    (tau, tops.iter().filter(|(_, x)| *x > tau).map(|(i, _)| *i).collect())
}

fn tensor_of(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows[0].len();
    Tensor::matrix(rows.len(), cols, rows.concat()).unwrap()
}

pub fn threshold_random(trials: usize) -> Check {
    let mut rng = SeededRng::new(2).substream_named("threshold");
    let mut worst: f64 = 0.0;
    let mut mismatched = 0;
    for _ in 0..trials {
        let n = 1 + rng.below(40);
        let c = 2 + rng.below(6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.uniform().powi(2)).collect();
                let sum: f64 = raw.iter().sum();
                raw.iter().map(|v| v / sum).collect()
            })
            .collect();
        let mut old: Vec<usize> = (0..c).filter(|_| rng.uniform() < 0.5).collect();
        if old.is_empty() {
            old.push(rng.below(c));
        }
        let zeta = rng.uniform_in(0.0, 2.0);
        let (tau, idx) = threshold_oracle(&rows, &old, zeta);
        let sel = compute_threshold(&tensor_of(&rows), &old, zeta).unwrap();
        if tau.is_finite() || sel.tau.is_finite() {
            worst = worst.max((tau - sel.tau).abs());
        }
        if idx != sel.indices {
            mismatched += 1;
        }
    }
    Check::new(
        worst <= 1e-12 && mismatched == 0,
        format!("{trials} matrices, max |Δτ| {worst:.1e}, {mismatched} selection mismatches"),
    )
}

pub fn threshold_worked_example() -> Check {
    // Nine columns; only column 0 is old and each row's top is column 0.
    let rows: Vec<Vec<f64>> = [0.2, 0.4, 0.6]
        .iter()
        .map(|&s| std::iter::once(s).chain(std::iter::repeat_n((1.0 - s) / 8.0, 8)).collect())
        .collect();
    let sel = compute_threshold(&tensor_of(&rows), &[0], 1.2).unwrap();
    let (oracle_tau, _) = threshold_oracle(&rows, &[0], 1.2);
    let expected = 0.4 + 1.2 * (0.08f64 / 3.0).sqrt();
    let pass = (sel.tau - 0.59596).abs() < 5e-6
        && (sel.tau - expected).abs() < 1e-12
        && (oracle_tau - expected).abs() < 1e-12
        && sel.indices == vec![2];
    Check::new(pass, format!("tau {:.5}, selected {:?}", sel.tau, sel.indices))
}

// ---------------------------------------------------------------- attention

type Matrices = Vec<Vec<Vec<f64>>>;

/// Per-head outputs and weights by explicit loops. `prompts` has `S` rows;
/// the first `S/2` prefix the keys, the rest prefix the values.
pub fn attention_oracle(
    x: &[Vec<f64>],
    prompts: &[Vec<f64>],
    wq: &[Vec<Vec<f64>>],
    wk: &[Vec<Vec<f64>>],
    wv: &[Vec<Vec<f64>>],
) -> (Matrices, Matrices) {
    let half = prompts.len() / 2;
    let key_rows: Vec<&Vec<f64>> = prompts[..half].iter().chain(x).collect();
    let value_rows: Vec<&Vec<f64>> = prompts[half..].iter().chain(x).collect();
    let project = |row: &Vec<f64>, w: &Vec<Vec<f64>>| -> Vec<f64> {
        let d = w[0].len();
        let mut out = vec![0.0; d];
        for j in 0..d {
            for k in 0..row.len() {
                out[j] += row[k] * w[k][j];
            }
        }
        out
    };
    let mut outputs = Vec::new();
    let mut weights = Vec::new();
    for h in 0..wq.len() {
        let d = wq[h][0].len();
        let keys: Vec<Vec<f64>> = key_rows.iter().map(|r| project(r, &wk[h])).collect();
        let values: Vec<Vec<f64>> = value_rows.iter().map(|r| project(r, &wv[h])).collect();
        let mut head_out = Vec::new();
        let mut head_w = Vec::new();
        for row in x {
            let q = project(row, &wq[h]);
            let logits: Vec<f64> = keys
                .iter()
                .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|v| v / z).collect();
            let mut o = vec![0.0; d];
            for (wj, v) in w.iter().zip(&values) {
                for t in 0..d {
                    o[t] += wj * v[t];
                }
            }
            head_out.push(o);
            head_w.push(w);
        }
        outputs.push(head_out);
        weights.push(head_w);
    }
    (outputs, weights)
}

fn random_rows(rng: &mut SeededRng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.normal()).collect()).collect()
}

pub fn attention_heads(trials_per_s: usize) -> Check {
    const M: usize = 8;
    const D: usize = 4;
    const H: usize = 2;
    let mut rng = SeededRng::new(3).substream_named("attention");
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for s in [0usize, 2, 4] {
        for _ in 0..trials_per_s {
            let x = random_rows(&mut rng, M, D);
            let prompts = random_rows(&mut rng, s, D);
            let mut mats = || (0..H).map(|_| random_rows(&mut rng, D, D / H)).collect::<Vec<_>>();
            let (wq, wk, wv) = (mats(), mats(), mats());
            let (want_out, want_w) = attention_oracle(&x, &prompts, &wq, &wk, &wv);

            let mut params = ParamSet::new();
            for h in 0..H {
                params.insert(format!("pgb.q.{h}"), tensor_of(&wq[h]));
                params.insert(format!("pgb.k.{h}"), tensor_of(&wk[h]));
                params.insert(format!("pgb.v.{h}"), tensor_of(&wv[h]));
            }
            let tape = Tape::new();
            let bound = Bound::frozen(&tape, &params);
            let xv = tape.constant(tensor_of(&x));
            let pv = (s > 0).then(|| tape.constant(tensor_of(&prompts)));
            let att = prompting_attention(xv, pv, &bound, H).unwrap();
            for h in 0..H {
                let got_out = att.heads[h].value();
                let got_w = att.weights[h].value();
                for i in 0..M {
                    for (a, b) in got_out.row(i).iter().zip(&want_out[h][i]) {
                        worst = worst.max((a - b).abs());
                    }
                    for (a, b) in got_w.row(i).iter().zip(&want_w[h][i]) {
                        worst = worst.max((a - b).abs());
                    }
                    worst_sum = worst_sum.max((got_w.row(i).iter().sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    Check::new(
        worst <= 1e-10 && worst_sum <= 1e-9,
        format!("S in {{0,2,4}}, max deviation {worst:.1e}, max |row sum - 1| {worst_sum:.1e}"),
    )
}

// ---------------------------------------------------------------- relations

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(rng: &mut SeededRng, d: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.iter().map(|a| a / n).collect());
        }
    }
    (0..d).map(|i| (0..d).map(|j| cols[j][i]).collect()).collect()
}

pub fn relation_invariance(trials: usize) -> Check {
    let mut rng = SeededRng::new(4).substream_named("relation");
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = 2 + rng.below(12);
        let d = 2 + rng.below(14);
        let teacher = random_rows(&mut rng, n, d);
        let q = random_orthogonal(&mut rng, d);
        let student: Vec<Vec<f64>> = teacher
            .iter()
            .map(|row| {
                let scale = rng.uniform_in(-3.0, 3.0).exp();
                (0..d).map(|j| scale * (0..d).map(|k| row[k] * q[k][j]).sum::<f64>()).collect()
            })
            .collect();
        let tape = Tape::new();
        let sv = tape.param(&tensor_of(&student));
        let loss = rfd_loss(sv, &tensor_of(&teacher), NormKind::Squared, usize::MAX).unwrap();
        worst = worst.max(loss.item().abs());
    }
    Check::new(worst <= 1e-9, format!("{trials} trials, max loss {worst:.1e}"))
}

// ---------------------------------------------------------------- geometry

pub fn iou_monte_carlo(pairs: usize, samples: usize) -> Check {
    let mut rng = SeededRng::new(5).substream_named("iou");
    let mut worst: f64 = 0.0;
    let random_box = |rng: &mut SeededRng, near: [f64; 3]| Box3D {
        center: std::array::from_fn(|k| near[k] + rng.uniform_in(-0.6, 0.6)),
        size: std::array::from_fn(|_| rng.uniform_in(0.3, 1.5)),
        class_id: 0,
    };
    for _ in 0..pairs {
        let a = random_box(&mut rng, [0.0; 3]);
        let b = random_box(&mut rng, a.center);
        let lo: [f64; 3] = std::array::from_fn(|k| a.min()[k].min(b.min()[k]));
        let hi: [f64; 3] = std::array::from_fn(|k| a.max()[k].max(b.max()[k]));
        let (mut in_a, mut in_b, mut both) = (0usize, 0usize, 0usize);
        for _ in 0..samples {
            let p: [f64; 3] = std::array::from_fn(|k| rng.uniform_in(lo[k], hi[k]));
            let (x, y) = (a.contains(&p), b.contains(&p));
            in_a += x as usize;
            in_b += y as usize;
            both += (x && y) as usize;
        }
        let union = in_a + in_b - both;
        let estimate = if union == 0 { 0.0 } else { both as f64 / union as f64 };
        worst = worst.max((estimate - iou_aabb(&a, &b)).abs());
    }
    let unit = |x: f64| Box3D {
        center: [x, 0.0, 0.0],
        size: [1.0; 3],
        class_id: 0,
    };
    let offset = iou_aabb(&unit(0.0), &unit(0.5));
    Check::new(
        worst < 0.01 && offset == 1.0 / 3.0,
        format!("{pairs} pairs x {samples} samples, max |Δ| {worst:.4}, offset cubes {offset}"),
    )
}

// ---------------------------------------------------------------- AP

fn overlap(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = (a.center[k] - a.size[k] / 2.0).max(b.center[k] - b.size[k] / 2.0);
        let hi = (a.center[k] + a.size[k] / 2.0).min(b.center[k] + b.size[k] / 2.0);
        inter *= (hi - lo).max(0.0);
    }
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    inter / (va + vb - inter)
}

/// Precision and recall at every confidence threshold, then all-point
/// interpolated AP as a sum over recall increments of 1/total.
pub fn ap_oracle(dets: &[Vec<Detection>], gt: &[Vec<Box3D>], class_id: usize, thr: f64) -> Option<(f64, f64)> {
    let total: usize = gt.iter().map(|g| g.iter().filter(|b| b.class_id == class_id).count()).sum();
    if total == 0 {
        return None;
    }
    let mut confidences: Vec<f64> = dets
        .iter()
        .flatten()
        .filter(|d| d.class_id == class_id)
        .map(|d| d.confidence)
        .collect();
    confidences.sort_by(|a, b| b.total_cmp(a));
    let mut points = Vec::new();
    for &t in &confidences {
        let mut kept: Vec<(usize, &Detection)> = Vec::new();
        for (s, ds) in dets.iter().enumerate() {
            for d in ds.iter().filter(|d| d.class_id == class_id && d.confidence >= t) {
                kept.push((s, d));
            }
        }
        kept.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
        let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (s, d) in &kept {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in gt[*s].iter().enumerate() {
                if b.class_id != class_id || taken[*s][g] {
                    continue;
                }
                let o = overlap(&d.box3d, b);
                if o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[*s][g] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / kept.len() as f64, tp));
    }
    let max_tp = points.iter().map(|p| p.1).max().unwrap_or(0);
    let mut ap = 0.0;
    for level in 1..=max_tp {
        let p = points
            .iter()
            .filter(|(_, tp)| *tp >= level)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        ap += p / total as f64;
    }
    Some((ap, max_tp as f64 / total as f64))
}

fn grid_box(rng: &mut SeededRng, class_id: usize) -> Box3D {
    Box3D {
        center: [rng.below(4) as f64 * 0.5, rng.below(2) as f64 * 0.5, 0.0],
        size: [rng.uniform_in(0.6, 1.2), rng.uniform_in(0.6, 1.2), 1.0],
        class_id,
    }
}

pub fn ap_exhaustive(instances: usize) -> Check {
    let mut rng = SeededRng::new(6).substream_named("ap");
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..instances {
        let scenes = 1 + rng.below(3);
        let gt: Vec<Vec<Box3D>> = (0..scenes)
            .map(|_| {
                let count = rng.below(4);
                (0..count)
                    .map(|_| {
                        let class_id = rng.below(2);
                        grid_box(&mut rng, class_id)
                    })
                    .collect()
            })
            .collect();
        let count = rng.below(11);
        let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); scenes];
        for _ in 0..count {
            let s = rng.below(scenes);
            let class_id = rng.below(2);
            dets[s].push(Detection {
                box3d: grid_box(&mut rng, class_id),
                class_id,
                confidence: rng.uniform(),
            });
        }
        for class_id in 0..2 {
            let got = match_and_ap(&dets, &gt, class_id, 0.25).unwrap();
            let want = ap_oracle(&dets, &gt, class_id, 0.25);
            match (got, want) {
                (None, None) => {}
                (Some(g), Some((ap, recall))) => {
                    compared += 1;
                    worst = worst.max((g.ap - ap).abs()).max((g.recall - recall).abs());
                }
                _ => worst = f64::INFINITY,
            }
        }
    }
    let gt = vec![vec![grid_box(&mut rng, 0), grid_box(&mut rng, 0)], vec![grid_box(&mut rng, 0)]];
    let perfect: Vec<Vec<Detection>> = gt
        .iter()
        .map(|s| {
            s.iter()
                .map(|b| Detection {
                    box3d: *b,
                    class_id: 0,
                    confidence: 0.9,
                })
                .collect()
        })
        .collect();
    let p = match_and_ap(&perfect, &gt, 0, 0.25).unwrap().unwrap();
    Check::new(
        worst <= 1e-12 && p.ap == 1.0 && p.recall == 1.0,
        format!(
            "{instances} instances ({compared} class scores), max |Δ| {worst:.1e}; perfect AP {} recall {}",
            p.ap, p.recall
        ),
    )
}

// ---------------------------------------------------------------- arithmetic

pub fn published_arithmetic() -> Check {
    let per_class = [69.5, 82.7, 29.5, 71.8, 21.3, 34.9, 58.6, 64.6, 52.6, 86.1];
    let ap: BTreeMap<usize, f64> = per_class.iter().copied().enumerate().collect();
    let classes: Vec<usize> = (0..per_class.len()).collect();
    let mean = aggregate_report(&ap, &ap, &classes, &[]).unwrap().avg_map.unwrap();
    let split: BTreeMap<usize, f64> = [(0, 58.7), (1, 57.2)].into_iter().collect();
    let avg = aggregate_report(&split, &split, &[0], &[1]).unwrap().avg_map.unwrap();
    Check::new(
        (mean - 57.2).abs() <= 0.05 && (avg - 58.0).abs() <= 0.05,
        format!("ten-class mean {mean:.2}, B/N average {avg:.2}"),
    )
}
