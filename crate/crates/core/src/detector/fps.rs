//! Farthest-point sampling with a permutation-invariant start and tie rule.

use std::cmp::Ordering;

fn lex(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Picks `m` indices, starting at the lexicographically smallest point and
/// then repeatedly taking the point farthest from everything chosen so far.
///
/// Ties are broken by coordinates rather than by index, so the chosen point
/// set does not depend on input order. Requires `m <= points.len()`.
pub fn farthest_point_sample(points: &[[f64; 3]], m: usize) -> Vec<usize> {
    assert!(m <= points.len(), "cannot sample {m} of {} points", points.len());
    if m == 0 {
        return Vec::new();
    }
    let start = (0..points.len())
        .min_by(|&a, &b| lex(&points[a], &points[b]).then(a.cmp(&b)))
        .unwrap();
    let mut chosen = Vec::with_capacity(m);
    chosen.push(start);
    let mut nearest: Vec<f64> = points.iter().map(|p| dist2(p, &points[start])).collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 1..points.len() {
            let ord = nearest[i]
                .total_cmp(&nearest[best])
                .then_with(|| lex(&points[best], &points[i]));
            if ord == Ordering::Greater {
                best = i;
            }
        }
        chosen.push(best);
        let c = points[best];
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
    }
    chosen
}
