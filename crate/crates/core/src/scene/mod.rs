//! Synthetic indoor-like scenes and class-incremental task streams.

mod generate;
mod io;
mod stream;

pub use generate::{
    generate_scene, generate_scene_with_clean_points, ClassShape, GeneratorConfig, Primitive,
};
pub use io::{load_scene, save_scene, scene_to_bytes};
pub use stream::{build_task_stream, load_stream, save_stream, ScenesPerTask, Task, TaskStream};

use serde::{Deserialize, Serialize};

const ENCLOSE_SLACK: f64 = 4e-15;

/// Axis-aligned 3D box; `size` holds full extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub class_id: usize,
}

impl Box3D {
    pub fn min(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] - 0.5 * self.size[k])
    }

    pub fn max(&self) -> [f64; 3] {
        std::array::from_fn(|k| self.center[k] + 0.5 * self.size[k])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Inclusive point-in-box test.
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }

    /// Tight bounds of a non-empty point set, widened by a few ulps so that
    /// [`Box3D::contains`] accepts every input point despite rounding.
    pub fn enclosing(points: &[[f64; 3]], class_id: usize) -> Box3D {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Box3D {
            center: std::array::from_fn(|k| 0.5 * (lo[k] + hi[k])),
            size: std::array::from_fn(|k| hi[k] - lo[k] + ENCLOSE_SLACK * (1.0 + lo[k].abs().max(hi[k].abs()))),
            class_id,
        }
    }
}

/// One sample: a point cloud with its ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<[f64; 3]>,
    /// Box index owning each point, or -1 for floor/background.
    pub point_instance: Vec<i32>,
    pub boxes: Vec<Box3D>,
}

impl Scene {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Copy of the scene keeping only boxes whose class passes `keep`.
    /// Points of dropped boxes become background.
    pub fn filter_boxes(&self, keep: impl Fn(usize) -> bool) -> Scene {
        let mut remap = vec![-1i32; self.boxes.len()];
        let mut boxes = Vec::new();
        for (i, b) in self.boxes.iter().enumerate() {
            if keep(b.class_id) {
                remap[i] = boxes.len() as i32;
                boxes.push(*b);
            }
        }
        Scene {
            scene_id: self.scene_id.clone(),
            points: self.points.clone(),
            point_instance: self
                .point_instance
                .iter()
                .map(|&i| if i < 0 { -1 } else { remap[i as usize] })
                .collect(),
            boxes,
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Center-regression targets for seeds.
///
/// A seed is supervised iff it lies inside some ground-truth box; its target is
/// that box's center, or the nearest such center when boxes overlap.
pub fn seed_center_targets(scene: &Scene, seeds: &[[f64; 3]]) -> (Vec<[f64; 3]>, Vec<bool>) {
    let mut targets = Vec::with_capacity(seeds.len());
    let mut mask = Vec::with_capacity(seeds.len());
    for s in seeds {
        let best = scene
            .boxes
            .iter()
            .filter(|b| b.contains(s))
            .map(|b| (dist2(s, &b.center), b.center))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((_, c)) => {
                targets.push(c);
                mask.push(true);
            }
            None => {
                targets.push(*s);
                mask.push(false);
            }
        }
    }
    (targets, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene_with(boxes: Vec<Box3D>) -> Scene {
        Scene {
            scene_id: "t".into(),
            points: vec![[0.0; 3]],
            point_instance: vec![-1],
            boxes,
        }
    }

    #[test]
    fn seed_at_center_targets_that_center() {
        let b = Box3D {
            center: [1.0, 2.0, 0.5],
            size: [1.0, 1.0, 1.0],
            class_id: 0,
        };
        let (t, m) = seed_center_targets(&scene_with(vec![b]), &[[1.0, 2.0, 0.5]]);
        assert!(m[0]);
        assert_eq!(t[0], [1.0, 2.0, 0.5]);
    }

    #[test]
    fn floor_seed_is_unmasked() {
        let b = Box3D {
            center: [1.0, 1.0, 0.5],
            size: [0.5, 0.5, 0.5],
            class_id: 0,
        };
        let (_, m) = seed_center_targets(&scene_with(vec![b]), &[[-1.5, -1.5, 0.0]]);
        assert!(!m[0]);
    }

    #[test]
    fn overlapping_boxes_pick_nearest_center() {
        let a = Box3D {
            center: [0.0, 0.0, 0.0],
            size: [2.0, 2.0, 2.0],
            class_id: 0,
        };
        let b = Box3D {
            center: [0.8, 0.0, 0.0],
            size: [2.0, 2.0, 2.0],
            class_id: 1,
        };
        let (t, m) = seed_center_targets(&scene_with(vec![a, b]), &[[0.6, 0.0, 0.0]]);
        assert!(m[0]);
        assert_eq!(t[0], [0.8, 0.0, 0.0]);
    }
}
