use serde::{Deserialize, Serialize};

use super::{Box3D, Scene};
use crate::error::{Error, Result};
use crate::numeric::SeededRng;

/// Surface primitive a class is sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    BoxShell,
    SphereShell,
    Cylinder,
    Pyramid,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [
        Primitive::BoxShell,
        Primitive::SphereShell,
        Primitive::Cylinder,
        Primitive::Pyramid,
    ];

    fn name(self) -> &'static str {
        match self {
            Primitive::BoxShell => "box",
            Primitive::SphereShell => "sphere",
            Primitive::Cylinder => "cylinder",
            Primitive::Pyramid => "pyramid",
        }
    }
}

/// One object class: a primitive plus its size distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassShape {
    pub name: String,
    pub primitive: Primitive,
    /// Range of the nominal full extent, meters.
    pub scale: [f64; 2],
    /// Per-axis multiplicative jitter applied to the nominal extent.
    pub aspect: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub catalog: Vec<ClassShape>,
    /// Inclusive range of objects per scene.
    pub objects_per_scene: [usize; 2],
    pub points_per_scene: usize,
    /// Share of the points spent on the floor.
    pub floor_fraction: f64,
    pub noise_sigma: f64,
    /// Floor spans `[-floor_extent, floor_extent]` on x and y.
    pub floor_extent: f64,
    /// Minimum gap between object footprints.
    pub spacing: f64,
    pub seed: u64,
}

/// Scale buckets of the default catalog, smallest first.
const SCALE_BUCKETS: [(&str, [f64; 2]); 3] = [
    ("small", [0.45, 0.6]),
    ("medium", [0.7, 0.9]),
    ("large", [1.0, 1.25]),
];

impl Default for GeneratorConfig {
    fn default() -> Self {
        let catalog = SCALE_BUCKETS
            .iter()
            .flat_map(|(bucket, scale)| {
                Primitive::ALL.iter().map(move |p| ClassShape {
                    name: format!("{bucket}_{}", p.name()),
                    primitive: *p,
                    scale: *scale,
                    aspect: [0.85, 1.15],
                })
            })
            .collect();
        GeneratorConfig {
            catalog,
            objects_per_scene: [1, 3],
            points_per_scene: 2048,
            floor_fraction: 0.25,
            noise_sigma: 0.005,
            floor_extent: 1.5,
            spacing: 0.1,
            seed: 0,
        }
    }
}

const MIN_POINTS_PER_OBJECT: usize = 16;

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.catalog.is_empty() {
            return bad("empty class catalog".into());
        }
        for c in &self.catalog {
            if !(c.scale[0] > 0.0 && c.scale[0] <= c.scale[1]) {
                return bad(format!("class {}: bad scale range {:?}", c.name, c.scale));
            }
            if !(c.aspect[0] > 0.0 && c.aspect[0] <= c.aspect[1]) {
                return bad(format!("class {}: bad aspect range {:?}", c.name, c.aspect));
            }
        }
        let [lo, hi] = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad(format!("bad objects_per_scene {:?}", self.objects_per_scene));
        }
        if !(0.0..1.0).contains(&self.floor_fraction) {
            return bad(format!("floor_fraction {} outside [0, 1)", self.floor_fraction));
        }
        let object_points = self.points_per_scene as f64 * (1.0 - self.floor_fraction);
        if object_points < (hi * MIN_POINTS_PER_OBJECT) as f64 {
            return bad(format!(
                "{} points cannot give {hi} objects {MIN_POINTS_PER_OBJECT} points each",
                self.points_per_scene
            ));
        }
        if self.noise_sigma < 0.0 || self.floor_extent <= 0.0 {
            return bad("negative noise or non-positive floor extent".into());
        }
        Ok(())
    }
}

/// Noise-free surface samples of a primitive centered at the origin with full
/// extents `size`. The first samples are the extreme points, so the tight box
/// of the output is exactly `size`.
fn sample_surface(primitive: Primitive, size: [f64; 3], n: usize, rng: &mut SeededRng) -> Vec<[f64; 3]> {
    let [a, b, c] = size.map(|s| 0.5 * s);
    let mut pts: Vec<[f64; 3]> = match primitive {
        Primitive::BoxShell => (0..8)
            .map(|i| {
                let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
                [s(0) * a, s(1) * b, s(2) * c]
            })
            .collect(),
        Primitive::SphereShell => vec![
            [a, 0.0, 0.0],
            [-a, 0.0, 0.0],
            [0.0, b, 0.0],
            [0.0, -b, 0.0],
            [0.0, 0.0, c],
            [0.0, 0.0, -c],
        ],
        Primitive::Cylinder => [c, -c]
            .iter()
            .flat_map(|&z| [[a, 0.0, z], [-a, 0.0, z], [0.0, b, z], [0.0, -b, z]])
            .collect(),
        Primitive::Pyramid => vec![
            [a, b, -c],
            [-a, b, -c],
            [a, -b, -c],
            [-a, -b, -c],
            [0.0, 0.0, c],
        ],
    };
    while pts.len() < n {
        let p = match primitive {
            Primitive::BoxShell => {
                // face chosen proportionally to its area
                let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
                let total: f64 = areas.iter().sum();
                let mut r = rng.uniform() * total;
                let mut face = 5;
                for (i, ar) in areas.iter().enumerate() {
                    if r < *ar {
                        face = i;
                        break;
                    }
                    r -= ar;
                }
                let (u, v) = (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
                match face {
                    0 => [a, u * b, v * c],
                    1 => [-a, u * b, v * c],
                    2 => [u * a, b, v * c],
                    3 => [u * a, -b, v * c],
                    4 => [u * a, v * b, c],
                    _ => [u * a, v * b, -c],
                }
            }
            Primitive::SphereShell => {
                let d = [rng.normal(), rng.normal(), rng.normal()];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-12);
                [a * d[0] / n, b * d[1] / n, c * d[2] / n]
            }
            Primitive::Cylinder => {
                let theta = rng.uniform_in(0.0, std::f64::consts::TAU);
                let side = 2.0 * c;
                let cap = (a * b).sqrt() * 0.5;
                if rng.uniform() * (side + cap) < side {
                    [a * theta.cos(), b * theta.sin(), rng.uniform_in(-c, c)]
                } else {
                    let r = rng.uniform().sqrt();
                    let z = if rng.uniform() < 0.5 { c } else { -c };
                    [a * r * theta.cos(), b * r * theta.sin(), z]
                }
            }
            Primitive::Pyramid => {
                let (u, v) = (rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0));
                if rng.uniform() < 0.2 {
                    [u * a, v * b, -c]
                } else {
                    // one of four triangular faces: height t, lateral u
                    let t = 1.0 - rng.uniform().sqrt();
                    let w = 1.0 - t;
                    let z = -c + 2.0 * c * t;
                    match rng.below(4) {
                        0 => [w * a, u * w * b, z],
                        1 => [-w * a, u * w * b, z],
                        2 => [u * w * a, w * b, z],
                        _ => [u * w * a, -w * b, z],
                    }
                }
            }
        };
        pts.push(p);
    }
    pts
}

fn footprints_clear(center: [f64; 2], half: [f64; 2], placed: &[([f64; 2], [f64; 2])], gap: f64) -> bool {
    placed.iter().all(|(c, h)| {
        (center[0] - c[0]).abs() >= half[0] + h[0] + gap || (center[1] - c[1]).abs() >= half[1] + h[1] + gap
    })
}

/// Generates one scene with objects drawn from `class_ids`.
///
/// Objects rest on the floor plane `z = 0`. Each box is the tight bound of the
/// object's noise-free surface samples; Gaussian noise is added afterwards.
pub fn generate_scene(
    cfg: &GeneratorConfig,
    class_ids: &[usize],
    scene_id: &str,
    rng: &mut SeededRng,
) -> Result<Scene> {
    generate_scene_with_clean_points(cfg, class_ids, scene_id, rng).map(|(s, _)| s)
}

/// Like [`generate_scene`], also returning the points before noise was added.
pub fn generate_scene_with_clean_points(
    cfg: &GeneratorConfig,
    class_ids: &[usize],
    scene_id: &str,
    rng: &mut SeededRng,
) -> Result<(Scene, Vec<[f64; 3]>)> {
    cfg.validate()?;
    if class_ids.is_empty() {
        return Err(Error::Config("generate_scene needs at least one class".into()));
    }
    if let Some(bad) = class_ids.iter().find(|&&c| c >= cfg.catalog.len()) {
        return Err(Error::Config(format!(
            "class {bad} outside catalog of {}",
            cfg.catalog.len()
        )));
    }

    let wanted = rng.int_in(cfg.objects_per_scene[0], cfg.objects_per_scene[1]);
    let mut placed: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let mut objects: Vec<(usize, [f64; 3], [f64; 3])> = Vec::new();
    let mut attempts = 0;
    while objects.len() < wanted && attempts < 200 {
        attempts += 1;
        let class_id = class_ids[rng.below(class_ids.len())];
        let shape = &cfg.catalog[class_id];
        let nominal = rng.uniform_in(shape.scale[0], shape.scale[1]);
        let size: [f64; 3] = std::array::from_fn(|_| nominal * rng.uniform_in(shape.aspect[0], shape.aspect[1]));
        let half = [0.5 * size[0], 0.5 * size[1]];
        let room = [cfg.floor_extent - half[0], cfg.floor_extent - half[1]];
        if room[0] <= 0.0 || room[1] <= 0.0 {
            continue;
        }
        let center2 = [rng.uniform_in(-room[0], room[0]), rng.uniform_in(-room[1], room[1])];
        if !footprints_clear(center2, half, &placed, cfg.spacing) {
            continue;
        }
        placed.push((center2, half));
        objects.push((class_id, [center2[0], center2[1], 0.5 * size[2]], size));
    }
    if objects.is_empty() {
        return Err(Error::Config(format!(
            "could not place any object on a floor of half-extent {}",
            cfg.floor_extent
        )));
    }

    let n_floor = (cfg.points_per_scene as f64 * cfg.floor_fraction).round() as usize;
    let n_objects = cfg.points_per_scene - n_floor;
    let per_object = n_objects / objects.len();
    let mut points = Vec::with_capacity(cfg.points_per_scene);
    let mut point_instance = Vec::with_capacity(cfg.points_per_scene);
    let mut boxes = Vec::with_capacity(objects.len());

    for (i, (class_id, center, size)) in objects.iter().enumerate() {
        let count = if i + 1 == objects.len() {
            n_objects - per_object * (objects.len() - 1)
        } else {
            per_object
        };
        let local = sample_surface(cfg.catalog[*class_id].primitive, *size, count, rng);
        let world: Vec<[f64; 3]> = local
            .iter()
            .map(|p| std::array::from_fn(|k| p[k] + center[k]))
            .collect();
        boxes.push(Box3D::enclosing(&world, *class_id));
        points.extend(world);
        point_instance.extend(std::iter::repeat_n(i as i32, count));
    }

    let mut floor = 0;
    while floor < n_floor {
        let p = [
            rng.uniform_in(-cfg.floor_extent, cfg.floor_extent),
            rng.uniform_in(-cfg.floor_extent, cfg.floor_extent),
            0.0,
        ];
        if placed.iter().any(|(c, h)| {
            (p[0] - c[0]).abs() <= h[0] + 0.02 && (p[1] - c[1]).abs() <= h[1] + 0.02
        }) {
            continue;
        }
        points.push(p);
        point_instance.push(-1);
        floor += 1;
    }

    let clean = points.clone();
    if cfg.noise_sigma > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v += cfg.noise_sigma * rng.normal();
            }
        }
    }

    let scene = Scene {
        scene_id: scene_id.to_string(),
        points,
        point_instance,
        boxes,
    };
    Ok((scene, clean))
}
