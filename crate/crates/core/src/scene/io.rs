use std::path::Path;

use super::{Box3D, Scene};
use crate::container::{read_file, write_atomic, Decoder, Encoder};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCN3";
const VERSION: u32 = 1;

pub fn scene_to_bytes(scene: &Scene) -> Vec<u8> {
    let mut e = Encoder::new(MAGIC, VERSION);
    e.str(&scene.scene_id);
    e.len(scene.points.len());
    for p in &scene.points {
        p.iter().for_each(|v| e.f64(*v));
    }
    for i in &scene.point_instance {
        e.i32(*i);
    }
    e.len(scene.boxes.len());
    for b in &scene.boxes {
        b.center.iter().chain(&b.size).for_each(|v| e.f64(*v));
        e.len(b.class_id);
    }
    e.finish()
}

pub(crate) fn scene_from_bytes(path: &Path, bytes: &[u8]) -> Result<Scene> {
    let mut d = Decoder::open(path, bytes, MAGIC, VERSION)?;
    let scene_id = d.str()?;
    let n = d.len()?;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([d.f64()?, d.f64()?, d.f64()?]);
    }
    let mut point_instance = Vec::with_capacity(n);
    for _ in 0..n {
        point_instance.push(d.i32()?);
    }
    let nb = d.len()?;
    let mut boxes = Vec::with_capacity(nb);
    for _ in 0..nb {
        let center = [d.f64()?, d.f64()?, d.f64()?];
        let size = [d.f64()?, d.f64()?, d.f64()?];
        boxes.push(Box3D {
            center,
            size,
            class_id: d.len()?,
        });
    }
    d.finish()?;
    if point_instance.iter().any(|&i| i < -1 || i >= nb as i32) {
        return Err(Error::format(path, "point_instance refers to a missing box"));
    }
    Ok(Scene {
        scene_id,
        points,
        point_instance,
        boxes,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    write_atomic(path, &scene_to_bytes(scene))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let bytes = read_file(path)?;
    scene_from_bytes(path, &bytes)
}
