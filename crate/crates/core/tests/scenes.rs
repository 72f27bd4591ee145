mod common;

use std::collections::BTreeSet;

use common::{mini_generator, mini_scene};
use incdet::detector::farthest_point_sample;
use incdet::numeric::SeededRng;
use incdet::scene::{
    build_task_stream, generate_scene_with_clean_points, load_scene, save_scene, scene_to_bytes,
    seed_center_targets, Box3D, GeneratorConfig, ScenesPerTask,
};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn clean_scene(seed: u64, classes: &[usize]) -> (incdet::scene::Scene, Vec<[f64; 3]>) {
    let cfg = GeneratorConfig::default();
    let mut rng = SeededRng::new(seed).substream_named("clean");
    generate_scene_with_clean_points(&cfg, classes, &format!("c{seed}"), &mut rng).unwrap()
}

#[test]
fn boxes_contain_their_clean_points_over_1000_scenes() {
    let all: Vec<usize> = (0..10).collect();
    for seed in 0..1000 {
        let (scene, clean) = clean_scene(seed, &all);
        assert_eq!(clean.len(), scene.points.len());
        for (p, &inst) in clean.iter().zip(&scene.point_instance) {
            if inst >= 0 {
                let b = &scene.boxes[inst as usize];
                assert!(b.contains(p), "scene {seed}: {p:?} outside {b:?}");
            }
        }
    }
}

#[test]
fn shrinking_any_face_excludes_a_point() {
    for seed in 0..50 {
        let (scene, clean) = clean_scene(seed, &[0, 1, 2, 3]);
        for (i, b) in scene.boxes.iter().enumerate() {
            let own: Vec<&[f64; 3]> = clean
                .iter()
                .zip(&scene.point_instance)
                .filter(|(_, &inst)| inst == i as i32)
                .map(|(p, _)| p)
                .collect();
            for k in 0..3 {
                let cut = 1e-6 * b.size[k];
                for sign in [-1.0, 1.0] {
                    let mut shrunk = *b;
                    shrunk.size[k] -= cut;
                    shrunk.center[k] += sign * cut / 2.0;
                    assert!(
                        own.iter().any(|p| !shrunk.contains(p)),
                        "scene {seed} box {i} axis {k} side {sign}: not tight"
                    );
                }
            }
        }
    }
}

#[test]
fn task_streams_are_disjoint() {
    let stream = build_task_stream(
        &mini_generator(),
        &[2, 2],
        ScenesPerTask { train: 200, eval: 50 },
        11,
    )
    .unwrap();
    stream.validate().unwrap();
    let classes: Vec<BTreeSet<usize>> =
        stream.tasks.iter().map(|t| t.class_ids.iter().copied().collect()).collect();
    assert_eq!(classes[0], BTreeSet::from([0, 1]));
    assert_eq!(classes[1], BTreeSet::from([2, 3]));
    assert!(classes[0].is_disjoint(&classes[1]));
    let ids = |t: usize| -> BTreeSet<&str> {
        stream.tasks[t].train.iter().map(|s| s.scene_id.as_str()).collect()
    };
    assert_eq!(ids(0).len(), 200);
    assert!(ids(0).is_disjoint(&ids(1)));
    for s in &stream.tasks[1].train {
        assert!(s.boxes.iter().all(|b| classes[1].contains(&b.class_id)));
    }
    for s in &stream.tasks[0].eval {
        assert!(s.boxes.iter().all(|b| classes[0].contains(&b.class_id)));
    }
}

#[test]
fn streams_are_deterministic() {
    let build = || {
        build_task_stream(&mini_generator(), &[2, 2], ScenesPerTask { train: 5, eval: 3 }, 4).unwrap()
    };
    assert_eq!(build(), build());
}

#[test]
fn masked_fraction_matches_point_in_box() {
    let mut rng = SeededRng::new(8).substream_named("seeds");
    for seed in 0..30 {
        let scene = mini_scene(&[0, 1, 2, 3], seed, "mask");
        let seeds: Vec<[f64; 3]> = (0..64)
            .map(|_| [rng.uniform_in(-2.5, 2.5), rng.uniform_in(-2.5, 2.5), rng.uniform_in(0.0, 1.5)])
            .chain(scene.points.iter().take(64).copied())
            .collect();
        let (_, mask) = seed_center_targets(&scene, &seeds);
        let inside = |p: &[f64; 3], b: &Box3D| {
            (0..3).all(|k| (p[k] - b.center[k]).abs() <= b.size[k] / 2.0)
        };
        let brute = seeds.iter().filter(|p| scene.boxes.iter().any(|b| inside(p, b))).count();
        assert_eq!(mask.iter().filter(|m| **m).count(), brute, "scene {seed}");
    }
}

#[test]
fn hundred_scenes_round_trip_with_equal_checksums() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..100 {
        let scene = mini_scene(&[0, 1, 2, 3, 4], seed, &format!("rt{seed}"));
        let path = dir.path().join(format!("{seed}.scene"));
        save_scene(&scene, &path).unwrap();
        let back = load_scene(&path).unwrap();
        assert_eq!(back, scene);
        let digest = |s| Sha256::digest(scene_to_bytes(s));
        assert_eq!(digest(&back), digest(&scene));
        assert_eq!(Sha256::digest(std::fs::read(&path).unwrap()), digest(&scene));
    }
}

#[test]
fn seed_sets_ignore_point_order() {
    for seed in 0..20 {
        let scene = mini_scene(&[0, 1, 2], seed, "perm");
        let mut shuffled = scene.points.clone();
        SeededRng::new(seed).substream_named("shuffle").shuffle(&mut shuffled);
        let pick = |pts: &[[f64; 3]]| -> BTreeSet<[u64; 3]> {
            farthest_point_sample(pts, 32)
                .iter()
                .map(|&i| pts[i].map(f64::to_bits))
                .collect()
        };
        assert_eq!(pick(&scene.points), pick(&shuffled), "scene {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn enclosing_box_contains_its_points(
        pts in prop::collection::vec(prop::array::uniform3(-50.0f64..50.0), 1..40)
    ) {
        let b = Box3D::enclosing(&pts, 0);
        for p in &pts {
            prop_assert!(b.contains(p));
        }
        prop_assert!(b.size.iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn filtering_boxes_keeps_instances_consistent(seed in 0u64..500, keep_mask in 0u8..32) {
        let scene = mini_scene(&[0, 1, 2, 3, 4], seed, "filter");
        let filtered = scene.filter_boxes(|c| keep_mask & (1 << c) != 0);
        prop_assert_eq!(filtered.points.len(), scene.points.len());
        prop_assert!(filtered.boxes.iter().all(|b| keep_mask & (1 << b.class_id) != 0));
        for (i, &inst) in filtered.point_instance.iter().enumerate() {
            if inst >= 0 {
                let kept = &filtered.boxes[inst as usize];
                let orig = &scene.boxes[scene.point_instance[i] as usize];
                prop_assert_eq!(kept, orig);
            }
        }
    }
}
