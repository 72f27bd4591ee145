//! Run an untrained detector on one scene and decode its detections.

use incdet::detector::{prepare_scene, DetectorConfig, Model, Refiner};
use incdet::numeric::SeededRng;
use incdet::scene::{generate_scene, GeneratorConfig};

fn main() -> incdet::Result<()> {
    let gen = GeneratorConfig::default();
    let scene = generate_scene(&gen, &[0, 1, 2], "demo", &mut SeededRng::new(3))?;
    let cfg = DetectorConfig::default();
    let prep = prepare_scene(&scene, &cfg)?;
    let model = Model::new(cfg, Refiner::Prompt, 3, 10, 4, &mut SeededRng::new(1))?;

    let proposals = model.infer(&prep, None)?;
    println!("{} seeds, {} proposals", prep.seeds.len(), proposals.len());
    for d in model.detect(&prep, 0.05)?.iter().take(5) {
        println!(
            "class {} conf {:.3} center {:.2?} size {:.2?}",
            d.class_id, d.confidence, d.box3d.center, d.box3d.size
        );
    }
    println!("ground truth: {} boxes", scene.boxes.len());
    Ok(())
}
