//! Prompt-guided center refinement: attention weights with and without
//! prompts, and the prompt pool snapshot/restore cycle.

use incdet::detector::{forward, prepare_scene, DetectorConfig, Model, Refiner};
use incdet::numeric::{Bound, SeededRng, Tape};
use incdet::scene::{generate_scene, GeneratorConfig};

fn main() -> incdet::Result<()> {
    let scene = generate_scene(&GeneratorConfig::default(), &[0, 1], "prompt-demo", &mut SeededRng::new(5))?;
    let cfg = DetectorConfig::default();
    let prep = prepare_scene(&scene, &cfg)?;
    let mut model = Model::new(cfg.clone(), Refiner::Prompt, 2, 10, 4, &mut SeededRng::new(2))?;

    let tape = Tape::new();
    let bound = Bound::frozen(&tape, &model.params);
    let pool = model.prompts.as_ref().expect("prompt refiner");
    let prompts = tape.constant(pool.active().clone());
    let out = forward(&bound, Some(prompts), &prep, &cfg, Refiner::Prompt, None)?;
    let weights = out.attention.expect("attention weights")[0].value();
    let half = pool.count() / 2;
    let on_prompts: f64 = (0..weights.rows()).map(|i| weights.row(i)[..half].iter().sum::<f64>()).sum();
    println!(
        "head 0: {} queries over {} keys, {:.1}% of attention on prompt keys",
        weights.rows(),
        weights.cols(),
        100.0 * on_prompts / weights.rows() as f64
    );
    let shift: f64 = (0..prep.seeds.len())
        .map(|i| {
            let (a, b) = (out.votes.value(), out.seeds.value());
            (0..3).map(|k| (a.row(i)[k] - b.row(i)[k]).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / prep.seeds.len() as f64;
    println!("mean refinement offset {shift:.4}");

    let pool = model.prompts.as_mut().unwrap();
    pool.store(1)?;
    pool.active_mut().data_mut()[0] += 1.0;
    pool.select(2)?;
    println!("restored prompts match snapshot: {}", pool.active() == pool.snapshot(1).unwrap());
    Ok(())
}
