//! A reduced two-task experiment: train the base classes once, then compare
//! fine-tuning against the full method on the new task.
//!
//! Pass a seed as the first argument; set INCDET_LOG=info for progress.

use incdet::scene::build_task_stream;
use incdet::trainer::{continue_experiment, first_task, ExperimentConfig, PreparedStream, Variant};

fn main() -> incdet::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(incdet::cli::LOG_ENV, "warn")).init();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    cfg.scenes_per_task.train = 60;
    cfg.scenes_per_task.eval = 20;
    cfg.optimizer.epochs = 20;

    let stream = build_task_stream(&cfg.generator, &cfg.split, cfg.scenes_per_task, seed)?;
    let data = PreparedStream::new(&stream, &cfg)?;
    for variant in [Variant::Full, Variant::Finetune] {
        let run = ExperimentConfig { variant, ..cfg.clone() };
        let state = continue_experiment(first_task(&run, &data, variant.refiner())?, &run, &data)?;
        for r in &state.history {
            let m = &r.metrics;
            println!(
                "{:<9} task {}  base {:5.1}  novel {:>5}  avg {:5.1}",
                variant.name(),
                r.task,
                m.base_map.unwrap_or(0.0),
                m.novel_map.map_or("-".into(), |v| format!("{v:.1}")),
                m.avg_map.unwrap_or(0.0)
            );
        }
    }
    Ok(())
}
