//! Build a 2+2 task stream, inspect it, and round-trip it through disk.

use incdet::scene::{build_task_stream, load_stream, save_stream, GeneratorConfig, ScenesPerTask};

fn main() -> incdet::Result<()> {
    let cfg = GeneratorConfig::default();
    let stream = build_task_stream(&cfg, &[2, 2], ScenesPerTask { train: 20, eval: 5 }, 42)?;
    stream.validate()?;

    for task in &stream.tasks {
        let objects: usize = task.train.iter().map(|s| s.boxes.len()).sum();
        println!(
            "task {}: classes {:?}, {} train scenes ({objects} objects), {} eval scenes",
            task.index,
            task.class_ids,
            task.train.len(),
            task.eval.len()
        );
    }
    let scene = &stream.tasks[0].train[0];
    println!("\n{} has {} points", scene.scene_id, scene.num_points());
    for b in &scene.boxes {
        let name = &cfg.catalog[b.class_id].name;
        println!("  {name:<10} center {:.2?} size {:.2?}", b.center, b.size);
    }

    let dir = std::env::temp_dir().join("incdet-stream-example");
    save_stream(&stream, &dir)?;
    assert_eq!(load_stream(&dir)?, stream);
    println!("\nround trip through {} ok", dir.display());
    Ok(())
}
