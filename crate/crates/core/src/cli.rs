//! Command-line front end: `gen-data`, `train`, `eval`, `ablate`, `report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::detector::{load_checkpoint, prepare_scene, save_checkpoint};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::scene::{build_task_stream, load_stream, save_stream, TaskStream};
use crate::trainer::{
    ablation_summary, comparison_csv, comparison_rows, comparison_text, continue_experiment,
    evaluate_model, first_task, run_experiment, ExperimentConfig, MetricsDocument, PreparedStream,
    Variant,
};
use crate::write_atomic;

/// Environment variable holding the log filter (e.g. `info`, `debug`).
pub const LOG_ENV: &str = "INCDET_LOG";

#[derive(Parser, Debug)]
#[command(name = "incdet", version, about = "Class-incremental 3D detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task stream and write it to --out.
    GenData(Common),
    /// Train one variant over the task stream.
    Train(TrainArgs),
    /// Score a checkpoint on the eval scenes of a stored stream.
    Eval(EvalArgs),
    /// Run the four-variant ablation ladder.
    Ablate(AblateArgs),
    /// Merge metrics files into comparison tables.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides the config variant.
    #[arg(long)]
    variant: Option<String>,
    /// Stored stream to train on instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Stream directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Minimum objectness for a detection.
    #[arg(long, default_value_t = 0.05)]
    objectness_threshold: f64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated seeds; overrides --seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Metrics files, or directories searched for `metrics.json`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code: 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn stream_for(cfg: &ExperimentConfig) -> Result<TaskStream> {
    build_task_stream(&cfg.generator, &cfg.split, cfg.scenes_per_task, cfg.seed)
}

fn gen_data(a: &Common) -> Result<()> {
    let cfg = load_config(a)?;
    let stream = stream_for(&cfg)?;
    save_stream(&stream, &a.out)?;
    println!(
        "wrote {} tasks over {} classes to {}",
        stream.tasks.len(),
        stream.total_classes,
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.common)?;
    if let Some(v) = &a.variant {
        cfg.variant = Variant::parse(v)?;
    }
    let stream = match &a.data {
        Some(dir) => load_stream(dir)?,
        None => stream_for(&cfg)?,
    };
    let data = PreparedStream::new(&stream, &cfg)?;
    info!("training {} with seed {}", cfg.variant.name(), cfg.seed);
    let state = run_experiment(&cfg, &data)?;
    let out = &a.common.out;
    let doc = MetricsDocument::new(&cfg, state.history);
    doc.save(&out.join("metrics.json"))?;
    save_checkpoint(&state.model, &out.join("model.ckpt"))?;
    if let Some(r) = doc.final_report() {
        println!("{}", summary_line(cfg.variant.name(), &r.metrics));
    }
    Ok(())
}

fn summary_line(name: &str, m: &MetricsReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    format!(
        "{name}: B {} N {} Avg {} (mAP@0.25)",
        f(m.base_map),
        f(m.novel_map),
        f(m.avg_map)
    )
}

#[derive(Serialize)]
struct EvalDocument<'a> {
    format: &'static str,
    version: u32,
    checkpoint: String,
    data: String,
    tasks_covered: usize,
    metrics: &'a MetricsReport,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let stream = load_stream(&a.data)?;
    let known = model.num_classes();
    let tasks = (1..=stream.tasks.len())
        .rev()
        .find(|&t| stream.classes_up_to(t).len() <= known)
        .ok_or_else(|| Error::Input(format!("model knows {known} classes, fewer than the first task")))?;
    let classes = stream.classes_up_to(tasks);
    let base = stream.tasks[0].class_ids.clone();
    let novel: Vec<usize> = classes.iter().copied().filter(|c| !base.contains(c)).collect();
    let scenes = stream
        .eval_scenes_up_to(tasks)
        .into_iter()
        .map(|s| prepare_scene(s, &model.config))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = scenes.iter().collect();
    let metrics = evaluate_model(&model, &refs, &base, &novel, a.objectness_threshold)?;
    let doc = EvalDocument {
        format: "incdet-eval",
        version: 1,
        checkpoint: a.checkpoint.display().to_string(),
        data: a.data.display().to_string(),
        tasks_covered: tasks,
        metrics: &metrics,
    };
    let json = serde_json::to_string_pretty(&doc)? + "\n";
    write_atomic(&a.out.join("eval.json"), json.as_bytes())?;
    println!("{}", summary_line("checkpoint", &metrics));
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = load_config(&a.common)?;
    let seeds = if a.seeds.is_empty() { vec![base.seed] } else { a.seeds.clone() };
    let mut docs = Vec::new();
    for &seed in &seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let data = PreparedStream::new(&stream_for(&cfg)?, &cfg)?;
        // Variants that share a refiner share their first-task model.
        let mut shared = Vec::new();
        for &variant in &Variant::LADDER {
            let refiner = variant.refiner();
            let start = match shared.iter().find(|(r, _)| *r == refiner) {
                Some((_, s)) => Clone::clone(s),
                None => {
                    let s = first_task(&cfg, &data, refiner)?;
                    shared.push((refiner, s.clone()));
                    s
                }
            };
            let run_cfg = ExperimentConfig { variant, ..cfg.clone() };
            let state = continue_experiment(start, &run_cfg, &data)?;
            let doc = MetricsDocument::new(&run_cfg, state.history);
            let dir = a.common.out.join(format!("seed-{seed}")).join(variant.name());
            doc.save(&dir.join("metrics.json"))?;
            if let Some(r) = doc.final_report() {
                println!("seed {seed} {}", summary_line(variant.name(), &r.metrics));
            }
            docs.push(doc);
        }
    }
    write_tables(&docs, &a.common.out, true)
}

fn collect_metrics(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() {
                collect_metrics(&e, found)?;
            } else if e.file_name().is_some_and(|n| n == "metrics.json") {
                found.push(e);
            }
        }
        Ok(())
    } else {
        found.push(path.to_path_buf());
        Ok(())
    }
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    for p in &a.inputs {
        collect_metrics(p, &mut files)?;
    }
    if files.is_empty() {
        return Err(Error::Input("no metrics.json files found".into()));
    }
    let docs = files
        .iter()
        .map(|f| MetricsDocument::load(f))
        .collect::<Result<Vec<_>>>()?;
    write_tables(&docs, &a.out, false)
}

fn write_tables(docs: &[MetricsDocument], out: &Path, ladder: bool) -> Result<()> {
    let rows = comparison_rows(docs)?;
    write_atomic(&out.join("comparison.csv"), comparison_csv(&rows)?.as_bytes())?;
    let text = if ladder {
        ablation_summary(docs)?
    } else {
        comparison_text(&rows)
    };
    write_atomic(&out.join("comparison.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(run(["incdet", "frobnicate"]), 2);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run(["incdet", "train", "--out", "x", "--bogus"]), 2);
    }

    #[test]
    fn missing_required_flag_is_a_usage_error() {
        assert_eq!(run(["incdet", "eval", "--data", "d"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["incdet", "--help"]), 0);
    }

    #[test]
    fn bad_variant_fails_without_output() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let code = run([
            "incdet".into(),
            "train".into(),
            "--variant".into(),
            "nope".into(),
            "--out".into(),
            out.clone().into_os_string(),
        ] as [std::ffi::OsString; 6]);
        assert_eq!(code, 1);
        assert!(!out.exists());
    }
}
