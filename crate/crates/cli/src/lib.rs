//! Command-line front end: dataset synthesis, training, inference,
//! evaluation, model audit and activity profiling.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed files), 3 invariant violation (failed audit,
//! corrupted model state).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use spikebev_core::bev::kitti::load_kitti_pointcloud;
use spikebev_core::bev::{pointcloud_to_bev, GridMeta};
use spikebev_core::config::TrainConfig;
use spikebev_core::dataset::{
    load_dataset, read_dataset_config, write_synthetic_dataset, SceneRecord,
};
use spikebev_core::error::Error;
use spikebev_core::eval::{activity_report, evaluate_model};
use spikebev_core::model::{audit_file, read_model};
use spikebev_core::train::train;
use spikebev_core::{codec, Result};

#[derive(Parser)]
#[command(name = "spikebev", version, about = "Spiking BEV object detection simulator")]
pub struct Cli {
    /// JSON configuration file (command-specific schema).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed override for seeded commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for scene-level parallelism (never changes results).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a deterministic synthetic dataset.
    Synth {
        /// Number of scenes.
        #[arg(long)]
        count: usize,
    },
    /// Train a model from a JSON training config.
    Train {
        /// Resume from a checkpoint state file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run one point cloud through a model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Velodyne-format `.bin` point cloud.
        #[arg(long)]
        input: PathBuf,
        /// Foreground margin for keypoint decoding.
        #[arg(long, default_value_t = 1)]
        margin: i64,
    },
    /// Evaluate a model over a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.7])]
        iou: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        margin: i64,
    },
    /// Verify a model file's format and range invariants.
    Audit {
        #[arg(long)]
        model: PathBuf,
    },
    /// Spike-activity and sparsity report over a dataset.
    Activity {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Per-command meta override: `{"meta": {...}}`.
#[derive(serde::Deserialize, Default)]
struct MetaConfig {
    meta: Option<GridMeta>,
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_out(out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out
        .clone()
        .ok_or_else(|| Error::config("--out <dir> is required for this command".to_string()))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_meta(config: &Option<PathBuf>) -> Result<GridMeta> {
    let Some(path) = config else {
        return Ok(GridMeta::desk_scale());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: MetaConfig =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    let meta = cfg.meta.unwrap_or_else(GridMeta::desk_scale);
    meta.validate()?;
    Ok(meta)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_synth(seed: u64, count: usize, out: PathBuf, meta: GridMeta) -> Result<()> {
    let entries = write_synthetic_dataset(&out, seed, count, &meta)?;
    // effective config: deliberately path-free so identical seeds yield
    // byte-identical directory trees
    write_json(
        &out.join("config.json"),
        &json!({ "command": "synth", "seed": seed, "count": count, "meta": meta }),
    )?;
    println!("synth: wrote {} scenes to {}", entries.len(), out.display());
    Ok(())
}

fn split_dataset(records: Vec<SceneRecord>, val_split: f64) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    let n_val = ((records.len() as f64) * val_split).round() as usize;
    let cut = records.len().saturating_sub(n_val);
    let mut train = records;
    let val = train.split_off(cut);
    (train, val)
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    resume: Option<PathBuf>,
) -> Result<()> {
    let config_path =
        config.ok_or_else(|| Error::config("--config <train config JSON> is required".to_string()))?;
    let mut cfg = TrainConfig::load(&config_path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let train_dir = cfg
        .train_dir
        .clone()
        .ok_or_else(|| Error::config("config field 'train_dir' is required".to_string()))?;
    let train_all = load_dataset(&train_dir)?;
    let (train_records, val_records) = match &cfg.val_dir {
        Some(dir) => (train_all, load_dataset(dir)?),
        None => split_dataset(train_all, cfg.val_split),
    };
    write_json(&out.join("config.json"), &cfg)?;

    let started = std::time::Instant::now();
    let (_model, report) = train(&cfg, &train_records, &val_records, &out, resume.as_deref())?;
    let wall = started.elapsed().as_secs_f64();
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("timing.json"), &json!({ "wall_seconds": wall }))?;
    println!(
        "train: {} steps, final loss {:.6}, AP@0.5 {:.4}, AP@0.7 {:.4} ({}s)",
        report.steps, report.final_loss, report.final_ap50, report.final_ap70, wall as u64
    );
    Ok(())
}

fn cmd_infer(
    model_path: PathBuf,
    input: PathBuf,
    margin: i64,
    out: PathBuf,
    meta: GridMeta,
) -> Result<()> {
    let model = read_model(&model_path)?;
    let (cloud, dropped_points) = load_kitti_pointcloud(&input)?;
    let bev = pointcloud_to_bev(&cloud, &meta)?;
    let started = std::time::Instant::now();
    let (detections, activity, dropped_dets) = model.detect(&bev, margin)?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;

    codec::write_detections(out.join("detections.txt"), &detections)?;
    let report = activity_report(&activity);
    write_json(&out.join("activity.json"), &report)?;
    write_json(&out.join("timing.json"), &json!({ "latency_ms": latency_ms }))?;
    write_json(
        &out.join("config.json"),
        &json!({
            "command": "infer",
            "model": model_path,
            "input": input,
            "margin": margin,
            "meta": meta,
        }),
    )?;
    eprintln!(
        "infer: {} detections ({} dropped), {} non-finite points skipped, {:.3} ms",
        detections.len(),
        dropped_dets,
        dropped_points,
        latency_ms
    );
    Ok(())
}

fn cmd_eval(
    model_path: PathBuf,
    data: PathBuf,
    ious: Vec<f64>,
    margin: i64,
    out: PathBuf,
    threads: usize,
) -> Result<()> {
    if ious.is_empty() {
        return Err(Error::config("at least one --iou threshold is required".to_string()));
    }
    let model = read_model(&model_path)?;
    let meta = read_dataset_config(&data)?.meta;
    let records = load_dataset(&data)?;
    let outcome = evaluate_model(&model, &records, &meta, margin, &ious, threads)?;

    let mut ap = serde_json::Map::new();
    for (iou, result) in ious.iter().zip(&outcome.results) {
        let mut by_difficulty = serde_json::Map::new();
        for (difficulty, res) in &result.by_difficulty {
            by_difficulty.insert(difficulty.name().to_string(), json!(res.ap));
        }
        ap.insert(format!("{iou}"), serde_json::Value::Object(by_difficulty));
    }
    let report = json!({
        "rows": [{ "model": file_name(&model_path), "ap": ap }],
        "scene_count": records.len(),
        "detection_count": outcome.scenes.iter().map(|s| s.detections.len()).sum::<usize>(),
        "dropped_detections": outcome.dropped,
    });
    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("timing.json"),
        &json!({ "mean_inference_latency_ms": outcome.mean_latency_ms }),
    )?;
    write_json(
        &out.join("config.json"),
        &json!({
            "command": "eval",
            "model": model_path,
            "data": data,
            "iou": ious,
            "margin": margin,
            "meta": meta,
        }),
    )?;
    for (iou, result) in ious.iter().zip(&outcome.results) {
        let easy = &result.by_difficulty[&spikebev_core::bev::Difficulty::Easy];
        println!(
            "eval: AP@{iou} easy {:.4} (tp {} fp {} fn {})",
            easy.ap, easy.tp, easy.fp, easy.fn_
        );
    }
    eprintln!("eval: mean inference latency {:.3} ms", outcome.mean_latency_ms);
    Ok(())
}

fn cmd_audit(model_path: PathBuf) -> Result<()> {
    let report = audit_file(&model_path)?;
    if report.passed {
        println!("audit: PASS {}", model_path.display());
        Ok(())
    } else {
        for v in &report.violations {
            eprintln!("audit: {v}");
        }
        Err(Error::invariant(format!(
            "{}: {} violation(s)",
            model_path.display(),
            report.violations.len()
        )))
    }
}

fn cmd_activity(model_path: PathBuf, data: PathBuf, out: PathBuf, threads: usize) -> Result<()> {
    let model = read_model(&model_path)?;
    let meta = read_dataset_config(&data)?.meta;
    let records = load_dataset(&data)?;
    let outcome = evaluate_model(&model, &records, &meta, 1, &[], threads)?;
    write_json(&out.join("activity.json"), &outcome.activity)?;
    write_json(
        &out.join("timing.json"),
        &json!({ "mean_inference_latency_ms": outcome.mean_latency_ms }),
    )?;
    write_json(
        &out.join("config.json"),
        &json!({ "command": "activity", "model": model_path, "data": data, "meta": meta }),
    )?;
    println!(
        "activity: {} scenes, {} synaptic ops, mean sparsity {:.4}",
        records.len(),
        outcome.activity.energy_proxy_synops,
        outcome.activity.mean_sparsity
    );
    Ok(())
}

/// Run a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Synth { count } => match (require_out(&cli.out), load_meta(&cli.config)) {
            (Ok(out), Ok(meta)) => cmd_synth(cli.seed.unwrap_or(0), count, out, meta),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
        Command::Train { resume } => {
            require_out(&cli.out).and_then(|out| cmd_train(cli.config, cli.seed, out, resume))
        }
        Command::Infer { model, input, margin } => match (require_out(&cli.out), load_meta(&cli.config)) {
            (Ok(out), Ok(meta)) => cmd_infer(model, input, margin, out, meta),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
        Command::Eval { model, data, iou, margin } => {
            require_out(&cli.out).and_then(|out| cmd_eval(model, data, iou, margin, out, cli.threads))
        }
        Command::Audit { model } => cmd_audit(model),
        Command::Activity { model, data } => {
            require_out(&cli.out).and_then(|out| cmd_activity(model, data, out, cli.threads))
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Io { .. } | Error::Format(_) => 2,
        Error::Invariant(_) | Error::Shape(_) => 3,
    }
}

/// Parse argv-style arguments and run. Usage errors exit 1; help and
/// version requests exit 0.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            code
        }
    }
}
