//! The subcommands. Each writes its report to `out` and returns a typed
//! error; the binary maps errors to exit codes.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use skge_core::data::{collate, synth_scene, Sample, SceneConfig};
use skge_core::model::{Model, SdcSource};
use skge_core::nn::{ParamStore, Session};
use skge_core::scoring::{PenaltyTable, TaskMetrics};
use skge_core::skge::SkipRoute;
use skge_core::training::{evaluate_report, split_indices, EpochReport, EvalReport, Trainer, NUM_TASKS, TASK_NAMES};

use crate::config::{effective_seed, RunConfig};
use crate::drivelog;
use crate::error::{CliError, Result};
use crate::io::{load_dataset, load_params, load_resume, save_params, save_resume, store_dataset};

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(CliError::io(Path::new("<stdout>")))
}

#[derive(Args, Clone, Debug)]
pub struct GenArgs {
    /// dataset directory to create
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// image side in pixels
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// also generate point clouds
    #[arg(long)]
    pub lidar: bool,
}

/// Generator seeds for a dataset of `count` samples.
pub fn sample_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

pub fn cmd_gen(args: &GenArgs, out: &mut dyn Write) -> Result<()> {
    if args.count == 0 {
        return Err(CliError::usage("--count must be positive"));
    }
    if args.size < 8 {
        return Err(CliError::usage("--size must be at least 8"));
    }
    let seed = effective_seed(args.seed)?;
    let cfg = SceneConfig {
        size: args.size,
        empty: false,
        lidar: args.lidar,
    };
    let samples: Vec<(u64, Sample)> = sample_seeds(seed, args.count)
        .into_iter()
        .map(|s| (s, synth_scene(s, &cfg)))
        .collect();
    store_dataset(&args.out, &samples)?;
    write_out(
        out,
        &format!("wrote {} samples of {}x{} to {}\n", args.count, args.size, args.size, args.out.display()),
    )
}

#[derive(Args, Clone, Debug, Default)]
pub struct ModelArgs {
    /// run configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// skip route for both encoders, e.g. `1->4`, `2,3->4`, `none`
    #[arg(long = "skge-route")]
    pub route: Option<SkipRoute>,
}

impl ModelArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(r) = &self.route {
            cfg.model.route_a = r.clone();
            cfg.model.route_b = r.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn check_samples(samples: &[Sample], cfg: &RunConfig, dir: &Path) -> Result<()> {
    let size = cfg.model.backbone.input_size;
    for (i, s) in samples.iter().enumerate() {
        if s.size != size {
            return Err(CliError::usage(format!(
                "{}: sample {i} is {}x{} but backbone.input_size is {size}",
                dir.display(),
                s.size,
                s.size
            )));
        }
        if cfg.model.lidar && s.lidar.is_none() {
            return Err(CliError::usage(format!(
                "{}: model.lidar is set but sample {i} has no point cloud",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let model = Model::new(&mut store, &cfg.model, &mut rng)?;
    Ok((model, store))
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// checkpoint of the best-validation weights
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// overrides train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// overrides train.max_epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// per-epoch metrics log; defaults to `<out>.metrics.jsonl`
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// continue the run saved next to `--out`
    #[arg(long)]
    pub resume: bool,
}

fn task_map(v: &[f64; NUM_TASKS]) -> Value {
    let m: Map<String, Value> = TASK_NAMES.iter().zip(v).map(|(k, &x)| (k.to_string(), json!(x))).collect();
    Value::Object(m)
}

pub fn epoch_json(r: &EpochReport) -> Value {
    json!({
        "epoch": r.epoch,
        "lr": r.lr,
        "train_loss": r.train_loss,
        "train": task_map(&r.train_tasks),
        "val_loss": r.val_loss,
        "val": task_map(&r.val_tasks),
        "alpha": task_map(&r.alpha),
        "improved": r.improved,
    })
}

pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = args.model.load()?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.train.seed = effective_seed(cfg.train.seed)?;
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    Ok(cfg)
}

pub fn metrics_path(args: &TrainArgs) -> PathBuf {
    args.metrics.clone().unwrap_or_else(|| {
        let mut p = args.out.as_os_str().to_owned();
        p.push(".metrics.jsonl");
        p.into()
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<Vec<EpochReport>> {
    let cfg = train_config(args)?;
    let samples = load_dataset(&args.data)?;
    if samples.is_empty() {
        return Err(CliError::usage(format!("{}: dataset is empty", args.data.display())));
    }
    check_samples(&samples, &cfg, &args.data)?;
    let (tr, va) = split_indices(samples.len(), cfg.val_fraction, cfg.train.seed);
    let train: Vec<Sample> = tr.iter().map(|&i| samples[i].clone()).collect();
    let val: Vec<Sample> = va.iter().map(|&i| samples[i].clone()).collect();

    let (model, mut store) = build_model(&cfg)?;
    let mut trainer = Trainer::new(&store, cfg.train);
    if args.resume {
        load_resume(&args.out, &mut store, &mut trainer)?;
    }
    let mpath = metrics_path(args);
    let log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(args.resume)
        .truncate(!args.resume)
        .open(&mpath)
        .map_err(CliError::io(&mpath))?;
    let mut log = BufWriter::new(log);

    write_out(
        out,
        &format!(
            "training on {} samples, validating on {}, {} parameters\n",
            train.len(),
            val.len(),
            store.numel()
        ),
    )?;
    let mut reports = Vec::new();
    while !trainer.state.stopped && trainer.state.epoch < cfg.train.max_epochs {
        let r = trainer.epoch(&model, &mut store, &train, &val)?;
        writeln!(log, "{}", epoch_json(&r)).and_then(|_| log.flush()).map_err(CliError::io(&mpath))?;
        save_params(&args.out, trainer.best.as_ref().unwrap_or(&store))?;
        save_resume(&args.out, &store, &trainer)?;
        write_out(
            out,
            &format!(
                "epoch {:>3}  lr {:.3e}  train {:.5}  val {:.5}{}\n",
                r.epoch,
                r.lr,
                r.train_loss,
                r.val_loss,
                if r.improved { "  *" } else { "" }
            ),
        )?;
        let stop = r.stop;
        reports.push(r);
        if stop {
            break;
        }
    }
    Ok(reports)
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
}

pub fn report_json(r: &EvalReport) -> Value {
    let metrics: Map<String, Value> = TaskMetrics::NAMES
        .iter()
        .zip(r.metrics.values())
        .map(|(k, v)| (k.to_string(), json!(v)))
        .collect();
    json!({
        "samples": r.samples,
        "metrics": metrics,
        "task_losses": task_map(&r.task_losses),
        "test_loss": r.test_loss,
    })
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let cfg = args.model.load()?;
    let (model, mut store) = build_model(&cfg)?;
    load_params(&args.ckpt, &mut store)?;
    let samples = load_dataset(&args.data)?;
    check_samples(&samples, &cfg, &args.data)?;
    let report = evaluate_report(&model, &store, &samples, &cfg.train)?;
    let text = serde_json::to_string_pretty(&report_json(&report)).expect("json value serializes");
    write_out(out, &format!("{text}\n"))?;
    Ok(report)
}

#[derive(Args, Clone, Debug)]
pub struct ScoreArgs {
    /// directory of per-route `.jsonl` drive logs
    #[arg(long, required_unless_present = "pairs", conflicts_with = "pairs")]
    pub logs: Option<PathBuf>,
    /// CSV of `route_id,rc,ip` aggregates instead of raw logs
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

pub fn cmd_score(args: &ScoreArgs, out: &mut dyn Write) -> Result<skge_core::scoring::ScoreSummary> {
    let summary = match (&args.logs, &args.pairs) {
        (Some(dir), _) => {
            let logs = drivelog::load_logs(dir)?;
            skge_core::scoring::score_routes(&logs, &PenaltyTable::default())?
        }
        (None, Some(p)) => {
            let text = fs::read_to_string(p).map_err(CliError::io(p))?;
            drivelog::summarize(drivelog::parse_pairs(&text, p)?)?
        }
        (None, None) => return Err(CliError::usage("either --logs or --pairs is required")),
    };
    let text = if args.json {
        let routes: Vec<Value> = summary
            .routes
            .iter()
            .map(|r| json!({"route_id": r.route_id, "rc": r.rc, "ip": r.ip, "ds": r.ds}))
            .collect();
        let v = json!({"routes": routes, "mean_rc": summary.mean_rc, "mean_ip": summary.mean_ip, "ds": summary.ds});
        format!("{}\n", serde_json::to_string_pretty(&v).expect("json value serializes"))
    } else {
        drivelog::format_table(&summary)
    };
    write_out(out, &text)?;
    Ok(summary)
}

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub iters: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// overrides backbone.input_size
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub iters: usize,
    pub input_size: usize,
    pub fps: f64,
    pub mean_ms: f64,
    /// peak resident set in KiB, when the platform reports it
    pub peak_rss_kib: Option<u64>,
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_rss_kib() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("VmHWM:"))
        .and_then(|v| v.trim().trim_end_matches("kB").trim().parse().ok())
}

const WARMUP: usize = 10;

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write) -> Result<BenchReport> {
    if args.iters == 0 {
        return Err(CliError::usage("--iters must be positive"));
    }
    let mut cfg = args.model.load()?;
    if let Some(s) = args.size {
        cfg.model.backbone.input_size = s;
        cfg.validate()?;
    }
    let (model, mut store) = build_model(&cfg)?;
    load_params(&args.ckpt, &mut store)?;
    let size = cfg.model.backbone.input_size;
    let sample = synth_scene(
        0,
        &SceneConfig {
            size,
            empty: false,
            lidar: cfg.model.lidar,
        },
    );
    let batch = collate::<f32>(&[&sample], &cfg.model.bev, cfg.model.lidar)?;
    let forward = || -> Result<()> {
        let mut s = Session::new(&store);
        model.forward(&mut s, &batch, SdcSource::Predicted)?;
        Ok(())
    };
    for _ in 0..WARMUP {
        forward()?;
    }
    let t = Instant::now();
    for _ in 0..args.iters {
        forward()?;
    }
    let secs = t.elapsed().as_secs_f64();
    let report = BenchReport {
        iters: args.iters,
        input_size: size,
        fps: args.iters as f64 / secs,
        mean_ms: secs * 1e3 / args.iters as f64,
        peak_rss_kib: peak_rss_kib(),
    };
    let v = json!({
        "iters": report.iters,
        "input_size": report.input_size,
        "fps": report.fps,
        "mean_ms": report.mean_ms,
        "peak_rss_kib": report.peak_rss_kib,
    });
    write_out(out, &format!("{}\n", serde_json::to_string_pretty(&v).expect("json value serializes")))?;
    Ok(report)
}

/// Writes the default configuration, for editing.
pub fn cmd_config(path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let text = RunConfig::default().to_text();
    match path {
        Some(p) => {
            let mut f = File::create(p).map_err(CliError::io(p))?;
            f.write_all(text.as_bytes()).map_err(CliError::io(p))
        }
        None => write_out(out, &text),
    }
}
