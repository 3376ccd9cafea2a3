mod logging;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use tttflow_core::adapt::{baseline_predictions, predict_with_adaptation, shift_score};
use tttflow_core::bench::{
    ablation_joint_vs_separate, curve_csv, iteration_curve, project_features, projection_csv, run_benchmark, Method,
    ProjectionMode,
};
use tttflow_core::checkpoint::{self, FORMAT_VERSION};
use tttflow_core::config::RunConfig;
use tttflow_core::data::{
    apply_corruption, corrupted_file_name, load_csv, natural_shift, save_csv, CorruptionKind, CorruptionSpec,
    FAMILY_NAME,
};
use tttflow_core::io_util::{file_sha256, write_atomic};
use tttflow_core::{pipeline, Error};

#[derive(Parser)]
#[command(name = "tttflow", version, about = "Normalizing-flow test-time adaptation on synthetic shifts")]
struct Cli {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set adapt.lr=0.002`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the source train/test sets, the natural shift and every corruption as CSV.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        /// Evaluation seed for the test-side files.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
    },
    /// Train the source classifier.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train the flow on frozen split-point features.
    TrainFlow {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Backbone with the batch-norm statistics refreshed during flow training.
        /// Required when `flow_train.bn_stat_update` is true.
        #[arg(long)]
        out_backbone: Option<PathBuf>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train classifier and flow together on the weighted joint loss.
    TrainJoint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_backbone: PathBuf,
        #[arg(long)]
        out_flow: PathBuf,
        /// Weight of the flow loss; defaults to `train.beta`.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Adapt on one target dataset and print baseline and adapted metrics.
    AdaptEval {
        #[command(flatten)]
        models: Models,
        #[arg(long)]
        data: PathBuf,
        /// Per-batch adaptation log (JSON lines).
        #[arg(long)]
        batch_log: Option<PathBuf>,
    },
    /// Corruption x severity x iteration x seed grid.
    Bench {
        #[command(flatten)]
        models: Models,
        #[arg(long, default_value = "tttflow")]
        name: String,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also write the per-step accuracy curve for gaussian noise.
        #[arg(long)]
        curve: bool,
    },
    /// Separate training against joint training at each `joint.betas` value.
    Ablation {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// 2-D PCA projection of split-point features.
    Project {
        #[command(flatten)]
        models: Models,
        /// Dataset CSVs; each file stem becomes the row tag. Repeatable.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Pre)]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Models {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    flow: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Pre,
    Post,
}

/// Exit code classes: 1 for usage or configuration, 2 for runtime failures.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let (code, kind) = match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => (1, "config"),
            Some(Error::Csv { .. }) => (2, "data"),
            Some(Error::Checkpoint(_)) => (2, "checkpoint"),
            Some(Error::Diverged { .. }) => (2, "diverged"),
            Some(Error::Io(_)) => (2, "io"),
            _ => (2, "runtime"),
        };
        Failure {
            code,
            kind,
            message: format!("{e:#}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let summary: Vec<&str> = text
                .lines()
                .map(str::trim)
                .take_while(|l| !l.starts_with("Usage:"))
                .filter(|l| !l.is_empty())
                .collect();
            return fail(Failure::usage(summary.join(" ")));
        }
    };
    logging::init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = json!({"error": f.kind, "message": f.message.replace('\n', " "), "exit_code": f.code});
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides).map_err(anyhow::Error::from)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Failure::usage("no subcommand given; see --help"));
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Failure::usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .context("building worker pool")?;
    }
    for input in command.inputs() {
        if !input.is_file() {
            return Err(Failure::usage(format!("input file not found: {}", input.display())));
        }
    }
    let inputs: serde_json::Map<String, serde_json::Value> = command
        .inputs()
        .iter()
        .map(|p| Ok((p.display().to_string(), json!(file_sha256(p)?))))
        .collect::<anyhow::Result<_>>()?;
    log::info!(
        "{}",
        json!({
            "event": "start",
            "command": command.name(),
            "config_hash": cfg.hash(),
            "data_seed": cfg.data.seed,
            "train_seed": cfg.train.seed,
            "flow_seed": cfg.flow_train.seed,
            "inputs_sha256": inputs,
            "checkpoint_format": FORMAT_VERSION,
            "version": env!("CARGO_PKG_VERSION"),
        })
    );
    let started = std::time::Instant::now();
    execute(command, &cfg)?;
    log::info!("{}", json!({"event": "done", "seconds": started.elapsed().as_secs_f64()}));
    Ok(())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainSource { .. } => "train-source",
            Command::TrainFlow { .. } => "train-flow",
            Command::TrainJoint { .. } => "train-joint",
            Command::AdaptEval { .. } => "adapt-eval",
            Command::Bench { .. } => "bench",
            Command::Ablation { .. } => "ablation",
            Command::Project { .. } => "project",
        }
    }

    fn inputs(&self) -> Vec<PathBuf> {
        match self {
            Command::GenData { .. } | Command::Ablation { .. } => vec![],
            Command::TrainSource { data, .. } | Command::TrainJoint { data, .. } => vec![data.clone()],
            Command::TrainFlow { backbone, data, .. } => vec![backbone.clone(), data.clone()],
            Command::AdaptEval { models, data, .. } => vec![models.backbone.clone(), models.flow.clone(), data.clone()],
            Command::Bench { models, .. } => vec![models.backbone.clone(), models.flow.clone()],
            Command::Project { models, data, .. } => {
                let mut v = vec![models.backbone.clone(), models.flow.clone()];
                v.extend(data.iter().cloned());
                v
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
    log::info!("{}", json!({"event": "wrote", "path": path.display().to_string()}));
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_models(m: &Models) -> anyhow::Result<(tttflow_core::Backbone, tttflow_core::FlowModel)> {
    let b = checkpoint::load_backbone(&m.backbone).with_context(|| format!("loading {}", m.backbone.display()))?;
    let f = checkpoint::load_flow(&m.flow).with_context(|| format!("loading {}", m.flow.display()))?;
    Ok((b, f))
}

fn check_split(cfg: &RunConfig, backbone: &tttflow_core::Backbone) -> Result<(), Failure> {
    cfg.adapt.scope(backbone).map_err(|e| Failure::usage(e.to_string()))?;
    Ok(())
}

fn execute(command: Command, cfg: &RunConfig) -> Result<(), Failure> {
    match command {
        Command::GenData { out_dir, eval_seed } => {
            create_dir(&out_dir)?;
            let family = pipeline::family(cfg).map_err(anyhow::Error::from)?;
            let train = family.train_set(cfg.data.n_train).map_err(anyhow::Error::from)?;
            let test = family.test_set(cfg.data.n_test, eval_seed).map_err(anyhow::Error::from)?;
            let mut files = vec![("source_train.csv".to_string(), train), ("source_test.csv".to_string(), test.clone())];
            files.push((
                format!("natural_shift_{eval_seed}.csv"),
                natural_shift(&family, eval_seed).map_err(anyhow::Error::from)?,
            ));
            for kind in CorruptionKind::ALL {
                for sev in 1..=5 {
                    let spec = CorruptionSpec::new(kind, sev).map_err(anyhow::Error::from)?;
                    let ds = apply_corruption(&test, spec).map_err(anyhow::Error::from)?;
                    files.push((corrupted_file_name(FAMILY_NAME, spec, eval_seed), ds));
                }
            }
            let mut manifest = serde_json::Map::new();
            for (name, ds) in &files {
                let path = out_dir.join(name);
                save_csv(ds, &path).map_err(anyhow::Error::from)?;
                manifest.insert(name.clone(), json!({"rows": ds.len(), "sha256": file_sha256(&path).map_err(anyhow::Error::from)?}));
            }
            let meta = json!({"config_hash": cfg.hash(), "eval_seed": eval_seed, "files": manifest});
            write_text(&out_dir.join("manifest.json"), &format!("{meta:#}\n"))?;
        }
        Command::TrainSource { data, out, history } => {
            let ds = load_csv(&data).map_err(anyhow::Error::from)?;
            let (b, h) = pipeline::run_train_source(cfg, &ds).map_err(anyhow::Error::from)?;
            checkpoint::save_backbone(&b, &out).map_err(anyhow::Error::from)?;
            if let Some(p) = history {
                tttflow_core::train::save_history_csv(&h, &p).map_err(anyhow::Error::from)?;
            }
            log::info!("{}", json!({"event": "checkpoint", "path": out.display().to_string(), "sha256": file_sha256(&out).map_err(anyhow::Error::from)?}));
        }
        Command::TrainFlow {
            backbone,
            data,
            out,
            out_backbone,
            history,
        } => {
            if cfg.flow_train.bn_stat_update && out_backbone.is_none() {
                return Err(Failure::usage(
                    "flow_train.bn_stat_update is true; pass --out-backbone to keep the refreshed statistics",
                ));
            }
            let ds = load_csv(&data).map_err(anyhow::Error::from)?;
            let mut b = checkpoint::load_backbone(&backbone).map_err(anyhow::Error::from)?;
            let (f, h) = pipeline::run_train_flow(cfg, &mut b, &ds).map_err(anyhow::Error::from)?;
            checkpoint::save_flow(&f, &out).map_err(anyhow::Error::from)?;
            if let Some(p) = out_backbone {
                checkpoint::save_backbone(&b, &p).map_err(anyhow::Error::from)?;
            }
            if let Some(p) = history {
                tttflow_core::train::save_history_csv(&h, &p).map_err(anyhow::Error::from)?;
            }
            log::info!("{}", json!({"event": "checkpoint", "path": out.display().to_string(), "sha256": file_sha256(&out).map_err(anyhow::Error::from)?}));
        }
        Command::TrainJoint {
            data,
            out_backbone,
            out_flow,
            beta,
            history,
        } => {
            let beta = beta.unwrap_or(cfg.train.beta);
            if !(beta >= 0.0 && beta.is_finite()) {
                return Err(Failure::usage("--beta must be a non-negative number"));
            }
            let ds = load_csv(&data).map_err(anyhow::Error::from)?;
            let (b, f, h) = pipeline::run_joint(cfg, &ds, beta).map_err(anyhow::Error::from)?;
            checkpoint::save_backbone(&b, &out_backbone).map_err(anyhow::Error::from)?;
            checkpoint::save_flow(&f, &out_flow).map_err(anyhow::Error::from)?;
            if let Some(p) = history {
                tttflow_core::train::save_history_csv(&h, &p).map_err(anyhow::Error::from)?;
            }
        }
        Command::AdaptEval { models, data, batch_log } => {
            let (b, f) = load_models(&models)?;
            check_split(cfg, &b)?;
            let ds = load_csv(&data).map_err(anyhow::Error::from)?;
            let base = baseline_predictions(&b, &ds.inputs).map_err(anyhow::Error::from)?;
            let adapted = predict_with_adaptation(&b, &f, &ds.inputs, &cfg.adapt).map_err(anyhow::Error::from)?;
            if let Some(p) = batch_log {
                write_text(&p, &adapted.json_lines())?;
            }
            let metrics = json!({
                "rows": ds.len(),
                "iterations": cfg.adapt.iterations,
                "baseline_accuracy": tttflow_core::adapt::accuracy(&base, &ds.labels),
                "adapted_accuracy": adapted.accuracy(&ds.labels),
                "shift_score": shift_score(&f, &b, &ds.inputs).map_err(anyhow::Error::from)?,
                "shift_pre": mean(&adapted.shift_pre),
                "shift_post": mean(&adapted.shift_post),
                "failed_batches": adapted.batches.iter().filter(|l| l.failed).count(),
            });
            println!("{metrics}");
        }
        Command::Bench {
            models,
            name,
            out_dir,
            curve,
        } => {
            let (backbone, flow) = load_models(&models)?;
            check_split(cfg, &backbone)?;
            create_dir(&out_dir)?;
            let family = pipeline::family(cfg).map_err(anyhow::Error::from)?;
            let metadata = json!({
                "config_hash": cfg.hash(),
                "backbone_sha256": file_sha256(&models.backbone).map_err(anyhow::Error::from)?,
                "flow_sha256": file_sha256(&models.flow).map_err(anyhow::Error::from)?,
                "seeds": cfg.bench.seeds,
                "iterations": cfg.bench.iterations,
            });
            let method = Method { name, backbone, flow };
            let report = run_benchmark(
                std::slice::from_ref(&method),
                &family,
                cfg.data.n_test,
                &cfg.bench,
                &cfg.adapt,
                metadata.clone(),
            )
            .map_err(anyhow::Error::from)?;
            write_text(&out_dir.join("bench_rows.csv"), &report.rows_csv())?;
            write_text(&out_dir.join("bench_table.csv"), &report.wide_csv())?;
            let table = report.text_table();
            write_text(&out_dir.join("bench_table.txt"), &table)?;
            write_text(&out_dir.join("bench_metadata.json"), &format!("{metadata:#}\n"))?;
            if curve {
                let points = iteration_curve(
                    &method,
                    &family,
                    cfg.data.n_test,
                    CorruptionKind::GaussianNoise,
                    &cfg.bench.severities,
                    cfg.bench.curve_max_iters,
                    &cfg.bench.seeds,
                    &cfg.adapt,
                )
                .map_err(anyhow::Error::from)?;
                write_text(&out_dir.join("iteration_curve.csv"), &curve_csv(&points))?;
            }
            let failed: usize = report.rows.iter().filter(|r| r.iterations == 0).map(|r| r.failed_batches).sum();
            if failed > 0 {
                log::warn!("{}", json!({"event": "failed_batches", "count": failed}));
            }
            print!("{table}");
        }
        Command::Ablation { out_dir } => {
            create_dir(&out_dir)?;
            let table = ablation_joint_vs_separate(cfg).map_err(anyhow::Error::from)?;
            write_text(&out_dir.join("ablation.csv"), &table.csv())?;
            let text = table.text();
            write_text(&out_dir.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Project {
            models,
            data,
            mode,
            out,
        } => {
            let (b, f) = load_models(&models)?;
            check_split(cfg, &b)?;
            let sets = data
                .iter()
                .map(|p| {
                    let tag = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((tag, load_csv(p)?))
                })
                .collect::<tttflow_core::Result<Vec<_>>>()
                .map_err(anyhow::Error::from)?;
            let mode = match mode {
                Mode::Pre => ProjectionMode::Pre,
                Mode::Post => ProjectionMode::PostAdapt,
            };
            let rows = project_features(&b, &f, &sets, mode, &cfg.adapt).map_err(anyhow::Error::from)?;
            write_text(&out, &projection_csv(&rows))?;
        }
    }
    Ok(())
}
