//! `dider`: generate synthetic data, train, evaluate and export timelines.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use dider_core::evaluation::{
    align_labels, confusion, evaluate, export_timelines, forecast, EvalOptions, EvalReport, Forecast,
    ForecastOptions,
};
use dider_core::sim::{read_dataset, simulate, split, write_dataset, TrajectoryBatch};
use dider_core::training::{train, Checkpoint, TrainMode, TrainOutputs, Trainer};

use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(dider_core::Error),
}

impl CliError {
    fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Runtime(e) => e.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<dider_core::Error> for CliError {
    fn from(e: dider_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dider", version, about = "Segmented dynamic relational inference for multi-agent trajectories")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sectioned key/value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.tau=0.3`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the synthetic particle dataset.
    Generate(GenerateArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: forecast MSE, edge accuracy, timelines.
    Eval(EvalArgs),
    /// Write per-edge segment timelines (CSV and SVG) for a checkpoint.
    ExportTimelines(EvalArgs),
    /// List every configuration key with its default.
    Keys,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    agents: Option<usize>,
    /// Store physical units instead of normalised ones.
    #[arg(long)]
    raw: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// dnri, dider or dider-skid.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    force_duration: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    edge_types: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    burn_in: Option<usize>,
    /// Comma-separated horizons, e.g. 1,15,25.
    #[arg(long)]
    horizons: Option<String>,
    /// train, val, test or all.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let workdir = cli.workdir.clone();
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(&resolve(&workdir, path))?;
    }
    cfg.apply_env(std::env::vars())?;
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects SECTION.KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    match cli.command {
        Command::Generate(a) => cmd_generate(&workdir, cfg, a),
        Command::Train(a) => cmd_train(&workdir, cfg, a),
        Command::Eval(a) => cmd_eval(&workdir, cfg, a, false),
        Command::ExportTimelines(a) => cmd_eval(&workdir, cfg, a, true),
        Command::Keys => {
            print!("{}", config::describe_keys());
            Ok(())
        }
    }
}

fn resolve(workdir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        workdir.join(p)
    }
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("resolved_config.txt"), cfg.to_text())?;
    Ok(())
}

fn cmd_generate(workdir: &Path, mut cfg: RunConfig, a: GenerateArgs) -> Result<(), CliError> {
    if let Some(v) = a.samples {
        cfg.sim.n_samples = v;
    }
    if let Some(v) = a.seed {
        cfg.sim.seed = v;
    }
    if let Some(v) = a.horizon {
        cfg.sim.horizon = v;
    }
    if let Some(v) = a.agents {
        cfg.sim.n_agents = v;
    }
    cfg.validate()?;
    let out = resolve(workdir, &a.out);
    let raw = simulate(&cfg.sim)?;
    let batch = if a.raw { raw } else { raw.normalized() };
    let manifest = write_dataset(&batch, &out, "all", Some(&cfg.sim))?;
    write_resolved(&out, &cfg)?;
    println!(
        "wrote {}: states {:?} ({}), labels {:?}",
        out.display(),
        manifest.states.shape,
        manifest.states.dtype,
        manifest.edges.as_ref().map(|e| e.shape.clone())
    );
    if let Some(n) = &manifest.normalization {
        println!(
            "normalisation: position mean {:?}, position scale {:.6}, velocity scale {:.6}",
            n.pos_mean, n.pos_scale, n.vel_scale
        );
    }
    Ok(())
}

fn load_data(workdir: &Path, path: Option<&PathBuf>) -> Result<TrajectoryBatch, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("--data <DIR> is required".into()))?;
    let dir = resolve(workdir, path);
    if !dir.join("manifest.json").is_file() {
        return Err(CliError::Usage(format!("no dataset at {} (manifest.json missing)", dir.display())));
    }
    Ok(read_dataset(&dir)?)
}

fn cmd_train(workdir: &Path, mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    if let Some(m) = &a.mode {
        cfg.train.mode = m.parse::<TrainMode>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(v) = a.force_duration {
        cfg.train.force_duration = Some(v);
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.edge_types {
        cfg.train.edge_types = v;
    }
    if let Some(v) = a.hidden {
        cfg.train.encoder_hidden = v;
        cfg.train.decoder_hidden = v;
    }
    cfg.validate()?;
    let data = load_data(workdir, a.data.as_ref())?;
    if data.horizon <= cfg.train.t_obs {
        return Err(CliError::Usage(format!(
            "trajectories have {} steps, burn-in is {}",
            data.horizon, cfg.train.t_obs
        )));
    }
    let outputs = TrainOutputs {
        dir: resolve(workdir, &a.out),
    };
    let mut trainer = if a.resume {
        let path = outputs.last();
        if !path.is_file() {
            return Err(CliError::Usage(format!("nothing to resume: {} not found", path.display())));
        }
        let ck = Checkpoint::load(&path)?;
        let mut saved = ck.header.train.clone();
        saved.epochs = cfg.train.epochs;
        if saved != cfg.train {
            return Err(CliError::Usage(
                "resumed run must use the checkpoint's training configuration (only epochs may change)".into(),
            ));
        }
        let mut t = Trainer::from_checkpoint(&ck)?;
        t.config.epochs = cfg.train.epochs;
        t
    } else {
        Trainer::new(&cfg.train, data.n_agents, None)?
    };
    let (train_set, val_set, _) = prepare_splits(&data, &mut trainer, &cfg)?;
    write_resolved(&outputs.dir, &cfg)?;
    eprintln!(
        "training {:?} on {} samples ({} validation), {} parameters",
        cfg.train.mode,
        train_set.n_samples,
        val_set.n_samples,
        trainer.store.num_scalars()
    );
    let start = Instant::now();
    let val = (val_set.n_samples > 0).then_some(&val_set);
    train(&mut trainer, &train_set, val, Some(&outputs), |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  recon {:.4}  kl_d {:.4}  kl_e {:.4}  segments {:.2}  val_mse {}  [{:.0}s]",
            m.epoch,
            m.loss,
            m.recon_nll,
            m.kl_duration,
            m.kl_edge,
            m.n_segments,
            m.val_mse.map_or("-".into(), |v| format!("{v:.6}")),
            start.elapsed().as_secs_f64()
        );
    })?;
    println!("wrote {}", outputs.dir.display());
    Ok(())
}

/// Splits `data` and brings it into the trainer's normalised units.
fn prepare_splits(
    data: &TrajectoryBatch,
    trainer: &mut Trainer,
    cfg: &RunConfig,
) -> Result<(TrajectoryBatch, TrajectoryBatch, TrajectoryBatch), CliError> {
    let (tr, va, te) = split(data, cfg.train.split).map_err(|e| CliError::Usage(e.to_string()))?;
    if data.normalization.is_some() {
        return Ok((tr, va, te));
    }
    let norm = trainer.normalization.get_or_insert_with(|| tr.statistics()).clone();
    Ok((tr.normalized_with(&norm), va.normalized_with(&norm), te.normalized_with(&norm)))
}

fn cmd_eval(workdir: &Path, mut cfg: RunConfig, a: EvalArgs, timelines_only: bool) -> Result<(), CliError> {
    if let Some(v) = a.burn_in {
        cfg.eval.burn_in = v;
    }
    if let Some(h) = &a.horizons {
        cfg.set("eval.horizons", h)?;
    }
    if let Some(s) = &a.split {
        cfg.eval.split = s.clone();
    }
    if let Some(v) = a.samples {
        cfg.eval.samples = v;
    }
    if let Some(v) = a.seed {
        cfg.eval.seed = v;
    }
    cfg.validate()?;
    let ck_path = a
        .checkpoint
        .as_ref()
        .map(|p| resolve(workdir, p))
        .ok_or_else(|| CliError::Usage("--checkpoint <FILE> is required".into()))?;
    if !ck_path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", ck_path.display())));
    }
    let data = load_data(workdir, a.data.as_ref())?;
    let ck = Checkpoint::load(&ck_path)?;
    let (model, store) = ck.model()?;
    if model.config.n_agents != data.n_agents {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} agents, dataset has {}",
            model.config.n_agents, data.n_agents
        )));
    }
    // evaluation reuses the training split fractions of the checkpoint
    let mut run_cfg = cfg.clone();
    run_cfg.train = ck.header.train.clone();
    let (tr, va, te) = split(&data, run_cfg.train.split).map_err(|e| CliError::Usage(e.to_string()))?;
    let norm = ck.header.normalization.clone();
    let fix = |b: TrajectoryBatch| match (&b.normalization, &norm) {
        (None, Some(n)) => b.normalized_with(n),
        _ => b,
    };
    let (tr, va, te) = (fix(tr), fix(va), fix(te));
    let chosen = match cfg.eval.split.as_str() {
        "train" => tr,
        "val" => va.clone(),
        "test" => te,
        _ => match &norm {
            Some(n) if data.normalization.is_none() => data.normalized_with(n),
            _ => data.clone(),
        },
    };
    let chosen = limit(chosen, cfg.eval.samples);
    if chosen.n_samples == 0 {
        return Err(CliError::Usage(format!("split {:?} is empty", cfg.eval.split)));
    }
    let max_h = chosen.horizon.saturating_sub(cfg.eval.burn_in);
    if max_h == 0 {
        return Err(CliError::Usage(format!(
            "burn-in {} leaves nothing to predict in {}-step trajectories",
            cfg.eval.burn_in, chosen.horizon
        )));
    }
    let unused_horizons = timelines_only && a.horizons.is_none();
    if let Some(&h) = cfg.eval.horizons.iter().find(|&&h| !unused_horizons && (h == 0 || h > max_h)) {
        return Err(CliError::Usage(format!(
            "horizon {h} outside 1..={max_h} for {}-step trajectories with burn-in {}",
            chosen.horizon, cfg.eval.burn_in
        )));
    }
    let fopts = ForecastOptions {
        forced_duration: ck.header.train.forced_duration(),
        sample_durations: cfg.eval.sample_durations,
        chunk_size: cfg.eval.chunk_size.max(1),
        ..ForecastOptions::new(cfg.eval.burn_in, cfg.eval.seed)
    };
    let out = resolve(workdir, &a.out);
    std::fs::create_dir_all(&out)?;
    let fc: Forecast = if timelines_only {
        forecast(&model, &store, &chosen, &fopts)?
    } else {
        // alignment is estimated on validation data and frozen for the rest
        let permutation = match (cfg.eval.split.as_str(), va.edge_labels.is_some() && va.n_samples > 0) {
            ("test", true) => {
                let va = limit(va, 500);
                let vfc = forecast(&model, &store, &va, &fopts)?;
                confusion(&vfc, &va, model.config.edge_types).map(|c| align_labels(&c))
            }
            _ => None,
        };
        let opts = EvalOptions {
            forecast: fopts.clone(),
            horizons: cfg.eval.horizons.clone(),
            permutation,
        };
        let (report, fc): (EvalReport, Forecast) = evaluate(&model, &store, &chosen, &opts)?;
        std::fs::write(out.join("report.txt"), report.to_text())?;
        std::fs::write(out.join("report.csv"), report.to_csv())?;
        print!("{}", report.to_text());
        fc
    };
    export_timelines(
        &fc.schedules,
        chosen.n_agents,
        &out.join("timelines.csv"),
        Some(&out.join("timelines")),
        cfg.eval.max_svg,
    )?;
    write_resolved(&out, &run_cfg)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn limit(b: TrajectoryBatch, n: usize) -> TrajectoryBatch {
    if n == 0 || n >= b.n_samples {
        return b;
    }
    let idx: Vec<usize> = (0..n).collect();
    b.select(&idx)
}
