use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use diffquad::bench::{run_bench, BenchConfig, BenchMode};
use diffquad::config::{RunConfig, Trainer};
use diffquad::env::TaskMode;
use diffquad::report::{export, DEFAULT_TARGETS};
use diffquad::run::{eval_checkpoint, pretrain_run, train_run, EvalOptions, RunError};

#[derive(Parser)]
#[command(name = "diffquad", version = diffquad_version(), about = "Differentiable quadrotor simulation and policy training")]
struct Cli {
    /// Worker threads for batched rollouts (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

fn diffquad_version() -> &'static str {
    Box::leak(diffquad::config::version_stamp().into_boxed_str())
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy; writes a self-describing run directory.
    Train(TrainArgs),
    /// Roll a checkpoint out on sampled throws and report success statistics.
    Eval(EvalArgs),
    /// Measure steps per second for rollout and both BPTT variants.
    Bench(BenchArgs),
    /// Fit the state representation only (feature task).
    Pretrain(RunArgs),
    /// Curves, reward-target tables and SVG plots from run directories.
    ExportPlots(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    State,
    Features,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainerArg {
    Bptt,
    Ppo,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    envs: Option<usize>,
    #[arg(long = "iters")]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Run directory (default: $DIFFQUAD_OUTPUT_ROOT/<task>-<trainer>-s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    trainer: Option<TrainerArg>,
    /// Pretrain the state representation first (feature task only).
    #[arg(long)]
    pretrain: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Pixel noise standard deviation, overriding the checkpoint's camera.
    #[arg(long)]
    noise: Option<f64>,
    /// Throw difficulty (initial-state scale), 0 starts at hover.
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.json and per-episode trajectory CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Bench configuration (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    envs: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    modes: Option<Vec<ModeArg>>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Tape memory budget; larger cells are reported unavailable.
    #[arg(long)]
    budget_mb: Option<f64>,
    /// Directory for bench.txt and bench.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rollout,
    BpttSimple,
    BpttFull,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    targets: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_run_config(a: &RunArgs) -> Result<RunConfig, RunError> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = a.task {
        cfg.task = match t {
            TaskArg::State => TaskMode::State,
            TaskArg::Features => TaskMode::Features,
        };
    }
    cfg.envs = a.envs.unwrap_or(cfg.envs);
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.horizon = a.horizon.unwrap_or(cfg.horizon);
    if let Some(h) = &a.hidden {
        cfg.hidden = Some(h.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn validated(cfg: RunConfig) -> Result<RunConfig, RunError> {
    cfg.validate().map_err(|(k, m)| RunError::Validation(format!("`{k}`: {m}")))?;
    Ok(cfg)
}

fn dispatch(cmd: Cmd) -> Result<(), RunError> {
    match cmd {
        Cmd::Train(a) => {
            let mut cfg = load_run_config(&a.run)?;
            if let Some(t) = a.trainer {
                cfg.trainer = match t {
                    TrainerArg::Bptt => Trainer::Bptt,
                    TrainerArg::Ppo => Trainer::Ppo,
                };
            }
            cfg.pretrain_first |= a.pretrain;
            let cfg = validated(cfg)?;
            let dir = cfg.resolve_output_dir();
            log::info!("run directory {}", dir.display());
            let s = train_run(&cfg, &dir, a.run.force, |r| {
                if r.iteration % 10 == 0 || r.iteration + 1 == cfg.iterations {
                    log::info!(
                        "iter {:>5}  reward {:>10.3} ± {:<8.3} samples {:>10}  {:.1}s",
                        r.iteration,
                        r.reward_mean,
                        r.reward_std,
                        r.samples,
                        r.wall_clock
                    );
                }
            })?;
            println!("{}", s.final_checkpoint.display());
        }
        Cmd::Pretrain(a) => {
            let cfg = validated(load_run_config(&a)?)?;
            let dir = cfg.resolve_output_dir();
            let rep = pretrain_run(&cfg, &dir, a.force)?;
            if let Some(r) = rep.history.last() {
                println!("holdout mse {:.5} after {} epochs -> {}", r.holdout_mse, r.epoch + 1, dir.join("pretrain").display());
            }
        }
        Cmd::Eval(a) => {
            let opts =
                EvalOptions { episodes: a.episodes, seed: a.seed, pixel_noise: a.noise, init_scale: a.init_scale, ..Default::default() };
            let rep = eval_checkpoint(&a.checkpoint, &opts, a.out.as_deref())?;
            println!("episodes      {}", rep.episodes.len());
            println!("success rate  {:.1}%", 100.0 * rep.success_rate);
            println!("mean reward   {:.3}", rep.mean_reward);
        }
        Cmd::Bench(a) => {
            let mut cfg = match &a.config {
                Some(p) => load_bench_config(p)?,
                None => BenchConfig::default(),
            };
            cfg.env_counts = a.envs.unwrap_or(cfg.env_counts);
            if let Some(m) = a.modes {
                cfg.modes = m
                    .into_iter()
                    .map(|m| match m {
                        ModeArg::Rollout => BenchMode::Rollout,
                        ModeArg::BpttSimple => BenchMode::BpttSimple,
                        ModeArg::BpttFull => BenchMode::BpttFull,
                    })
                    .collect();
            }
            cfg.horizon = a.horizon.unwrap_or(cfg.horizon);
            cfg.repetitions = a.repetitions.unwrap_or(cfg.repetitions);
            cfg.warmup = a.warmup.unwrap_or(cfg.warmup);
            cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
            cfg.memory_budget_mb = a.budget_mb.or(cfg.memory_budget_mb);
            cfg.validate().map_err(|e| RunError::Validation(e.to_string()))?;
            let rep = run_bench(&cfg, |r| log::info!("{} envs {}: {:.0} steps/s", r.num_envs, r.mode.label(), r.steps_per_second))?;
            let table = rep.table();
            print!("{table}");
            if let Some(out) = a.out {
                std::fs::create_dir_all(&out).map_err(anyhow::Error::from)?;
                std::fs::write(out.join("bench.txt"), &table).map_err(anyhow::Error::from)?;
                rep.write_csv(&out.join("bench.csv"))?;
            }
        }
        Cmd::ExportPlots(a) => {
            let targets = a.targets.unwrap_or_else(|| DEFAULT_TARGETS.to_vec());
            let table = export(&a.runs, &a.out, &targets).map_err(|e| RunError::Validation(format!("{e:#}")))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn load_bench_config(p: &Path) -> Result<BenchConfig, RunError> {
    let text = std::fs::read_to_string(p).map_err(|e| RunError::Validation(format!("{}: {e}", p.display())))?;
    toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
        RunError::Validation(format!("{}:{}: {}", p.display(), line.map_or("?".into(), |l| l.to_string()), e.message().trim()))
    })
}
