//! Throughput harness: environment steps per wall-clock second for plain
//! rollouts and for the two BPTT variants, across environment counts.
//!
//! Every cell times the same functions training calls: [`rollout`] and
//! [`bptt_live`].

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bptt::{bptt_live, BackwardModel};
use crate::env::{mean, rollout, std_dev, Env, EnvConfig, ModelMode};
use crate::policy::{init_params, Architecture, MlpParams, HEAD_INIT_SCALE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    Rollout,
    BpttSimple,
    BpttFull,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Rollout, BenchMode::BpttSimple, BenchMode::BpttFull];

    pub fn label(self) -> &'static str {
        match self {
            BenchMode::Rollout => "rollout",
            BenchMode::BpttSimple => "bptt-simple",
            BenchMode::BpttFull => "bptt-full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub env_counts: Vec<usize>,
    pub modes: Vec<BenchMode>,
    pub horizon: usize,
    pub warmup: usize,
    pub repetitions: usize,
    pub hidden: Vec<usize>,
    pub shard_size: usize,
    pub seed: u64,
    /// Cells whose estimated tape memory exceeds this are reported unavailable.
    pub memory_budget_mb: Option<f64>,
    /// Environment settings; the model is always forced to the full model.
    pub env: EnvConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            env_counts: vec![1, 10, 100, 1000],
            modes: BenchMode::ALL.to_vec(),
            horizon: 50,
            warmup: 1,
            repetitions: 3,
            hidden: vec![64, 64],
            shard_size: 25,
            seed: 0,
            memory_budget_mb: None,
            env: EnvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub num_envs: usize,
    pub mode: BenchMode,
    /// Median over repetitions; 0 when unavailable.
    pub steps_per_second: f64,
    pub repetitions: usize,
    /// Standard deviation of steps per second over repetitions.
    pub dispersion: f64,
    pub available: bool,
    /// Estimated peak tape memory of the concurrently live shards.
    pub tape_bytes: usize,
    /// Sum of episode rewards of the last repetition; identical across runs.
    pub checksum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub results: Vec<BenchResult>,
}

impl BenchConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        anyhow::ensure!(!self.env_counts.is_empty() && !self.env_counts.contains(&0), "env counts must be positive");
        anyhow::ensure!(self.repetitions >= 3, "at least 3 repetitions are required");
        anyhow::ensure!(self.horizon > 0 && self.shard_size > 0, "horizon and shard_size must be positive");
        anyhow::ensure!(!self.hidden.is_empty() && !self.hidden.contains(&0), "hidden sizes must be positive");
        Ok(())
    }

    fn make_env(&self, horizon: usize) -> anyhow::Result<Env> {
        Ok(Env::new(EnvConfig { model: ModelMode::Full, horizon, ..self.env.clone() })?)
    }
}

/// Runs one measurement and returns the checksum.
fn run_once(
    env: &Env,
    params: &MlpParams,
    mode: BenchMode,
    seed: u64,
    iteration: u64,
    n: usize,
    shard: usize,
) -> anyhow::Result<(f64, usize)> {
    Ok(match mode {
        BenchMode::Rollout => (rollout(env, params, seed, iteration, n, shard).episode_rewards().iter().sum(), 0),
        BenchMode::BpttSimple | BenchMode::BpttFull => {
            let backward = if mode == BenchMode::BpttFull { BackwardModel::Full } else { BackwardModel::Simple };
            let out = bptt_live(env, params, seed, iteration, n, shard, backward)?;
            (out.episode_rewards.iter().sum(), out.peak_tape_bytes)
        }
    })
}

/// Tape memory of `n` environments over the full horizon, extrapolated
/// linearly from a one-step probe on one shard.
fn estimate_tape_bytes(cfg: &BenchConfig, params: &MlpParams, mode: BenchMode, n: usize) -> anyhow::Result<usize> {
    if mode == BenchMode::Rollout {
        return Ok(0);
    }
    let probe = cfg.make_env(1)?;
    let shard = cfg.shard_size.min(n);
    let (_, one_step) = run_once(&probe, params, mode, cfg.seed, 0, shard, shard)?;
    let live_shards = n.div_ceil(cfg.shard_size).min(rayon::current_num_threads());
    Ok(one_step * cfg.horizon * live_shards)
}

pub fn run_bench(cfg: &BenchConfig, mut on_result: impl FnMut(&BenchResult)) -> anyhow::Result<BenchReport> {
    cfg.validate()?;
    let env = cfg.make_env(cfg.horizon)?;
    let arch = Architecture::new(env.obs_dim(), &cfg.hidden, 4);
    let params = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed), HEAD_INIT_SCALE);
    let mut results = Vec::new();
    for &n in &cfg.env_counts {
        for &mode in &cfg.modes {
            let tape_bytes = estimate_tape_bytes(cfg, &params, mode, n)?;
            let over = cfg.memory_budget_mb.is_some_and(|mb| tape_bytes as f64 > mb * 1024.0 * 1024.0);
            let mut res = BenchResult {
                num_envs: n,
                mode,
                steps_per_second: 0.0,
                repetitions: cfg.repetitions,
                dispersion: 0.0,
                available: !over,
                tape_bytes,
                checksum: 0.0,
            };
            if !over {
                for w in 0..cfg.warmup {
                    run_once(&env, &params, mode, cfg.seed, w as u64, n, cfg.shard_size)?;
                }
                let mut rates = Vec::with_capacity(cfg.repetitions);
                for _ in 0..cfg.repetitions {
                    let t = Instant::now();
                    res.checksum = run_once(&env, &params, mode, cfg.seed, 0, n, cfg.shard_size)?.0;
                    let secs = t.elapsed().as_secs_f64().max(1e-9);
                    rates.push((n * cfg.horizon) as f64 / secs);
                }
                res.dispersion = std_dev(&rates);
                res.steps_per_second = median(&mut rates);
            }
            on_result(&res);
            results.push(res);
        }
    }
    Ok(BenchReport { threads: rayon::current_num_threads(), horizon: cfg.horizon, hidden: cfg.hidden.clone(), results })
}

fn median(x: &mut [f64]) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        mean(&x[n / 2 - 1..=n / 2])
    }
}

impl BenchReport {
    pub fn get(&self, n: usize, mode: BenchMode) -> Option<&BenchResult> {
        self.results.iter().find(|r| r.num_envs == n && r.mode == mode)
    }

    /// One row per environment count, one column per mode; unavailable
    /// cells print as "-".
    pub fn table(&self) -> String {
        let mut counts: Vec<usize> = self.results.iter().map(|r| r.num_envs).collect();
        counts.dedup();
        let mut modes: Vec<BenchMode> = Vec::new();
        for r in &self.results {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        let mut s = String::new();
        writeln!(s, "# steps per second, horizon {}, hidden {:?}, {} worker thread(s)", self.horizon, self.hidden, self.threads).unwrap();
        write!(s, "{:>8}", "envs").unwrap();
        for m in &modes {
            write!(s, " {:>22}", m.label()).unwrap();
        }
        s.push('\n');
        for n in counts {
            write!(s, "{n:>8}").unwrap();
            for &m in &modes {
                let cell = match self.get(n, m) {
                    Some(r) if r.available => format!("{:.0} ± {:.0}", r.steps_per_second, r.dispersion),
                    _ => "-".into(),
                };
                write!(s, " {cell:>22}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["num_envs", "mode", "steps_per_second", "dispersion", "repetitions", "available", "tape_bytes", "threads"])?;
        for r in &self.results {
            w.write_record([
                r.num_envs.to_string(),
                r.mode.label().to_string(),
                r.steps_per_second.to_string(),
                r.dispersion.to_string(),
                r.repetitions.to_string(),
                r.available.to_string(),
                r.tape_bytes.to_string(),
                self.threads.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
