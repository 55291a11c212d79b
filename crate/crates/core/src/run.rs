//! Run directories and the pipelines behind the command-line subcommands.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml          resolved configuration, seed included
//! VERSION              version stamp of the binary that produced the run
//! metrics.jsonl        one IterationRecord per line
//! checkpoints/         iter_NNNNNN.ckpt every `checkpoint_every`, final.ckpt
//! pretrain/            dataset.bin, epochs.jsonl, representation.ckpt
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bptt;
use crate::config::{version_stamp, ConfigError, RunConfig, Trainer};
use crate::env::Env;
use crate::eval::{evaluate, write_eval_outputs, EvalReport, SuccessCriterion};
use crate::metrics::{IterationRecord, MetricsWriter};
use crate::policy::{init_params, Checkpoint, MlpParams, HEAD_INIT_SCALE};
use crate::ppo::{self, ActorCritic};
use crate::pretrain::{collect_dataset, extract_trunk, fit_representation, representation_arch, transplant, Representation};

/// Salt separating the representation network's init stream from the policy's.
const REPR_INIT_SALT: u64 = 0x5245_5052;

/// Distinguishes bad input (exit code 1) from failures while running.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Validation(e.to_string())
    }
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<IterationRecord>,
    pub final_checkpoint: PathBuf,
}

/// Creates `dir` and writes the resolved config and version stamp. Refuses a
/// directory that already holds metrics unless `overwrite`.
pub fn prepare_run_dir(cfg: &RunConfig, dir: &Path, overwrite: bool) -> Result<(), RunError> {
    if dir.join("metrics.jsonl").exists() && !overwrite {
        return Err(RunError::Validation(format!("{} already holds a run; pass --force to overwrite", dir.display())));
    }
    fs::create_dir_all(dir.join("checkpoints")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), cfg.to_toml()).context("writing config.toml")?;
    fs::write(dir.join("VERSION"), format!("{}\n", version_stamp())).context("writing VERSION")?;
    Ok(())
}

fn env_of(cfg: &RunConfig) -> Result<Env, RunError> {
    Env::new(cfg.env_config()).map_err(|e| RunError::Validation(e.to_string()))
}

fn initial_policy(cfg: &RunConfig, env: &Env) -> MlpParams {
    let arch = cfg.architecture();
    debug_assert_eq!(arch.input, env.obs_dim());
    init_params(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed), HEAD_INIT_SCALE)
}

/// Collects a dataset with `policy`, fits the representation and writes the
/// artifacts into `dir`.
pub fn pretrain_into(cfg: &RunConfig, env: &Env, policy: &MlpParams, dir: &Path) -> Result<Representation, RunError> {
    let pc = cfg.pretrain_config();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    log::info!("collecting {} representation samples", pc.dataset_size);
    let ds = collect_dataset(env, policy, pc.dataset_size, cfg.seed, &pc).map_err(anyhow::Error::from)?;
    ds.save(&dir.join("dataset.bin")).map_err(anyhow::Error::from)?;
    let net = init_params(&representation_arch(&policy.arch), &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ REPR_INIT_SALT), 1.0);
    let mut log = fs::File::create(dir.join("epochs.jsonl")).context("creating epochs.jsonl")?;
    let mut io_err = None;
    let rep = fit_representation(&ds, net, &pc, cfg.seed, |r| {
        log::debug!("pretrain epoch {}: train {:.4} holdout {:.4}", r.epoch, r.train_mse, r.holdout_mse);
        if let Err(e) = serde_json::to_writer(&mut log, r).map_err(std::io::Error::from).and_then(|_| log.write_all(b"\n")) {
            io_err.get_or_insert(e);
        }
    })
    .map_err(anyhow::Error::from)?;
    if let Some(e) = io_err {
        return Err(anyhow::Error::from(e).context("writing epochs.jsonl").into());
    }
    let mut ck = rep.to_checkpoint(cfg.seed);
    ck.meta = cfg.to_toml();
    ck.save(&dir.join("representation.ckpt")).map_err(anyhow::Error::from)?;
    if let Some(last) = rep.history.last() {
        log::info!("pretraining done: holdout mse {:.4}", last.holdout_mse);
    }
    Ok(rep)
}

/// The `pretrain` subcommand: representation artifacts only.
pub fn pretrain_run(cfg: &RunConfig, dir: &Path, overwrite: bool) -> Result<Representation, RunError> {
    let env = env_of(cfg)?;
    if cfg.task != crate::env::TaskMode::Features {
        return Err(RunError::Validation("pretraining needs task = \"features\"".into()));
    }
    prepare_run_dir(cfg, dir, overwrite)?;
    pretrain_into(cfg, &env, &initial_policy(cfg, &env), &dir.join("pretrain"))
}

/// The `train` subcommand. `on_record` sees every iteration as it finishes.
pub fn train_run(
    cfg: &RunConfig,
    dir: &Path,
    overwrite: bool,
    mut on_record: impl FnMut(&IterationRecord),
) -> Result<RunSummary, RunError> {
    let env = env_of(cfg)?;
    prepare_run_dir(cfg, dir, overwrite)?;
    let mut policy = initial_policy(cfg, &env);
    if cfg.pretrain_first {
        let rep = pretrain_into(cfg, &env, &policy, &dir.join("pretrain"))?;
        policy = transplant(&extract_trunk(&rep.net), &policy).map_err(anyhow::Error::from)?;
    }
    let meta = cfg.to_toml();
    let ckdir = dir.join("checkpoints");
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl")).context("creating metrics.jsonl")?;
    let every = cfg.checkpoint_every;
    let save = |ck: Checkpoint, name: String| -> anyhow::Result<()> {
        Checkpoint { meta: meta.clone(), ..ck }.save(&ckdir.join(&name)).with_context(|| format!("writing {name}"))?;
        Ok(())
    };
    let periodic = |k: usize| every > 0 && (k + 1).is_multiple_of(every);
    let (final_ck, records) = match cfg.trainer {
        Trainer::Bptt => {
            let out = bptt::train(&env, &cfg.bptt_config(), cfg.seed, policy, |r, p| {
                metrics.write(r)?;
                on_record(r);
                if periodic(r.iteration) {
                    save(Checkpoint::new(p.clone(), cfg.seed, r.iteration as u64 + 1), format!("iter_{:06}.ckpt", r.iteration + 1))?;
                }
                Ok(())
            })?;
            (Checkpoint::new(out.params, cfg.seed, cfg.iterations as u64), out.records)
        }
        Trainer::Ppo => {
            let pc = cfg.ppo_config();
            let mut ac = ActorCritic::new(&cfg.architecture(), &mut ChaCha8Rng::seed_from_u64(cfg.seed), pc.init_log_std, pc.value_scale);
            ac.actor = policy;
            let out = ppo::train(&env, &pc, cfg.seed, ac, |r, m| {
                metrics.write(r)?;
                on_record(r);
                if periodic(r.iteration) {
                    save(m.to_checkpoint(cfg.seed, r.iteration as u64 + 1), format!("iter_{:06}.ckpt", r.iteration + 1))?;
                }
                Ok(())
            })?;
            (out.model.to_checkpoint(cfg.seed, cfg.iterations as u64), out.records)
        }
    };
    save(final_ck, "final.ckpt".into())?;
    Ok(RunSummary { dir: dir.to_path_buf(), records, final_checkpoint: ckdir.join("final.ckpt") })
}

/// Evaluation settings layered over the config stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub episodes: usize,
    pub seed: u64,
    pub pixel_noise: Option<f64>,
    pub init_scale: Option<f64>,
    pub horizon: Option<usize>,
    pub criterion: SuccessCriterion,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { episodes: 100, seed: 0, pixel_noise: None, init_scale: None, horizon: None, criterion: SuccessCriterion::default() }
    }
}

/// Run config recorded in a checkpoint, with evaluation overrides applied.
pub fn checkpoint_config(ck: &Checkpoint, opts: &EvalOptions) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::from_toml_str(&ck.meta, "checkpoint config")?;
    if let Some(s) = opts.pixel_noise {
        cfg.camera.pixel_noise = s;
    }
    if let Some(s) = opts.init_scale {
        cfg.init.scale = s;
    }
    if let Some(h) = opts.horizon {
        cfg.horizon = h;
    }
    cfg.validate().map_err(|(k, m)| RunError::Validation(format!("evaluation override `{k}`: {m}")))?;
    Ok(cfg)
}

/// The `eval` subcommand: deterministic rollouts of the checkpoint's policy
/// (the mean action for PPO checkpoints), report and trajectories in `out`.
pub fn eval_checkpoint(ckpt: &Path, opts: &EvalOptions, out: Option<&Path>) -> Result<EvalReport, RunError> {
    if opts.episodes == 0 {
        return Err(RunError::Validation("episodes must be at least 1".into()));
    }
    let ck = Checkpoint::load(ckpt).map_err(|e| RunError::Validation(format!("{}: {e}", ckpt.display())))?;
    let cfg = checkpoint_config(&ck, opts)?;
    let env = env_of(&cfg)?;
    if ck.policy.arch.input != env.obs_dim() || ck.policy.arch.output != 4 {
        return Err(RunError::Validation(format!(
            "checkpoint network {} -> {} does not fit observation width {} and 4 actions",
            ck.policy.arch.input,
            ck.policy.arch.output,
            env.obs_dim()
        )));
    }
    let (report, trajs) = evaluate(&env, &ck.policy, opts.episodes, opts.seed, cfg.shard_size, &opts.criterion);
    if let Some(dir) = out {
        write_eval_outputs(dir, &report, &trajs, env.config.dynamics.dt)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskMode;

    fn tiny(trainer: Trainer) -> RunConfig {
        let mut c = RunConfig {
            trainer,
            envs: 4,
            horizon: 10,
            iterations: 3,
            seed: 5,
            hidden: Some(vec![8]),
            shard_size: 2,
            checkpoint_every: 2,
            ..Default::default()
        };
        c.ppo.epochs = 2;
        c.ppo.minibatches = 2;
        c
    }

    #[test]
    fn train_writes_a_self_describing_run() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("r");
        let cfg = tiny(Trainer::Bptt);
        let s = train_run(&cfg, &d, false, |_| {}).unwrap();
        assert_eq!(s.records.len(), 3);
        assert_eq!(RunConfig::load(&d.join("config.toml")).unwrap(), cfg);
        assert!(fs::read_to_string(d.join("VERSION")).unwrap().starts_with(env!("CARGO_PKG_VERSION")));
        assert!(d.join("checkpoints/iter_000002.ckpt").exists());
        let ck = Checkpoint::load(&s.final_checkpoint).unwrap();
        assert_eq!(RunConfig::from_toml_str(&ck.meta, "m").unwrap(), cfg);
        assert!(matches!(train_run(&cfg, &d, false, |_| {}), Err(RunError::Validation(_))));
        assert!(train_run(&cfg, &d, true, |_| {}).is_ok());
    }

    #[test]
    fn same_seed_gives_identical_metrics_apart_from_time() {
        let dir = tempfile::tempdir().unwrap();
        for trainer in [Trainer::Bptt, Trainer::Ppo] {
            let a = train_run(&tiny(trainer), &dir.path().join(format!("{trainer}a")), false, |_| {}).unwrap();
            let b = train_run(&tiny(trainer), &dir.path().join(format!("{trainer}b")), false, |_| {}).unwrap();
            let strip = |r: &[IterationRecord]| r.iter().map(IterationRecord::without_time).collect::<Vec<_>>();
            assert_eq!(strip(&a.records), strip(&b.records));
            assert_eq!(fs::read(a.final_checkpoint).unwrap(), fs::read(b.final_checkpoint).unwrap());
        }
    }

    #[test]
    fn ppo_checkpoint_evaluates_its_mean_policy() {
        let dir = tempfile::tempdir().unwrap();
        let s = train_run(&tiny(Trainer::Ppo), &dir.path().join("p"), false, |_| {}).unwrap();
        let ck = Checkpoint::load(&s.final_checkpoint).unwrap();
        assert!(ActorCritic::from_checkpoint(&ck).is_ok());
        let out = dir.path().join("eval");
        let rep = eval_checkpoint(&s.final_checkpoint, &EvalOptions { episodes: 3, ..Default::default() }, Some(&out)).unwrap();
        assert_eq!(rep.episodes.len(), 3);
        let rows = csv::Reader::from_path(out.join("episode_0002.csv")).unwrap().records().count();
        assert_eq!(rows, 11);
    }

    #[test]
    fn pretrain_then_train_in_one_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig { task: TaskMode::Features, pretrain_first: true, ..tiny(Trainer::Bptt) };
        cfg.pretrain.dataset_size = 200;
        cfg.pretrain.epochs = 2;
        cfg.pretrain.batch_size = 32;
        cfg.pretrain.num_envs = 4;
        let d = dir.path().join("f");
        train_run(&cfg, &d, false, |_| {}).unwrap();
        for f in
            ["pretrain/dataset.bin", "pretrain/epochs.jsonl", "pretrain/representation.ckpt", "metrics.jsonl", "checkpoints/final.ckpt"]
        {
            assert!(d.join(f).exists(), "{f}");
        }
        let rep = Representation::from_checkpoint(&Checkpoint::load(&d.join("pretrain/representation.ckpt")).unwrap()).unwrap();
        assert_eq!(rep.history.len(), 0, "history is not part of the checkpoint");
        assert_eq!(fs::read_to_string(d.join("pretrain/epochs.jsonl")).unwrap().lines().count(), 2);
    }

    #[test]
    fn eval_rejects_mismatched_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let s = train_run(&tiny(Trainer::Bptt), &dir.path().join("s"), false, |_| {}).unwrap();
        let mut ck = Checkpoint::load(&s.final_checkpoint).unwrap();
        ck.meta = RunConfig { task: TaskMode::Features, ..tiny(Trainer::Bptt) }.to_toml();
        let bad = dir.path().join("bad.ckpt");
        ck.save(&bad).unwrap();
        assert!(matches!(eval_checkpoint(&bad, &EvalOptions::default(), None), Err(RunError::Validation(_))));
        assert!(matches!(
            eval_checkpoint(&s.final_checkpoint, &EvalOptions { episodes: 0, ..Default::default() }, None),
            Err(RunError::Validation(_))
        ));
    }
}
