//! Deterministic evaluation of a trained policy on sampled throws.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynamics::STATE_DIM;
use crate::env::{mean, rollout, Env, Trajectory};
use crate::policy::MlpParams;

/// Iteration index reserved for evaluation streams; training never gets here.
pub const EVAL_ITERATION: u64 = 1 << 32;

/// Success means the quadrotor settled: over the final window both the mean
/// position error and the mean speed stay under their tolerances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessCriterion {
    pub window_seconds: f64,
    pub position_tolerance: f64,
    pub speed_tolerance: f64,
}

impl Default for SuccessCriterion {
    fn default() -> Self {
        SuccessCriterion { window_seconds: 1.0, position_tolerance: 0.2, speed_tolerance: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    pub reward: f64,
    pub final_position_error: f64,
    pub final_speed: f64,
    pub blew_up: bool,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeResult>,
    pub success_rate: f64,
    pub mean_reward: f64,
}

/// Window statistics over the last `window_seconds` of states, including
/// the terminal one.
pub fn judge(traj: &Trajectory, p_des: [f64; 3], dt: f64, crit: &SuccessCriterion) -> (f64, f64, bool) {
    let n = traj.states.len();
    let k = ((crit.window_seconds / dt).round() as usize).clamp(1, n);
    let window = &traj.states[n - k..];
    let pos = mean(&window.iter().map(|x| dist(&x[..3], &p_des)).collect::<Vec<_>>());
    let speed = mean(&window.iter().map(|x| dist(&x[12..15], &[0.0; 3])).collect::<Vec<_>>());
    let ok = !traj.blew_up && pos < crit.position_tolerance && speed < crit.speed_tolerance;
    (pos, speed, ok)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Rolls `params` out on `episodes` throws drawn from `seed`.
pub fn evaluate(
    env: &Env,
    params: &MlpParams,
    episodes: usize,
    seed: u64,
    shard_size: usize,
    crit: &SuccessCriterion,
) -> (EvalReport, Vec<Trajectory>) {
    let batch = rollout(env, params, seed, EVAL_ITERATION, episodes, shard_size);
    let dt = env.config.dynamics.dt;
    let p_des = env.config.reward.p_des;
    let results: Vec<EpisodeResult> = batch
        .trajectories
        .iter()
        .enumerate()
        .map(|(i, tr)| {
            let (pos, speed, success) = judge(tr, p_des, dt, crit);
            EpisodeResult {
                episode: i,
                reward: tr.episode_reward(),
                final_position_error: pos,
                final_speed: speed,
                blew_up: tr.blew_up,
                success,
            }
        })
        .collect();
    let n = results.len().max(1) as f64;
    let report = EvalReport {
        success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
        mean_reward: mean(&results.iter().map(|r| r.reward).collect::<Vec<_>>()),
        episodes: results,
    };
    (report, batch.trajectories)
}

pub fn trajectory_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "px".into(), "py".into(), "pz".into()];
    // vec(R) is column-major: r<row><col> with the row index varying fastest.
    for col in 0..3 {
        for row in 0..3 {
            h.push(format!("r{row}{col}"));
        }
    }
    h.extend(["vx", "vy", "vz", "c", "wx", "wy", "wz"].map(String::from));
    h
}

/// One row per state `x_0 .. x_N`; the action columns of the last row are
/// empty because no action follows the terminal state.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, dt: f64) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(trajectory_header())?;
    for (t, x) in traj.states.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(1 + STATE_DIM + 4);
        row.push(format!("{}", t as f64 * dt));
        row.extend(x.iter().map(|v| v.to_string()));
        match traj.actions.get(t) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `report.json` and `episode_NNNN.csv` files into `dir`.
pub fn write_eval_outputs(dir: &Path, report: &EvalReport, trajs: &[Trajectory], dt: f64) -> anyhow::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut paths = Vec::with_capacity(trajs.len());
    for (i, tr) in trajs.iter().enumerate() {
        let p = dir.join(format!("episode_{i:04}.csv"));
        write_trajectory_csv(&p, tr, dt)?;
        paths.push(p);
    }
    Ok(paths)
}
