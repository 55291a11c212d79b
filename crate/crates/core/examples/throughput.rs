//! Steps per second for forward rollouts and both BPTT variants.
//!
//! cargo run --release --example throughput -- [max_envs] [horizon]

use diffquad::bench::{run_bench, BenchConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>());
    let max_envs = args.next().transpose()?.unwrap_or(100);
    let horizon = args.next().transpose()?.unwrap_or(20);
    let env_counts = [1, 10, 100, 1000].into_iter().filter(|&n| n <= max_envs).collect();
    let cfg = BenchConfig { env_counts, horizon, ..Default::default() };
    let report = run_bench(&cfg, |_| {})?;
    print!("{}", report.table());
    Ok(())
}
