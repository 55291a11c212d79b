//! Two short runs from a TOML config, one per trainer, written as run
//! directories and summarized as curves, a target table and SVG plots.
//!
//! cargo run --release --example compare_runs -- [out_dir]

use std::path::PathBuf;

use diffquad::config::{RunConfig, Trainer};
use diffquad::report::export;
use diffquad::run::train_run;

const CONFIG: &str = r#"
envs = 20
horizon = 100
iterations = 8
seed = 1
hidden = [16, 16]
checkpoint_every = 0

[bptt.optimizer]
lr = 3e-3

[ppo]
epochs = 4
"#;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("diffquad-compare"));
    let base = RunConfig::from_toml_str(CONFIG, "compare_runs config")?;
    let mut dirs = Vec::new();
    for trainer in [Trainer::Bptt, Trainer::Ppo] {
        let cfg = RunConfig { trainer, ..base.clone() };
        let dir = out.join(trainer.to_string());
        let s = train_run(&cfg, &dir, true, |_| {})?;
        println!("{trainer}: {} iterations -> {}", s.records.len(), s.final_checkpoint.display());
        dirs.push(dir);
    }
    // Targets sized for this short horizon.
    let table = export(&dirs, &out.join("plots"), &[-400.0, -300.0, -200.0])?;
    print!("{table}");
    println!("plots in {}", out.join("plots").display());
    Ok(())
}
