//! Comparison artifacts across run directories: aligned learning curves,
//! reward-target tables and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::metrics::{first_hit, read_metrics, IterationRecord};

pub const DEFAULT_TARGETS: [f64; 4] = [-15.0, -11.0, -7.0, -5.3];
/// Table entry for a target a run never reached.
pub const UNHIT: &str = "−";

#[derive(Clone, Debug, PartialEq)]
pub struct RunCurve {
    pub name: String,
    pub records: Vec<IterationRecord>,
}

/// Loads `metrics.jsonl` from every directory; unreadable or empty runs are
/// skipped with a warning.
pub fn load_runs(dirs: &[PathBuf]) -> Vec<RunCurve> {
    let mut out = Vec::new();
    for d in dirs {
        let name = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| d.display().to_string());
        match read_metrics(&d.join("metrics.jsonl")) {
            Ok(r) if r.is_empty() => log::warn!("{}: empty metrics, skipped", d.display()),
            Ok(records) => out.push(RunCurve { name: unique_name(&out, name), records }),
            Err(e) => log::warn!("{}: {e:#}, skipped", d.display()),
        }
    }
    out
}

fn unique_name(existing: &[RunCurve], name: String) -> String {
    let mut candidate = name.clone();
    let mut k = 2;
    while existing.iter().any(|r| r.name == candidate) {
        candidate = format!("{name}#{k}");
        k += 1;
    }
    candidate
}

/// First-hit record of every run for every target, rows in target order.
pub fn target_hits<'a>(runs: &'a [RunCurve], targets: &[f64]) -> Vec<Vec<Option<&'a IterationRecord>>> {
    targets.iter().map(|&t| runs.iter().map(|r| first_hit(&r.records, t)).collect()).collect()
}

/// Text table: one row per target, samples and seconds to first hit per run.
pub fn target_table(runs: &[RunCurve], targets: &[f64]) -> String {
    let hits = target_hits(runs, targets);
    let mut s = String::new();
    write!(s, "{:>10}", "target").unwrap();
    for r in runs {
        write!(s, " | {:>28}", format!("{} samples / s", r.name)).unwrap();
    }
    s.push('\n');
    for (t, row) in targets.iter().zip(&hits) {
        write!(s, "{t:>10}").unwrap();
        for h in row {
            let cell = match h {
                Some(r) => format!("{} / {:.1}", r.samples, r.wall_clock),
                None => UNHIT.to_string(),
            };
            write!(s, " | {cell:>28}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn write_targets_csv(path: &Path, runs: &[RunCurve], targets: &[f64]) -> anyhow::Result<()> {
    let hits = target_hits(runs, targets);
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["target", "run", "iteration", "samples", "wall_clock"])?;
    for (t, row) in targets.iter().zip(&hits) {
        for (run, h) in runs.iter().zip(row) {
            let (i, n, c) = match h {
                Some(r) => (r.iteration.to_string(), r.samples.to_string(), r.wall_clock.to_string()),
                None => (UNHIT.into(), UNHIT.into(), UNHIT.into()),
            };
            w.write_record([t.to_string(), run.name.clone(), i, n, c])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_curves_csv(path: &Path, runs: &[RunCurve]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "iteration", "samples", "wall_clock", "reward_mean", "reward_std"])?;
    for run in runs {
        for r in &run.records {
            w.write_record([
                run.name.clone(),
                r.iteration.to_string(),
                r.samples.to_string(),
                r.wall_clock.to_string(),
                r.reward_mean.to_string(),
                r.reward_std.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XAxis {
    Samples,
    WallClock,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Mean reward against samples or seconds, one polyline per run.
pub fn svg_plot(runs: &[RunCurve], x: XAxis, targets: &[f64]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 70.0, 20.0, 20.0, 50.0);
    let xs = |r: &IterationRecord| match x {
        XAxis::Samples => r.samples as f64,
        XAxis::WallClock => r.wall_clock,
    };
    let all = runs.iter().flat_map(|r| &r.records);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in all {
        x0 = x0.min(xs(r));
        x1 = x1.max(xs(r));
        y0 = y0.min(r.reward_mean);
        y1 = y1.max(r.reward_mean);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    x0 = x0.min(0.0);
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |v: f64| ml + (v - x0) / (x1 - x0) * (w - ml - mr);
    let py = |v: f64| mt + (y1 - v) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<g stroke="black"><line x1="{ml}" y1="{}" x2="{}" y2="{}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}"/></g>"#,
        h - mb,
        w - mr,
        h - mb,
        h - mb
    )
    .unwrap();
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(fx), h - mb + 15.0, short(fx)).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 5.0, py(fy) + 4.0, short(fy)).unwrap();
    }
    let xlabel = match x {
        XAxis::Samples => "environment steps",
        XAxis::WallClock => "wall-clock seconds",
    };
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, (ml + w - mr) / 2.0, h - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">mean episode reward</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    )
    .unwrap();
    for &t in targets.iter().filter(|t| **t >= y0 && **t <= y1) {
        writeln!(s, r##"<line x1="{ml}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##, w - mr, py(t), py(t))
            .unwrap();
    }
    for (i, run) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = run.records.iter().map(|r| format!("{:.1},{:.1}", px(xs(r)), py(r.reward_mean))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = mt + 14.0 * (i as f64 + 1.0);
        writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}" text-anchor="end">{}</text>"#, w - mr - 5.0, xml_escape(&run.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if a >= 1e4 {
        format!("{:.0}k", v / 1e3)
    } else if a >= 100.0 || v == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Writes every artifact into `out` and returns the text target table.
pub fn export(dirs: &[PathBuf], out: &Path, targets: &[f64]) -> anyhow::Result<String> {
    let runs = load_runs(dirs);
    anyhow::ensure!(!runs.is_empty(), "no run with metrics among {} director(ies)", dirs.len());
    std::fs::create_dir_all(out)?;
    write_curves_csv(&out.join("curves.csv"), &runs)?;
    write_targets_csv(&out.join("targets.csv"), &runs, targets)?;
    let table = target_table(&runs, targets);
    std::fs::write(out.join("targets.txt"), &table)?;
    std::fs::write(out.join("reward_vs_samples.svg"), svg_plot(&runs, XAxis::Samples, targets))?;
    std::fs::write(out.join("reward_vs_time.svg"), svg_plot(&runs, XAxis::WallClock, targets))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::MetricsWriter;

    fn rec(i: usize, r: f64) -> IterationRecord {
        IterationRecord {
            iteration: i,
            reward_mean: r,
            reward_std: 1.0,
            samples: (i as u64 + 1) * 100,
            wall_clock: 0.5 * (i + 1) as f64,
            grad_norm: 1.0,
            skipped: false,
            blowups: 0,
        }
    }

    fn write_run(dir: &Path, name: &str, rewards: &[f64]) -> PathBuf {
        let d = dir.join(name);
        std::fs::create_dir_all(&d).unwrap();
        let mut w = MetricsWriter::create(&d.join("metrics.jsonl")).unwrap();
        for (i, r) in rewards.iter().enumerate() {
            w.write(&rec(i, *r)).unwrap();
        }
        d
    }

    #[test]
    fn single_run_has_four_target_rows_with_unhit_marks() {
        let runs = vec![RunCurve { name: "a".into(), records: vec![rec(0, -20.0), rec(1, -12.0), rec(2, -10.0)] }];
        let t = target_table(&runs, &DEFAULT_TARGETS);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].contains("200 / 1.0"), "{t}");
        assert!(lines[2].contains("300 / 1.5"), "{t}");
        assert!(lines[3].trim_end().ends_with(UNHIT) && lines[4].trim_end().ends_with(UNHIT));
    }

    #[test]
    fn empty_and_missing_runs_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a", &[-9.0, -6.0]);
        let empty = write_run(dir.path(), "empty", &[]);
        let runs = load_runs(&[a, empty, dir.path().join("missing")]);
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].name, "a");
    }

    #[test]
    fn export_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a", &[-20.0, -8.0, -5.0]);
        let b = write_run(dir.path(), "b", &[-30.0, -25.0, -14.0]);
        let t1 = export(&[a.clone(), b.clone()], &dir.path().join("o1"), &DEFAULT_TARGETS).unwrap();
        let t2 = export(&[a, b], &dir.path().join("o2"), &DEFAULT_TARGETS).unwrap();
        assert_eq!(t1, t2);
        for f in ["curves.csv", "targets.csv", "reward_vs_samples.svg", "reward_vs_time.svg"] {
            let x = std::fs::read(dir.path().join("o1").join(f)).unwrap();
            assert_eq!(x, std::fs::read(dir.path().join("o2").join(f)).unwrap(), "{f}");
        }
        let svg = std::fs::read_to_string(dir.path().join("o1/reward_vs_samples.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let rows = csv::Reader::from_path(dir.path().join("o1/targets.csv")).unwrap().records().count();
        assert_eq!(rows, 8);
    }

    #[test]
    fn export_with_no_usable_run_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export(&[dir.path().join("nope")], &dir.path().join("o"), &DEFAULT_TARGETS).is_err());
    }

    #[test]
    fn duplicate_names_are_disambiguated() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_run(dir.path(), "a", &[-1.0]);
        let runs = load_runs(&[a.clone(), a]);
        assert_eq!(runs[1].name, "a#2");
    }
}
