//! Benchmark orchestration, aggregation, plots and run inspection.
//!
//! Aggregation reads only completed run directories, so the same directories
//! always produce byte-identical reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::achiever::{achieve, parse_results_csv, AchieveConfig, GoalSpec};
use crate::config::Config;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::explorer::{self, EpisodeMetrics, Learners, Method, ReplayBuffer, RunOptions, Task};
use crate::seeds::derive_seed;

pub use crate::explorer::baseline_icm_reward;

pub const ACHIEVE_FILE: &str = "achieve.csv";
pub const PLOT_FILE: &str = "cumulative_successes.svg";
pub const SUCCESS_TABLE_FILE: &str = "success_rates.csv";
pub const TREND_TABLE_FILE: &str = "cumulative_successes.csv";
pub const REPORT_FILE: &str = "report.txt";

/// Goal-reaching rates measured on a physical robot, kept for context only.
pub const ROBOT_REFERENCE_RATES: [(&str, f64); 2] = [("cabinet", 1.00), ("knife", 0.60)];

/// Across-member variance of the next latent, averaged over latent dims.
pub fn baseline_lexa_objective(ensemble: &Ensemble, state: &[f64], action: &[f64]) -> Result<f64> {
    ensemble.disagreement(state, action)
}

/// Short hex digest of the serialized config.
pub fn config_hash(cfg: &Config) -> String {
    let digest = Sha256::digest(cfg.to_toml_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

pub fn cumulative_successes(rows: &[EpisodeMetrics]) -> Vec<f64> {
    rows.iter()
        .scan(0.0, |acc, r| {
            *acc += f64::from(u8::from(r.success));
            Some(*acc)
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Pointwise median of equal-length curves; shorter curves are padded with their last value.
pub fn median_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.iter().map(Vec::len).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            let col: Vec<f64> = curves
                .iter()
                .filter_map(|c| c.get(i).or(c.last()).copied())
                .collect();
            median(&col).unwrap_or(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotMeta {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Line chart of cumulative successes against episodes.
///
/// Each polyline carries its raw y-values in `data-values`.
pub fn svg_plot(title: &str, series: &[Series], meta: &PlotMeta) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(1);
    let ymax = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .fold(1.0_f64, f64::max);
    let x = |i: usize| m + (w - 2.0 * m) * (i + 1) as f64 / n as f64;
    let y = |v: f64| h - m - (h - 2.0 * m) * v / ymax;
    let seeds: Vec<String> = meta.seeds.iter().map(u64::to_string).collect();
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, "<!-- config_hash: {} seeds: {} -->", meta.config_hash, seeds.join(","));
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#, w / 2.0, xml_escape(title));
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">episodes</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle" font-family="sans-serif" font-size="12">cumulative successes</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{}</text>"#, m - 4.0, m + 4.0, fmt_num(ymax));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-family="sans-serif" font-size="10">{n}</text>"#, w - m, h - m + 14.0);
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let vals: Vec<String> = ser.values.iter().map(|&v| fmt_num(v)).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" data-label="{}" data-values="{}" points="{}"/>"#,
            xml_escape(&ser.label),
            vals.join(","),
            pts.join(" ")
        );
        let ly = m + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}" font-family="sans-serif" font-size="12">{}</text>"#, m + 10.0, xml_escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reads back the `data-values` of every polyline.
pub fn plot_values(svg: &str) -> Vec<(String, Vec<f64>)> {
    let attr = |line: &str, name: &str| -> Option<String> {
        let key = format!("{name}=\"");
        let start = line.find(&key)? + key.len();
        let end = line[start..].find('"')? + start;
        Some(line[start..end].to_string())
    };
    svg.lines()
        .filter(|l| l.starts_with("<polyline"))
        .filter_map(|l| {
            let label = attr(l, "data-label")?;
            let values = attr(l, "data-values")?;
            let v = values.split(',').filter(|s| !s.is_empty()).filter_map(|s| s.parse().ok()).collect();
            Some((label, v))
        })
        .collect()
}

/// Cumulative-success plot for a single run directory.
pub fn plot_run(dir: &Path) -> Result<PathBuf> {
    let metrics = explorer::read_metrics(dir)?;
    let cfg = Config::load(&dir.join(explorer::CONFIG_FILE))?;
    let summary = explorer::read_summary(dir).ok();
    let (label, seeds) = match &summary {
        Some(s) => (format!("{} / {}", s.method, s.task), vec![s.seed]),
        None => ("run".to_string(), Vec::new()),
    };
    let svg = svg_plot(
        &label,
        &[Series {
            label: label.clone(),
            values: cumulative_successes(&metrics),
        }],
        &PlotMeta {
            config_hash: config_hash(&cfg),
            seeds,
        },
    );
    let path = dir.join(PLOT_FILE);
    std::fs::write(&path, svg)?;
    Ok(path)
}

pub fn run_dir(out: &Path, task: &str, method: Method, seed: u64) -> PathBuf {
    out.join("runs").join(task).join(method.name()).join(format!("seed_{seed}"))
}

/// Newest checkpoint directory of a run, if any.
pub fn latest_checkpoints(run: &Path) -> Option<PathBuf> {
    let root = run.join("checkpoints");
    let last = root.join("last");
    if last.is_dir() {
        return Some(last);
    }
    let mut cycles: Vec<PathBuf> = std::fs::read_dir(&root)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    cycles.sort();
    cycles.pop()
}

/// Goal-reaching trials against a finished run directory.
pub fn achieve_run(cfg: &Config, run: &Path, task_id: Option<&str>, seed: u64) -> Result<crate::achiever::AchieveReport> {
    let summary = explorer::read_summary(run)?;
    let task = Task::new(cfg, task_id.unwrap_or(&summary.task))?;
    let replay = ReplayBuffer::open(&run.join(explorer::REPLAY_FILE))?;
    let learners = match latest_checkpoints(run) {
        Some(dir) => Learners::load(&dir, cfg, summary.method)?,
        None => Learners::new(cfg, Method::Random, seed, &mut Default::default())?,
    };
    let goal = GoalSpec::scripted(&task)?;
    achieve(
        &task,
        replay.as_slice(),
        learners.model.as_ref(),
        &goal,
        &AchieveConfig::from_config(cfg),
        derive_seed(seed, "achieve", 0),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub task: String,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub final_successes: Vec<f64>,
    pub median_curve: Vec<f64>,
    pub achieve_rates: Vec<f64>,
}

impl CellSummary {
    pub fn median_final(&self) -> Option<f64> {
        median(&self.final_successes)
    }

    pub fn mean_achieve_rate(&self) -> Option<f64> {
        (!self.achieve_rates.is_empty()).then(|| self.achieve_rates.iter().sum::<f64>() / self.achieve_rates.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkReport {
    pub cells: Vec<CellSummary>,
    /// `(task, method, seed, message)` of runs that failed.
    pub failures: Vec<(String, String, u64, String)>,
    pub plots: Vec<PathBuf>,
}

impl BenchmarkReport {
    pub fn cell(&self, task: &str, method: Method) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.task == task && c.method == method)
    }
}

fn methods_of(cfg: &Config) -> Result<Vec<Method>> {
    cfg.benchmark.methods.iter().map(|m| m.parse()).collect()
}

/// Runs every (task, method, seed) combination, then aggregates.
///
/// Completed runs are kept and skipped on a rerun; a failed run is reported
/// and the remaining ones still execute.
pub fn run_benchmark(cfg: &Config, out: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let methods = methods_of(cfg)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut failures = Vec::new();
    for task in &cfg.benchmark.tasks {
        Task::new(cfg, task)?;
        for &method in &methods {
            for &seed in &cfg.benchmark.seeds {
                let dir = run_dir(out, task, method, seed);
                if let Err(e) = benchmark_one(cfg, &dir, task, method, seed) {
                    log::error!("{task}/{method}/seed {seed} failed: {e}");
                    failures.push((task.clone(), method.name().to_string(), seed, e.to_string()));
                }
            }
        }
    }
    let mut report = aggregate(cfg, out)?;
    report.failures = failures;
    Ok(report)
}

fn benchmark_one(cfg: &Config, dir: &Path, task: &str, method: Method, seed: u64) -> Result<()> {
    let done = dir.join(explorer::SUMMARY_FILE).exists();
    if done && (!cfg.benchmark.achieve || dir.join(ACHIEVE_FILE).exists()) {
        log::info!("{} already complete", dir.display());
        return Ok(());
    }
    if !done && dir.exists() {
        // an interrupted run of our own; start it over
        std::fs::remove_dir_all(dir)?;
    }
    let outcome = if done {
        None
    } else {
        Some(explorer::run(
            cfg,
            &RunOptions {
                method,
                task: task.to_string(),
                seed,
                out_dir: Some(dir.to_path_buf()),
            },
        )?)
    };
    if cfg.benchmark.achieve {
        let report = match &outcome {
            Some(o) => achieve(
                &o.task,
                o.replay.as_slice(),
                o.learners.model.as_ref(),
                &GoalSpec::scripted(&o.task)?,
                &AchieveConfig::from_config(cfg),
                derive_seed(seed, "achieve", 0),
            )?,
            None => achieve_run(cfg, dir, Some(task), seed)?,
        };
        std::fs::write(dir.join(ACHIEVE_FILE), report.to_csv())?;
    }
    Ok(())
}

/// Builds plots and tables from whatever run directories exist under `out`.
pub fn aggregate(cfg: &Config, out: &Path) -> Result<BenchmarkReport> {
    let methods = methods_of(cfg)?;
    let hash = config_hash(cfg);
    let mut report = BenchmarkReport::default();
    std::fs::create_dir_all(out.join("plots"))?;
    for task in &cfg.benchmark.tasks {
        let mut series = Vec::new();
        let mut seeds_seen = std::collections::BTreeSet::new();
        for &method in &methods {
            let mut cell = CellSummary {
                task: task.clone(),
                method,
                seeds: Vec::new(),
                final_successes: Vec::new(),
                median_curve: Vec::new(),
                achieve_rates: Vec::new(),
            };
            let mut curves = Vec::new();
            for &seed in &cfg.benchmark.seeds {
                let dir = run_dir(out, task, method, seed);
                if !dir.join(explorer::SUMMARY_FILE).exists() {
                    continue;
                }
                let curve = cumulative_successes(&explorer::read_metrics(&dir)?);
                cell.final_successes.push(curve.last().copied().unwrap_or(0.0));
                curves.push(curve);
                cell.seeds.push(seed);
                seeds_seen.insert(seed);
                if let Ok(text) = std::fs::read_to_string(dir.join(ACHIEVE_FILE)) {
                    let trials = parse_results_csv(&text)?;
                    if !trials.is_empty() {
                        cell.achieve_rates
                            .push(trials.iter().filter(|t| t.success).count() as f64 / trials.len() as f64);
                    }
                }
            }
            if curves.is_empty() {
                continue;
            }
            cell.median_curve = median_curve(&curves);
            series.push(Series {
                label: method.name().to_string(),
                values: cell.median_curve.clone(),
            });
            report.cells.push(cell);
        }
        if series.is_empty() {
            continue;
        }
        let svg = svg_plot(
            &format!("{task}: median cumulative successes"),
            &series,
            &PlotMeta {
                config_hash: hash.clone(),
                seeds: seeds_seen.into_iter().collect(),
            },
        );
        let path = out.join("plots").join(format!("{task}.svg"));
        std::fs::write(&path, svg)?;
        report.plots.push(path);
    }
    std::fs::write(out.join(SUCCESS_TABLE_FILE), success_table(cfg, &methods, &report))?;
    std::fs::write(out.join(TREND_TABLE_FILE), trend_table(&report))?;
    std::fs::write(out.join(REPORT_FILE), text_report(cfg, &methods, &report))?;
    Ok(report)
}

fn success_table(cfg: &Config, methods: &[Method], report: &BenchmarkReport) -> String {
    let mut s = String::from("method");
    for t in &cfg.benchmark.tasks {
        s.push(',');
        s.push_str(t);
    }
    s.push('\n');
    for &m in methods {
        s.push_str(m.name());
        for t in &cfg.benchmark.tasks {
            match report.cell(t, m).and_then(CellSummary::mean_achieve_rate) {
                Some(r) => {
                    let _ = write!(s, ",{r:.2}");
                }
                None => s.push_str(",na"),
            }
        }
        s.push('\n');
    }
    s
}

fn trend_table(report: &BenchmarkReport) -> String {
    let mut s = String::from("task,method,seeds,median_final_successes,final_successes\n");
    for c in &report.cells {
        let finals: Vec<String> = c.final_successes.iter().map(|&v| fmt_num(v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.task,
            c.method,
            c.seeds.len(),
            fmt_num(c.median_final().unwrap_or(0.0)),
            finals.join(" ")
        );
    }
    s
}

fn text_report(cfg: &Config, methods: &[Method], report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config hash: {}", config_hash(cfg));
    let seeds: Vec<String> = cfg.benchmark.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds: {}\n", seeds.join(","));
    let _ = writeln!(s, "median cumulative coincidental successes");
    let mut by_task: BTreeMap<&str, Vec<&CellSummary>> = BTreeMap::new();
    for c in &report.cells {
        by_task.entry(c.task.as_str()).or_default().push(c);
    }
    for (task, cells) in &by_task {
        let _ = write!(s, "  {task}:");
        for c in cells {
            let _ = write!(s, " {}={}", c.method, fmt_num(c.median_final().unwrap_or(0.0)));
        }
        s.push('\n');
    }
    let _ = writeln!(s, "\ngoal-reaching success rate");
    s.push_str(&success_table(cfg, methods, report));
    let refs: Vec<String> = ROBOT_REFERENCE_RATES.iter().map(|(t, r)| format!("{t} {r:.2}")).collect();
    let _ = writeln!(s, "\nphysical-robot reference (context only): {}", refs.join(", "));
    s
}

/// Human-readable overview of a run directory.
pub fn inspect(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a run directory", dir.display())));
    }
    let mut s = String::new();
    let _ = writeln!(s, "run: {}", dir.display());
    if let Ok(sum) = explorer::read_summary(dir) {
        let _ = writeln!(s, "method: {}  task: {}  seed: {}", sum.method, sum.task, sum.seed);
        let _ = writeln!(
            s,
            "episodes: {} bootstrap + {} exploration, {} coincidental successes",
            sum.bootstrap_episodes, sum.exploration_episodes, sum.cumulative_successes
        );
        let c = sum.counters;
        let _ = writeln!(
            s,
            "training steps: world model {}, ensemble {}, latent ensemble {}, policy {}; plans {}; env steps {}",
            c.wm_train_steps, c.ensemble_train_steps, c.latent_ensemble_train_steps, c.awr_train_steps, c.plans, c.env_steps
        );
    } else {
        let _ = writeln!(s, "no summary (run incomplete)");
    }
    let journal = dir.join(explorer::REPLAY_FILE);
    if journal.exists() {
        let replay = ReplayBuffer::open(&journal)?;
        let totals = replay.totals();
        let successes = replay.iter().filter(|t| t.meta.success).count();
        let mean = if totals.is_empty() { 0.0 } else { totals.iter().sum::<f64>() / totals.len() as f64 };
        let max = totals.iter().copied().fold(0.0, f64::max);
        let _ = writeln!(
            s,
            "replay: {} trajectories, {successes} successful, total change mean {mean:.4} max {max:.4}",
            replay.len()
        );
    }
    if let Some(ck) = latest_checkpoints(dir) {
        let mut files: Vec<String> = std::fs::read_dir(&ck)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        files.sort();
        let _ = writeln!(s, "checkpoints ({}): {}", ck.display(), files.join(", "));
    }
    if let Ok(text) = std::fs::read_to_string(dir.join(ACHIEVE_FILE)) {
        let trials = parse_results_csv(&text)?;
        let ok = trials.iter().filter(|t| t.success).count();
        let _ = writeln!(s, "goal reaching: {ok}/{} trials succeeded", trials.len());
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn plot_roundtrips_values_and_metadata() {
        let svg = svg_plot(
            "t",
            &[Series {
                label: "alan".into(),
                values: vec![0.0, 1.0, 1.5, 3.0],
            }],
            &PlotMeta {
                config_hash: "abc".into(),
                seeds: vec![1, 2],
            },
        );
        assert!(svg.contains("<!-- config_hash: abc seeds: 1,2 -->"));
        assert_eq!(plot_values(&svg), vec![("alan".to_string(), vec![0.0, 1.0, 1.5, 3.0])]);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.planner.w_dis = 0.5;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
