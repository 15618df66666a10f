//! Command implementations. Each writes its human-readable output to `out`
//! and returns the structured result.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::synthetic::{generate, write_csv, SyntheticSpec};
use crate::protocol::{canonical_hash, canonical_json, execute, read_log, ExperimentPlan, RunRecord, RunStatus};
use crate::stats::{align, report, significance, significance_text, Report, SignificanceRow};

pub const LOG_FILE: &str = "runs.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const CONFIG_FILE: &str = "config.json";

/// Dataset root: the explicit directory if given, else the config's directory.
pub fn data_root(explicit: Option<&Path>, config_path: &Path) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| {
        config_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    })
}

/// A directory holding `runs.jsonl`, or the log file itself.
pub fn log_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(LOG_FILE)
    } else {
        path.to_path_buf()
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_hash: String,
    pub plan: ExperimentPlan,
    pub out_dir: PathBuf,
    pub records: Vec<RunRecord>,
    /// Runs executed by this invocation (the rest were resumed from the log).
    pub new_runs: usize,
}

impl RunOutcome {
    pub fn count(&self, status: RunStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }
}

fn run_config(
    cfg: &ExperimentConfig,
    data_root: &Path,
    parallelism: usize,
    out_dir: &Path,
    progress: bool,
    out: &mut dyn Write,
) -> Result<RunOutcome> {
    let config_hash = cfg.hash();
    writeln!(out, "config {config_hash}")?;
    let plan = cfg.plan()?;
    writeln!(out, "plan   {} ({} runs)", plan.hash, plan.len())?;
    let catalog = cfg.load_datasets(data_root)?;
    std::fs::create_dir_all(out_dir)?;
    // The plan hash does not cover dataset definitions; the config hash does.
    let stored = out_dir.join(CONFIG_FILE);
    if stored.exists() {
        let previous: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stored)?)?;
        let previous = canonical_hash(&previous)?;
        if previous != config_hash {
            return Err(Error::Plan(format!(
                "{} holds runs of config {previous}, not {config_hash}",
                out_dir.display()
            )));
        }
    }
    write_atomic(&stored, &canonical_json(cfg)?)?;
    write_atomic(&out_dir.join(PLAN_FILE), &serde_json::to_string_pretty(&plan)?)?;
    let log = out_dir.join(LOG_FILE);
    let before = if log.exists() { read_log(&log)?.len() } else { 0 };
    let report_progress = |i: usize, n: usize, r: &RunRecord| {
        let loss = r.loss().map_or_else(|| format!("{:?}", r.status), |l| format!("{l:.4}"));
        eprintln!("[{i}/{n}] {} {} T={} P={} -> {loss}", r.eo, r.ec.dataset, r.ec.lookback, r.ec.horizon);
    };
    let records = execute(&plan, &catalog, parallelism, Some(&log), progress.then_some(&report_progress as _))?;
    let new_runs = records.len().saturating_sub(before);
    let outcome = RunOutcome {
        config_hash,
        plan,
        out_dir: out_dir.to_path_buf(),
        records,
        new_runs,
    };
    writeln!(
        out,
        "{} runs ({} new): {} ok, {} diverged, {} failed; log {}",
        outcome.records.len(),
        outcome.new_runs,
        outcome.count(RunStatus::Ok),
        outcome.count(RunStatus::Diverged),
        outcome.count(RunStatus::Failed),
        log.display()
    )?;
    Ok(outcome)
}

/// Samples, plans and executes a config, resuming from an existing log.
/// With `progress`, one line per finished run goes to standard error.
pub fn cmd_run(
    config: &Path,
    data_dir: Option<&Path>,
    parallelism: usize,
    out_dir: Option<&Path>,
    progress: bool,
    out: &mut dyn Write,
) -> Result<RunOutcome> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = cfg.output_dir(out_dir);
    run_config(&cfg, &data_root(data_dir, config), parallelism, &dir, progress, out)
}

/// Summary tables of a run log; writes `report.tsv` next to it.
pub fn cmd_report(log: &Path, group_by: &str, out: &mut dyn Write) -> Result<Report> {
    let path = log_path(log);
    let records = read_log(&path)?;
    let rep = report(&records, group_by)?;
    write!(out, "{}", rep.to_text())?;
    let dir = path.parent().unwrap_or(Path::new("."));
    write_atomic(&dir.join("report.tsv"), &rep.to_tsv())?;
    Ok(rep)
}

/// One-tailed paired comparison of two variants; writes `significance.tsv`.
pub fn cmd_significance(log: &Path, a: &str, b: &str, alpha: f64, out: &mut dyn Write) -> Result<Vec<SignificanceRow>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("--alpha {alpha} outside (0, 1)")));
    }
    let path = log_path(log);
    let records = read_log(&path)?;
    let rows = significance(&records, a, b, alpha)?;
    writeln!(out, "plan {}", records[0].plan_hash)?;
    write!(out, "{}", significance_text(&rows, a, b, alpha))?;
    let mut tsv = String::from("scope\tpairs\tdropped\tu\tp\texact\tsignificant\n");
    for r in &rows {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.scope, r.pairs, r.dropped, r.test.u, r.test.p, r.test.exact, r.significant
        ));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    write_atomic(&dir.join("significance.tsv"), &tsv)?;
    Ok(rows)
}

/// Per-seed pooled statistics of a multi-seed run.
#[derive(Clone, Debug)]
pub struct MultiSeedOutcome {
    pub seeds: Vec<u64>,
    pub runs: Vec<RunOutcome>,
    /// Row keys (`group/dataset/horizon`).
    pub keys: Vec<String>,
    /// `mu[row][seed]`.
    pub mu: Vec<Vec<Option<f64>>>,
    pub sigma: Vec<Vec<Option<f64>>>,
    /// Largest cross-seed |Δμ̂| over all rows.
    pub max_delta_mu: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

/// Runs the plan once per seed, each in `seed-<s>/` under the output
/// directory. The condition sample is shared; only the seed field changes.
pub fn cmd_multiseed(
    config: &Path,
    data_dir: Option<&Path>,
    parallelism: usize,
    out_dir: Option<&Path>,
    seeds: Option<&[u64]>,
    progress: bool,
    out: &mut dyn Write,
) -> Result<MultiSeedOutcome> {
    let cfg = ExperimentConfig::load(config)?;
    let seeds = seeds.map(<[u64]>::to_vec).unwrap_or_else(|| cfg.seeds.clone());
    if seeds.len() < 2 {
        return Err(Error::Config(format!("seeds: need at least two, got {}", seeds.len())));
    }
    let root = data_root(data_dir, config);
    let base = cfg.output_dir(out_dir);
    writeln!(out, "config {}", cfg.hash())?;
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for &s in &seeds {
        writeln!(out, "seed {s}")?;
        let seeded = cfg.with_seed(s);
        let outcome = run_config(&seeded, &root, parallelism, &base.join(format!("seed-{s}")), progress, out)?;
        reports.push(report(&outcome.records, "eo")?);
        runs.push(outcome);
    }
    let keys: Vec<String> = reports[0].rows.iter().map(|r| r.key()).collect();
    let lookup = |rep: &Report, key: &str| rep.rows.iter().find(|r| r.key() == key).map(|r| r.stats.clone());
    let mut mu = Vec::new();
    let mut sigma: Vec<Vec<Option<f64>>> = Vec::new();
    let mut max_delta_mu = 0.0f64;
    for key in &keys {
        let stats: Vec<_> = reports.iter().map(|rep| lookup(rep, key)).collect();
        let m: Vec<Option<f64>> = stats.iter().map(|s| s.as_ref().and_then(|s| s.mu)).collect();
        let present: Vec<f64> = m.iter().flatten().copied().collect();
        if let (Some(lo), Some(hi)) = (
            present.iter().copied().reduce(f64::min),
            present.iter().copied().reduce(f64::max),
        ) {
            max_delta_mu = max_delta_mu.max(hi - lo);
        }
        sigma.push(stats.iter().map(|s| s.as_ref().and_then(|s| s.sigma)).collect());
        mu.push(m);
    }

    let mut header = vec!["group".to_string()];
    for s in &seeds {
        header.push(format!("mu@{s}"));
        header.push(format!("sigma@{s}"));
    }
    let mut table = vec![header.clone()];
    let mut tsv = header.join("\t") + "\n";
    for (i, key) in keys.iter().enumerate() {
        let mut row = vec![key.clone()];
        let mut raw = vec![key.clone()];
        for j in 0..seeds.len() {
            row.push(fmt_opt(mu[i][j]));
            row.push(fmt_opt(sigma[i][j]));
            raw.push(mu[i][j].map_or("".into(), |v| v.to_string()));
            raw.push(sigma[i][j].map_or("".into(), |v| v.to_string()));
        }
        table.push(row);
        tsv.push_str(&(raw.join("\t") + "\n"));
    }
    write!(out, "{}", align(&table))?;
    writeln!(out, "max cross-seed |delta mu| = {max_delta_mu:.6}")?;
    std::fs::create_dir_all(&base)?;
    write_atomic(&base.join("multiseed.tsv"), &tsv)?;
    Ok(MultiSeedOutcome {
        seeds,
        runs,
        keys,
        mu,
        sigma,
        max_delta_mu,
    })
}

/// Writes a synthetic series as CSV.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, path: &Path, out: &mut dyn Write) -> Result<()> {
    let name = path
        .file_stem()
        .map_or("synthetic".to_string(), |s| s.to_string_lossy().into_owned());
    let ds = generate(&name, spec)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_csv(&ds, path)?;
    writeln!(
        out,
        "wrote {} ({} steps x {} variates, spec {})",
        path.display(),
        ds.len(),
        ds.variates(),
        canonical_json(spec)?
    )?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Validated {
    pub config_hash: String,
    pub plan_hash: String,
    pub runs: usize,
}

/// Parses, validates and samples a config without loading data or training.
pub fn cmd_validate_config(config: &Path, out: &mut dyn Write) -> Result<Validated> {
    let cfg = ExperimentConfig::load(config)?;
    let plan = cfg.plan()?;
    writeln!(out, "config {}", cfg.hash())?;
    writeln!(out, "plan   {}", plan.hash)?;
    writeln!(
        out,
        "{} stage, {} variants x {} conditions = {} runs",
        plan.stage.as_str(),
        plan.variants.len(),
        plan.ecs.len(),
        plan.len()
    )?;
    Ok(Validated {
        config_hash: cfg.hash(),
        runs: plan.len(),
        plan_hash: plan.hash,
    })
}
