//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on invalid input (the offending key path is
//! printed to standard error), 2 when a run fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::experiments::{
    ablation_study, forgetting_study, ratio_sweep, run_experiment, seed_data, tau_sweep, train_run, CellSummary,
    ExperimentSpec, Manifest, RunConfig, Table, TrainManifest,
};
use crate::metrics::{evaluate, EvalConfig, EvalReport};
use crate::objectives::{gradcheck_suite, GRADCHECK_TOLERANCE};
use crate::persistence::{load_checkpoint, load_toml, read_json, write_atomic, write_json};
use crate::seed::derive_seed;

#[derive(Debug, Parser)]
#[command(name = "gftlab", version, about = "Group fine-tuning experiments on tiny autoregressive policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the stages of a run config and write a run bundle.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the evaluation split of a run config.
    Eval {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Base checkpoint for KL-to-base.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Write the report as JSON here instead of printing CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Threshold sweep of GFT.
    SweepTau {
        #[arg(short, long)]
        config: PathBuf,
        /// Comma-separated thresholds, overriding `sweep.taus`.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Group-composition sweep of GFT over `N_demo:N_sample` ratios.
    SweepRatio {
        #[arg(short, long)]
        config: PathBuf,
        /// Comma-separated `demo:sample` pairs, overriding `sweep.ratios`.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<String>>,
        #[command(flatten)]
        common: Common,
    },
    /// Component ablation (base, SFT, w/o GAL, w/o DCR, GFT).
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every method of an experiment config (single objectives or
    /// multi-stage pipelines) and emit comparison tables.
    Pipeline {
        #[arg(short, long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every objective.
    Gradcheck {
        /// Random instances per objective.
        #[arg(long, default_value_t = 50)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Flatten run and experiment bundles into one CSV.
    Report {
        /// Bundle directories.
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Re-run cells even when the manifest holds a matching entry.
    #[arg(long)]
    force: bool,
    /// Overrides `threads` from the config.
    #[arg(long)]
    threads: Option<usize>,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn load_spec(path: &Path, common: &Common) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = load_toml(path)?;
    if let Some(o) = &common.output_dir {
        spec.output_dir = Some(o.clone());
    }
    if let Some(t) = common.threads {
        spec.threads = t;
    }
    spec.validate()?;
    Ok(spec)
}

fn emit_tables(spec: &ExperimentSpec, tables: &[(&str, &Table)]) -> Result<String> {
    let mut out = String::new();
    for (name, t) in tables {
        if let Some(dir) = &spec.output_dir {
            let d = dir.join("tables");
            write_atomic(&d.join(format!("{name}.csv")), t.to_csv().as_bytes())?;
            write_atomic(&d.join(format!("{name}.md")), t.to_markdown().as_bytes())?;
            write_json(&d.join(format!("{name}.json")), t)?;
        }
        out.push_str(&t.to_markdown());
        out.push('\n');
    }
    Ok(out)
}

fn report_failures(result: &crate::experiments::ExperimentResult) -> Result<()> {
    let failed: Vec<String> = result
        .failures()
        .map(|c| format!("{}/seed{}", c.method, c.seed))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        for c in result.failures() {
            if let Some(e) = &c.error {
                eprintln!("cell {}/seed{} failed: {}", c.method, c.seed, e.message);
            }
        }
        Err(Error::Domain {
            op: "experiment",
            detail: format!("{} cell(s) failed: {}", failed.len(), failed.join(", ")),
        })
    }
}

fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::ConfigKey {
        path: PathBuf::from("<argv>"),
        key: "ratios".into(),
        detail: format!("expected `demo:sample`, got `{s}`"),
    };
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train { config, output_dir } => {
            let cfg: RunConfig = load_toml(&config)?;
            let out = output_dir.or_else(|| cfg.output_dir.clone()).ok_or_else(|| Error::ConfigKey {
                path: config.clone(),
                key: "output_dir".into(),
                detail: "required (or pass --output-dir)".into(),
            })?;
            let (manifest, report) = train_run(&cfg, &out)?;
            let mut s = format!("checkpoint {}\n", manifest.final_checkpoint_hash);
            s.push_str(&report.to_csv());
            Ok(s)
        }
        Command::Eval {
            config,
            checkpoint,
            base,
            out,
        } => {
            let cfg: RunConfig = load_toml(&config)?;
            cfg.validate()?;
            let data = seed_data(&cfg.setup, cfg.seed)?;
            let policy = load_checkpoint(&checkpoint)?;
            let base = base.map(|b| load_checkpoint(&b)).transpose()?;
            let queries: Vec<_> = data.eval.iter().map(|e| e.query.clone()).collect();
            let mut pairs: Vec<_> = data.train.iter().map(|e| (e.query.clone(), e.expert.clone())).collect();
            pairs.truncate(cfg.monitor.kl_pairs);
            let eval_cfg = EvalConfig {
                seed: derive_seed(&[cfg.eval.seed, cfg.seed, 0xE7A1]),
                ..cfg.eval.clone()
            };
            let report = evaluate(&policy, &data.task, &queries, &pairs, base.as_ref(), &eval_cfg)?;
            match out {
                Some(p) => {
                    write_json(&p, &report)?;
                    Ok(format!("wrote {}\n", p.display()))
                }
                None => Ok(report.to_csv()),
            }
        }
        Command::SweepTau { config, taus, common } => {
            let spec = load_spec(&config, &common)?;
            let taus = taus.unwrap_or_else(|| spec.sweep.taus.clone());
            let o = tau_sweep(&spec, &taus, common.force)?;
            let s = emit_tables(&spec, &[("tau_sweep", &o.table)])?;
            report_failures(&o.result)?;
            Ok(s)
        }
        Command::SweepRatio { config, ratios, common } => {
            let spec = load_spec(&config, &common)?;
            let ratios = match ratios {
                Some(r) => r.iter().map(|s| parse_ratio(s)).collect::<Result<Vec<_>>>()?,
                None => spec.sweep.ratios.clone(),
            };
            let o = ratio_sweep(&spec, &ratios, common.force)?;
            let s = emit_tables(&spec, &[("ratio_sweep", &o.table)])?;
            report_failures(&o.result)?;
            Ok(s)
        }
        Command::Ablate { config, common } => {
            let spec = load_spec(&config, &common)?;
            let o = ablation_study(&spec, common.force)?;
            let s = emit_tables(&spec, &[("ablation", &o.table)])?;
            report_failures(&o.result)?;
            Ok(s)
        }
        Command::Pipeline { config, common } => {
            let spec = load_spec(&config, &common)?;
            let (result, forgetting) = if spec.setup.side_task.is_some() && spec.monitor.kl_every > 0 {
                let f = forgetting_study(&spec, common.force)?;
                (f.result, Some((f.table, f.trajectories)))
            } else {
                (run_experiment(&spec, common.force)?, None)
            };
            let methods = result.method_table()?;
            let diversity = result.diversity_table()?;
            let mut tables = vec![("methods", &methods), ("diversity", &diversity)];
            if let Some((t, k)) = &forgetting {
                tables.push(("forgetting", t));
                tables.push(("kl_trajectories", k));
            }
            let s = emit_tables(&spec, &tables)?;
            report_failures(&result)?;
            Ok(s)
        }
        Command::Gradcheck { seeds, seed } => {
            let rows = gradcheck_suite(seeds, seed)?;
            let mut s = String::new();
            for r in &rows {
                let _ = writeln!(
                    s,
                    "{:<14} instances {:>3}  max_rel_error {:.3e}  {}",
                    r.objective,
                    r.instances,
                    r.max_rel_error,
                    if r.passed() { "PASS" } else { "FAIL" }
                );
            }
            if rows.iter().all(|r| r.passed()) {
                Ok(s)
            } else {
                print!("{s}");
                Err(Error::Domain {
                    op: "gradcheck",
                    detail: format!("relative error above {GRADCHECK_TOLERANCE:e}"),
                })
            }
        }
        Command::Report { dirs, out } => {
            let mut csv = String::from("bundle,method,seed,metric,k,tau,value\n");
            for d in &dirs {
                flatten_bundle(d, &mut csv)?;
            }
            match out {
                Some(p) => {
                    write_atomic(&p, csv.as_bytes())?;
                    Ok(format!("wrote {}\n", p.display()))
                }
                None => Ok(csv),
            }
        }
    }
}

fn push_report(csv: &mut String, bundle: &str, method: &str, seed: &str, report: &EvalReport) {
    for row in report.csv_rows() {
        let _ = writeln!(csv, "{bundle},{method},{seed},{row}");
    }
}

fn flatten_bundle(dir: &Path, csv: &mut String) -> Result<()> {
    let bundle = dir.display().to_string();
    if dir.join(TrainManifest::FILE).exists() {
        let m: TrainManifest = read_json(&dir.join(TrainManifest::FILE))?;
        let report: EvalReport = read_json(&dir.join(&m.report))?;
        let seed = m.seed.to_string();
        push_report(csv, &bundle, "run", &seed, &report);
        for (name, v) in [("side_accuracy_before", m.side_accuracy_before), ("side_accuracy_after", m.side_accuracy_after)] {
            if let Some(v) = v {
                let _ = writeln!(csv, "{bundle},run,{seed},{name},,,{v}");
            }
        }
        return Ok(());
    }
    let manifest = Manifest::load(dir)?.ok_or_else(|| Error::Config(format!("{bundle}: no manifest found")))?;
    for (key, entry) in &manifest.cells {
        if entry.status != crate::experiments::CellStatus::Ok {
            continue;
        }
        let (method, seed) = key.split_once('/').unwrap_or((key.as_str(), ""));
        let summary: CellSummary = read_json(&dir.join("cells").join(method).join(seed).join("summary.json"))?;
        let seed = seed.trim_start_matches("seed");
        push_report(csv, &bundle, method, seed, &summary.report);
        if let Some(v) = summary.side_accuracy {
            let _ = writeln!(csv, "{bundle},{method},{seed},side_accuracy,,,{v}");
        }
        let _ = writeln!(csv, "{bundle},{method},{seed},trajectories,,,{}", summary.trajectories);
    }
    Ok(())
}
