//! Study designs built on [`run_experiment`]: method comparison, ablation,
//! diversity, forgetting, group-ratio and threshold sweeps.

use serde::Serialize;

use super::{mean_std, run_experiment, ExperimentResult, ExperimentSpec, MethodSpec, Table};
use crate::error::{Error, Result};
use crate::objectives::{ObjectiveConfig, ObjectiveKind};
use crate::tasks::GroupCompositionConfig;

/// `(N_demo, N_sample)` grid of the group-ratio sweep.
pub const DEFAULT_RATIOS: [(usize, usize); 5] = [(8, 0), (6, 2), (4, 4), (2, 6), (0, 8)];

/// Threshold grid of the τ sweep.
pub const DEFAULT_TAUS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Default rectification threshold.
pub const RECOMMENDED_TAU: f64 = 0.7;

fn stats_columns(result: &ExperimentResult) -> (Vec<usize>, bool) {
    let ks = result
        .cells
        .iter()
        .find_map(|c| c.summary.as_ref())
        .map(|s| s.report.pass_at_k.keys().copied().collect())
        .unwrap_or_default();
    let side = result
        .bases
        .iter()
        .any(|b| b.summary.as_ref().is_some_and(|s| s.side_accuracy.is_some()));
    (ks, side)
}

fn values(v: &[(u64, f64)]) -> Vec<f64> {
    v.iter().map(|&(_, x)| x).collect()
}

fn annotate(table: &mut Table, result: &ExperimentResult) {
    table.meta("experiment", &result.name);
    table.meta("n_eval_queries", result.n_eval_queries);
    table.meta("n_eval_samples", result.n_eval_samples);
    if let Some(a) = result.teacher_accuracy {
        table.meta("teacher_accuracy", a);
    }
}

impl ExperimentResult {
    /// One row per method (plus the base): accuracy, pass@k, entropy, KL
    /// and side-task retention, each a mean over successful seeds.
    pub fn method_table(&self) -> Result<Table> {
        let (ks, side) = stats_columns(self);
        let mut cols: Vec<String> = vec!["n_seeds".into(), "accuracy".into(), "accuracy_std".into()];
        cols.extend(ks.iter().map(|k| format!("pass@{k}")));
        cols.extend(["mean_entropy".into(), "kl_to_base".into()]);
        if side {
            cols.extend(["side_accuracy".into(), "side_drop".into()]);
        }
        cols.push("trajectories".into());
        let mut table = Table::new(format!("{}: method comparison", self.name), cols);
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        let base_row = |get: &dyn Fn(&super::CellSummary) -> Option<f64>| values(&self.base_per_seed(get));
        let mut labels = vec!["base".to_string()];
        labels.extend(self.methods());
        for label in labels {
            let get = |f: &dyn Fn(&super::CellSummary) -> Option<f64>| {
                if label == "base" {
                    base_row(f)
                } else {
                    values(&self.per_seed(&label, f))
                }
            };
            let acc = get(&|s| Some(s.report.accuracy));
            if acc.is_empty() {
                continue;
            }
            let (am, asd) = mean_std(&acc);
            let mut row = vec![acc.len() as f64, am, asd];
            for k in &ks {
                row.push(mean_std(&get(&|s| s.report.pass_at_k.get(k).copied())).0);
            }
            row.push(mean_std(&get(&|s| Some(s.report.mean_entropy))).0);
            row.push(mean_std(&get(&|s| s.report.kl_to_base)).0);
            if side {
                row.push(mean_std(&get(&|s| s.side_accuracy)).0);
                let drop = if label == "base" {
                    vec![0.0]
                } else {
                    values(&self.side_drop(&label))
                };
                row.push(mean_std(&drop).0);
            }
            row.push(mean_std(&get(&|s| Some(s.trajectories as f64))).0);
            rows.push((label, row));
        }
        for (l, r) in rows {
            table.push(l, r)?;
        }
        annotate(&mut table, self);
        Ok(table)
    }

    /// pass@k for every k and method.
    pub fn diversity_table(&self) -> Result<Table> {
        let (ks, _) = stats_columns(self);
        let mut cols: Vec<String> = vec!["n_seeds".into()];
        cols.extend(ks.iter().map(|k| format!("pass@{k}")));
        let mut table = Table::new(format!("{}: pass@k", self.name), cols);
        for label in self.methods() {
            let n = self.per_seed(&label, |s| Some(s.report.accuracy)).len();
            if n == 0 {
                continue;
            }
            let mut row = vec![n as f64];
            for k in &ks {
                row.push(mean_std(&values(&self.per_seed(&label, |s| s.report.pass_at_k.get(k).copied()))).0);
            }
            table.push(label, row)?;
        }
        annotate(&mut table, self);
        Ok(table)
    }

    /// Final KL-to-base and side-task accuracy before and after training,
    /// methods sorted by increasing KL.
    pub fn forgetting_table(&self) -> Result<Table> {
        let cols = ["n_seeds", "kl_to_base", "side_before", "side_after", "side_drop", "accuracy"];
        let mut table = Table::new(
            format!("{}: forgetting", self.name),
            cols.iter().map(|c| c.to_string()).collect(),
        );
        let before = mean_std(&values(&self.base_per_seed(|s| s.side_accuracy))).0;
        let mut rows = Vec::new();
        for label in self.methods() {
            let kl = values(&self.per_seed(&label, |s| s.report.kl_to_base));
            if kl.is_empty() {
                continue;
            }
            let after = mean_std(&values(&self.per_seed(&label, |s| s.side_accuracy))).0;
            let drop = mean_std(&values(&self.side_drop(&label))).0;
            let acc = mean_std(&values(&self.per_seed(&label, |s| Some(s.report.accuracy)))).0;
            rows.push((label, vec![kl.len() as f64, mean_std(&kl).0, before, after, drop, acc]));
        }
        rows.sort_by(|a, b| a.1[1].total_cmp(&b.1[1]));
        for (l, r) in rows {
            table.push(l, r)?;
        }
        annotate(&mut table, self);
        Ok(table)
    }

    /// Mean KL-to-base per method at every monitored step.
    pub fn kl_trajectories(&self) -> Result<Table> {
        let steps: Vec<usize> = self
            .cells
            .iter()
            .find(|c| !c.records.is_empty())
            .map(|c| c.records.iter().filter(|r| r.kl_to_base.is_some()).map(|r| r.step).collect())
            .unwrap_or_default();
        let mut table = Table::new(
            format!("{}: KL-to-base trajectory", self.name),
            steps.iter().map(|s| format!("step{s}")).collect(),
        );
        for label in self.methods() {
            let runs: Vec<_> = self.cells.iter().filter(|c| c.method == label && !c.records.is_empty()).collect();
            if runs.is_empty() {
                continue;
            }
            let row = steps
                .iter()
                .map(|&s| {
                    let v: Vec<f64> = runs
                        .iter()
                        .filter_map(|c| c.records.iter().find(|r| r.step == s)?.kl_to_base)
                        .collect();
                    mean_std(&v).0
                })
                .collect();
            table.push(label, row)?;
        }
        table.meta("n_seeds", self.bases.len());
        Ok(table)
    }
}

/// Ablation run with its summary table.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub result: ExperimentResult,
    pub table: Table,
}

fn label_of(spec: &ExperimentSpec, kind: ObjectiveKind) -> Result<String> {
    spec.methods
        .iter()
        .find(|m| m.single_kind() == Some(kind))
        .map(|m| m.label.clone())
        .ok_or_else(|| Error::Config(format!("ablation requires a single-stage `{}` method", kind.label())))
}

/// Base, both components removed (plain SFT), each component removed, and
/// the full objective.
pub fn ablation_study(spec: &ExperimentSpec, force: bool) -> Result<AblationOutcome> {
    let rows = [
        ("w/o GAL+DCR", ObjectiveKind::Sft),
        ("w/o GAL", ObjectiveKind::GftNoGal),
        ("w/o DCR", ObjectiveKind::GftNoDcr),
        ("GFT", ObjectiveKind::Gft),
    ];
    let labels = rows
        .iter()
        .map(|&(_, k)| label_of(spec, k))
        .collect::<Result<Vec<_>>>()?;
    let result = run_experiment(spec, force)?;
    let mut table = Table::new(
        format!("{}: ablation", spec.name),
        vec!["n_seeds".into(), "accuracy".into(), "accuracy_std".into()],
    );
    let base = values(&result.base_per_seed(|s| Some(s.report.accuracy)));
    let (m, sd) = mean_std(&base);
    table.push("base", vec![base.len() as f64, m, sd])?;
    for ((row, _), label) in rows.iter().zip(&labels) {
        let acc = values(&result.per_seed(label, |s| Some(s.report.accuracy)));
        let (m, sd) = mean_std(&acc);
        table.push(*row, vec![acc.len() as f64, m, sd])?;
    }
    annotate(&mut table, &result);
    Ok(AblationOutcome { result, table })
}

/// Forgetting run with its summary and trajectory tables.
#[derive(Debug, Clone)]
pub struct ForgettingOutcome {
    pub result: ExperimentResult,
    pub table: Table,
    pub trajectories: Table,
}

/// Trains every method from a base pre-fit on the side task and reports
/// KL-to-base and side-task retention.
pub fn forgetting_study(spec: &ExperimentSpec, force: bool) -> Result<ForgettingOutcome> {
    if spec.setup.side_task.is_none() {
        return Err(Error::Config("forgetting study requires setup.side_task".into()));
    }
    if spec.setup.base.side_steps == 0 {
        return Err(Error::Config("forgetting study requires setup.base.side_steps > 0".into()));
    }
    if spec.monitor.kl_every == 0 {
        return Err(Error::Config("forgetting study requires monitor.kl_every > 0".into()));
    }
    let result = run_experiment(spec, force)?;
    let table = result.forgetting_table()?;
    let trajectories = result.kl_trajectories()?;
    Ok(ForgettingOutcome {
        result,
        table,
        trajectories,
    })
}

/// A sweep run with its summary table.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub result: ExperimentResult,
    pub table: Table,
}

/// Group composition for an `N_demo : N_sample` ratio: one expert whenever
/// there is any demonstration slot, the remaining demonstration slots to the
/// teacher, and `N_sample` self-generated members.
pub fn ratio_composition(n_demo: usize, n_sample: usize) -> GroupCompositionConfig {
    let n_expert = n_demo.min(1);
    GroupCompositionConfig::new(n_expert, n_demo - n_expert, n_sample)
}

fn ratio_label(d: usize, s: usize) -> String {
    format!("ratio-{d}-{s}")
}

/// One GFT method per `(N_demo, N_sample)` ratio.
pub fn ratio_sweep(spec: &ExperimentSpec, ratios: &[(usize, usize)], force: bool) -> Result<SweepOutcome> {
    if ratios.is_empty() {
        return Err(Error::Config("ratio list must not be empty".into()));
    }
    let gft = spec
        .methods
        .iter()
        .find(|m| m.single_kind() == Some(ObjectiveKind::Gft))
        .map(|m| m.stages[0].objective)
        .unwrap_or_else(|| ObjectiveConfig::new(ObjectiveKind::Gft));
    let mut s = spec.clone();
    s.methods = ratios
        .iter()
        .map(|&(d, n)| MethodSpec::from_objective(ratio_label(d, n), gft).with_group(ratio_composition(d, n)))
        .collect();
    let result = run_experiment(&s, force)?;
    let (ks, _) = stats_columns(&result);
    let mut cols: Vec<String> = ["n_demo", "n_sample", "n_expert", "n_teacher", "n_self", "n_seeds", "accuracy", "accuracy_std"]
        .iter()
        .map(|c| c.to_string())
        .collect();
    cols.extend(ks.iter().map(|k| format!("pass@{k}")));
    let mut table = Table::new(format!("{}: group ratio sweep", spec.name), cols);
    for &(d, n) in ratios {
        let label = ratio_label(d, n);
        let g = ratio_composition(d, n);
        let acc = values(&result.per_seed(&label, |c| Some(c.report.accuracy)));
        let (m, sd) = mean_std(&acc);
        let mut row = vec![
            d as f64,
            n as f64,
            g.n_expert as f64,
            g.n_teacher as f64,
            g.n_self as f64,
            acc.len() as f64,
            m,
            sd,
        ];
        for k in &ks {
            row.push(mean_std(&values(&result.per_seed(&label, |c| c.report.pass_at_k.get(k).copied()))).0);
        }
        table.push(format!("{d}:{n}"), row)?;
    }
    table.meta("composition_rule", "n_expert = min(1, n_demo), n_teacher = n_demo - n_expert");
    annotate(&mut table, &result);
    Ok(SweepOutcome { result, table })
}

fn tau_label(tau: f64) -> String {
    format!("tau-{tau}")
}

#[derive(Serialize)]
struct Shape {
    best_tau: f64,
    interior_peak: bool,
}

/// One GFT method per threshold. The `rectified_fraction` column is measured
/// on each seed's base policy over the teacher-forced training pairs, so it
/// is a property of τ alone; `train_rectified_fraction` is the mean over the
/// run's own steps.
pub fn tau_sweep(spec: &ExperimentSpec, taus: &[f64], force: bool) -> Result<SweepOutcome> {
    if taus.is_empty() {
        return Err(Error::Config("tau list must not be empty".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(Error::Config(format!("tau must lie in (0, 1], got {t}")));
    }
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let gft = spec
        .methods
        .iter()
        .find(|m| m.single_kind() == Some(ObjectiveKind::Gft))
        .cloned()
        .unwrap_or_else(|| MethodSpec::single(ObjectiveKind::Gft));
    let mut s = spec.clone();
    s.eval.taus = sorted.clone();
    s.methods = sorted
        .iter()
        .map(|&t| {
            let mut m = gft.clone();
            m.label = tau_label(t);
            for st in &mut m.stages {
                st.objective = st.objective.with_tau(t);
            }
            m
        })
        .collect();
    let result = run_experiment(&s, force)?;
    let cols = [
        "tau",
        "n_seeds",
        "accuracy",
        "accuracy_std",
        "rectified_fraction",
        "train_rectified_fraction",
        "final_rectified_fraction",
    ];
    let mut table = Table::new(
        format!("{}: tau sweep", spec.name),
        cols.iter().map(|c| c.to_string()).collect(),
    );
    let mut reference = Vec::new();
    for (ti, &t) in sorted.iter().enumerate() {
        let label = tau_label(t);
        let acc = values(&result.per_seed(&label, |c| Some(c.report.accuracy)));
        let (m, sd) = mean_std(&acc);
        let ref_frac = mean_std(&values(&result.base_per_seed(|b| b.report.rectified_fraction.get(ti).map(|p| p.1)))).0;
        let train: Vec<f64> = result
            .cells
            .iter()
            .filter(|c| c.method == label && !c.records.is_empty())
            .map(|c| c.records.iter().map(|r| r.rectified_fraction).sum::<f64>() / c.records.len() as f64)
            .collect();
        let fin = values(&result.per_seed(&label, |c| c.report.rectified_fraction.get(ti).map(|p| p.1)));
        reference.push(ref_frac);
        table.push(
            format!("{t}"),
            vec![t, acc.len() as f64, m, sd, ref_frac, mean_std(&train).0, mean_std(&fin).0],
        )?;
    }
    if reference.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain {
            op: "tau_sweep",
            detail: format!("rectified fraction not monotone in tau: {reference:?}"),
        });
    }
    let accs: Vec<f64> = table.rows.iter().map(|r| r.values[2]).collect();
    let best = accs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i);
    table.meta("recommended_tau", RECOMMENDED_TAU);
    table.meta(
        "accuracy_shape",
        Shape {
            best_tau: sorted[best],
            interior_peak: best > 0 && best + 1 < sorted.len(),
        },
    );
    annotate(&mut table, &result);
    Ok(SweepOutcome { result, table })
}
