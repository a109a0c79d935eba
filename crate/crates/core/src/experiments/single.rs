//! A single staged training run driven by a [`RunConfig`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fixture_dir, prepare_seed, prepare_teacher, SetupConfig, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, evaluate, EvalConfig, EvalReport};
use crate::persistence::{append_record, config_hash, save_checkpoint, write_atomic, write_json};
use crate::seed::derive_seed;
use crate::tasks::make_task;
use crate::trainer::{run_pipeline, MonitorConfig, RunContext, StageConfig};

fn default_side_samples() -> usize {
    4
}

/// Configuration of one `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub setup: SetupConfig,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default = "default_side_samples")]
    pub side_eval_samples: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub fixture_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("stages must not be empty".into()));
        }
        self.setup.validate().map_err(|e| e.at("setup"))?;
        for (i, s) in self.stages.iter().enumerate() {
            s.validate().map_err(|e| e.at(&format!("stages[{i}]")))?;
        }
        self.eval.sampler().validate().map_err(|e| e.at("eval"))?;
        if self.eval.ks.iter().any(|&k| k == 0 || k > self.eval.n_samples) {
            return Err(Error::Config("every eval k must lie in [1, eval.n_samples]".into()));
        }
        Ok(())
    }
}

/// One stage checkpoint written by [`train_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCheckpoint {
    pub stage: String,
    pub path: String,
    pub hash: String,
}

/// The manifest of a training run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub base_checkpoint: StageCheckpoint,
    pub stages: Vec<StageCheckpoint>,
    pub final_checkpoint_hash: String,
    pub side_accuracy_before: Option<f64>,
    pub side_accuracy_after: Option<f64>,
    pub records: String,
    pub report: String,
}

impl TrainManifest {
    pub const FILE: &'static str = "train_manifest.json";
}

/// Trains the configured stages from the prepared base policy and writes
/// records, checkpoints, the evaluation report and a manifest to `out`.
pub fn train_run(cfg: &RunConfig, out: &Path) -> Result<(TrainManifest, EvalReport)> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let fixtures = fixture_dir(cfg.fixture_dir.as_deref(), Some(out));
    if let Some(f) = &fixtures {
        std::fs::create_dir_all(f).map_err(|e| Error::io(f, e))?;
    }
    let teacher = match &cfg.setup.teacher {
        Some(t) => Some(prepare_teacher(&make_task(cfg.setup.task)?, t, fixtures.as_deref())?),
        None => None,
    };
    let prep = prepare_seed(&cfg.setup, teacher.as_ref(), cfg.seed, fixtures.as_deref())?;
    let base_hash = save_checkpoint(&out.join("base.ckpt"), &prep.base)?;

    let mut kl_pairs = prep.train_pairs();
    kl_pairs.truncate(cfg.monitor.kl_pairs);
    let ctx = RunContext {
        task: &prep.task,
        train_queries: prep.train_queries(),
        kl_pairs: kl_pairs.clone(),
        eval_queries: prep.eval_queries(),
        monitor: cfg.monitor.clone(),
        seed: derive_seed(&[cfg.seed, 0x7EA1]),
    };
    let records = out.join("records.jsonl");
    if records.exists() {
        std::fs::remove_file(&records).map_err(|e| Error::io(&records, e))?;
    }
    let mut policy = prep.base.thaw();
    let outcome = run_pipeline(&mut policy, &ctx, &cfg.stages, &mut |r| append_record(&records, r))?;
    let mut stages = Vec::new();
    for (name, snap) in &outcome.checkpoints {
        let file = format!("stage-{name}.ckpt");
        let hash = save_checkpoint(&out.join(&file), snap)?;
        stages.push(StageCheckpoint {
            stage: name.clone(),
            path: file,
            hash,
        });
    }
    let final_hash = save_checkpoint(&out.join("final.ckpt"), &policy)?;

    let eval_cfg = EvalConfig {
        seed: derive_seed(&[cfg.eval.seed, cfg.seed, 0xE7A1]),
        ..cfg.eval.clone()
    };
    let report = evaluate(
        &policy,
        &prep.task,
        &prep.eval_queries(),
        &kl_pairs,
        Some(&prep.base),
        &eval_cfg,
    )?;
    write_json(&out.join("report.json"), &report)?;
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    let side = |p: &crate::policy::Policy| -> Result<Option<f64>> {
        match &prep.side {
            Some(s) if !prep.side_eval.is_empty() => Ok(Some(accuracy(
                p,
                s,
                &prep.side_eval,
                cfg.side_eval_samples,
                &eval_cfg.sampler(),
            )?)),
            _ => Ok(None),
        }
    };
    let manifest = TrainManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: config_hash(cfg)?,
        seed: cfg.seed,
        base_checkpoint: StageCheckpoint {
            stage: "base".into(),
            path: "base.ckpt".into(),
            hash: base_hash,
        },
        stages,
        final_checkpoint_hash: final_hash,
        side_accuracy_before: side(&prep.base)?,
        side_accuracy_after: side(&policy)?,
        records: "records.jsonl".into(),
        report: "report.json".into(),
    };
    write_json(&out.join(TrainManifest::FILE), &manifest)?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{ObjectiveConfig, ObjectiveKind};
    use crate::persistence::{load_checkpoint, read_records};
    use crate::trainer::RunRecord;

    fn tiny() -> RunConfig {
        let spec = crate::experiments::tests::tiny_spec(vec![]);
        let mut s1 = StageConfig::new("sft", ObjectiveConfig::new(ObjectiveKind::Sft), 3);
        s1.batch_queries = 4;
        let mut s2 = StageConfig::new("gft", ObjectiveConfig::new(ObjectiveKind::Gft), 3);
        s2.batch_queries = 2;
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 3,
            setup: spec.setup,
            stages: vec![s1, s2],
            eval: EvalConfig {
                n_samples: 4,
                ..EvalConfig::default()
            },
            monitor: MonitorConfig {
                kl_every: 1,
                ..MonitorConfig::default()
            },
            side_eval_samples: 2,
            output_dir: None,
            fixture_dir: None,
        }
    }

    #[test]
    fn run_writes_bundle_and_is_deterministic() {
        let cfg = tiny();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (ma, ra) = train_run(&cfg, a.path()).unwrap();
        let (mb, rb) = train_run(&cfg, b.path()).unwrap();
        assert_eq!(ma.final_checkpoint_hash, mb.final_checkpoint_hash);
        assert_eq!(ra, rb);
        assert_eq!(ma.stages.len(), 2);
        let records: Vec<RunRecord> = read_records(&a.path().join("records.jsonl")).unwrap();
        assert_eq!(records.len(), 6);
        assert_eq!(records[0].kl_to_base, Some(0.0));
        let p = load_checkpoint(&a.path().join("final.ckpt")).unwrap();
        assert_eq!(crate::persistence::checkpoint_hash(&p).unwrap(), ma.final_checkpoint_hash);
        let (mc, _) = train_run(&cfg, a.path()).unwrap();
        assert_eq!(mc.final_checkpoint_hash, ma.final_checkpoint_hash);
    }

    #[test]
    fn schema_version_is_checked() {
        let mut cfg = tiny();
        cfg.schema_version = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
