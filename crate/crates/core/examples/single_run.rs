//! One staged training run (an SFT warm-up followed by GFT) on a small
//! modadd setup, written as a run bundle whose final checkpoint is then
//! reloaded and verified against its recorded hash.
//!
//! ```text
//! cargo run --release --example single_run -- [output_dir]
//! ```

use std::path::PathBuf;

use gftlab::experiments::{train_run, BaseConfig, RunConfig, SetupConfig, TeacherConfig, SCHEMA_VERSION};
use gftlab::metrics::EvalConfig;
use gftlab::objectives::{ObjectiveConfig, ObjectiveKind};
use gftlab::persistence::{checkpoint_hash, load_checkpoint};
use gftlab::policy::Architecture;
use gftlab::tasks::TaskSpec;
use gftlab::trainer::{MonitorConfig, OptimizerConfig, StageConfig};

fn main() -> gftlab::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gftlab-single-run"));
    let arch = Architecture::Neural {
        embed_dim: 8,
        hidden_dim: 32,
        window: 6,
    };
    let setup = SetupConfig {
        task: TaskSpec::Modadd { modulus: 13 },
        side_task: Some(TaskSpec::Reverse { alphabet: 4, length: 3 }),
        n_train: 200,
        n_eval: 50,
        n_side_eval: 30,
        teacher: Some(TeacherConfig {
            n_queries: 400,
            steps: 400,
            ..TeacherConfig::default()
        }),
        base: BaseConfig {
            arch,
            side_queries: 100,
            side_steps: 150,
            warm_queries: 300,
            warm_steps: 200,
            ..BaseConfig::default()
        },
    };
    let mut sft = StageConfig::new("sft", ObjectiveConfig::new(ObjectiveKind::Sft), 40);
    sft.batch_queries = 16;
    sft.optimizer = OptimizerConfig::adam(1e-3);
    let mut gft = StageConfig::new("gft", ObjectiveConfig::new(ObjectiveKind::Gft), 80);
    gft.batch_queries = 2;
    gft.optimizer = OptimizerConfig::adam(1e-3);
    let cfg = RunConfig {
        schema_version: SCHEMA_VERSION,
        seed: 0,
        setup,
        stages: vec![sft, gft],
        eval: EvalConfig {
            n_samples: 32,
            ks: vec![1, 8, 32],
            ..EvalConfig::default()
        },
        monitor: MonitorConfig {
            kl_every: 10,
            ..MonitorConfig::default()
        },
        side_eval_samples: 4,
        output_dir: None,
        fixture_dir: None,
    };

    let (manifest, report) = train_run(&cfg, &out)?;
    println!("bundle written to {}", out.display());
    println!("{}", report.to_csv());
    println!(
        "side-task accuracy {:?} -> {:?}",
        manifest.side_accuracy_before, manifest.side_accuracy_after
    );
    let reloaded = load_checkpoint(&out.join("final.ckpt"))?;
    let hash = checkpoint_hash(&reloaded)?;
    assert_eq!(hash, manifest.final_checkpoint_hash);
    println!("final checkpoint {} reloads bit-exactly", &hash[..16]);
    Ok(())
}
