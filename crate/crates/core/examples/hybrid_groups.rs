//! Builds hybrid response groups on modadd from an expert demonstration and
//! on-policy samples, standardizes their rewards into advantages and shows
//! the per-token coefficients the rectifier assigns.
//!
//! ```text
//! cargo run --release --example hybrid_groups
//! ```

use gftlab::autodiff::Tape;
use gftlab::objectives::{batch_loss, DcrSemantics, ObjectiveConfig, ObjectiveKind};
use gftlab::policy::{Architecture, Policy, SamplerConfig};
use gftlab::tasks::{build_group, make_task, GroupCompositionConfig, TaskSpec};

fn main() -> gftlab::Result<()> {
    let task = make_task(TaskSpec::Modadd { modulus: 7 })?;
    let policy = Policy::neural(task.vocab().clone(), Architecture::neural_default(), 0)?;
    let composition = GroupCompositionConfig::new(1, 0, 5);
    let sampler = SamplerConfig::train(0);
    let mut groups = Vec::new();
    for i in 0..2 {
        let query = task.sample_query(i);
        groups.push(build_group(&task, &query, &policy, &composition, &sampler, i)?);
    }
    for g in &mut groups {
        println!("query {}", task.vocab().render(&g.query));
        let cfg = ObjectiveConfig::new(ObjectiveKind::Gft);
        let adv = g.compute_advantages(&cfg.advantage).to_vec();
        for ((r, reward), a) in g.responses.iter().zip(&g.rewards).zip(&adv) {
            println!(
                "  {:<13} reward {reward:.0} advantage {a:>7.3}  {}",
                format!("{:?}", r.source),
                task.vocab().render(&r.tokens)
            );
        }
    }
    for semantics in [DcrSemantics::LossForm, DcrSemantics::GradForm] {
        let mut cfg = ObjectiveConfig::new(ObjectiveKind::Gft);
        cfg.rectifier.semantics = semantics;
        let mut tape = Tape::new();
        let bl = batch_loss(&mut tape, &policy, &groups, &cfg)?;
        let below = bl.token_probs.iter().filter(|&&p| p < cfg.rectifier.tau).count();
        let largest = bl.coefficients.iter().map(|c| c.abs()).fold(0.0, f64::max);
        println!(
            "{semantics:?}: loss {:.4}, {below}/{} tokens below tau {}, largest |coefficient| {largest:.3}",
            tape.scalar(bl.loss)?,
            bl.token_probs.len(),
            cfg.rectifier.tau
        );
    }
    Ok(())
}
