//! The SFT gradient recovered as an on-policy policy gradient with the
//! importance weight `𝕀[y = y*] / π(y)`: exact enumeration matches the direct
//! gradient, while the Monte-Carlo integrand variance explodes as the expert
//! path becomes unlikely.
//!
//! ```text
//! cargo run --release --example sft_as_policy_gradient
//! ```

use gftlab::autodiff::Tape;
use gftlab::objectives::{sft_as_rl_gradient, sft_as_rl_monte_carlo, sft_loss, SftAsRlMode};
use gftlab::policy::{Policy, Vocab};

fn sft_gradient(policy: &Policy, query: &[usize], expert: &[usize]) -> gftlab::Result<Vec<f64>> {
    let mut p = policy.clone();
    let mut tape = Tape::new();
    let loss = sft_loss(&mut tape, &p, query, expert)?;
    tape.backward(loss, p.params_mut())?;
    Ok(p.params().flat_grad())
}

/// Order-1 table in which EOS follows every context with probability `p`.
fn eos_policy(p: f64) -> gftlab::Result<Policy> {
    let mut policy = Policy::tabular(Vocab::new(&["a"])?, 1)?;
    let v = policy.vocab().size();
    let mut flat = policy.params().flatten();
    for row in 0..flat.len() / v {
        flat[row * v + Vocab::EOS] = (p * (v - 1) as f64 / (1.0 - p)).ln();
    }
    policy.params_mut().set_flat(&flat)?;
    Ok(policy)
}

fn main() -> gftlab::Result<()> {
    let vocab = Vocab::new(&["a", "b"])?;
    let policy = Policy::tabular_random(vocab, 2, 1.5, 3)?;
    let query = [3, 4];
    let expert = [4, 3, 3, Vocab::EOS];
    let exact = sft_as_rl_gradient(&policy, &query, &expert, SftAsRlMode::Exact)?;
    let direct = sft_gradient(&policy, &query, &expert)?;
    let gap = exact.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("exact enumeration vs direct SFT gradient: max |diff| = {gap:.2e}");

    let query = [3];
    let expert = [Vocab::EOS];
    println!("{:>8} {:>10} {:>8} {:>16}", "pi(y*)", "rollouts", "hits", "mean variance");
    for p in [0.5, 0.1, 0.01] {
        let policy = eos_policy(p)?;
        for rollouts in [1_000, 10_000] {
            let mc = sft_as_rl_monte_carlo(&policy, &query, &expert, rollouts, 1)?;
            println!("{p:>8} {rollouts:>10} {:>8} {:>16.4}", mc.hits, mc.mean_variance());
        }
    }
    Ok(())
}
