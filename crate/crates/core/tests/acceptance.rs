//! Acceptance suite. Every criterion is checked against an oracle written
//! here, independently of the library's own helpers, and reported as one
//! PASS/FAIL line. The process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use gftlab::autodiff::{Tape, FD_STEP};
use gftlab::experiments::{run_experiment, train_run, CellSummary, ExperimentResult, ExperimentSpec, RunConfig};
use gftlab::experiments::{BaseConfig, SetupConfig, TeacherConfig, SCHEMA_VERSION};
use gftlab::metrics::{pass_at_k, rectified_fraction, EvalConfig};
use gftlab::objectives::{
    batch_loss, gft_loss, gradcheck_objectives, grpo_loss, group_advantages, policy_gradient_loss, random_instance,
    sft_as_rl_gradient, sft_as_rl_monte_carlo, sft_loss, AdvantageConfig, DcrSemantics, ObjectiveConfig, ObjectiveKind,
    RectifierConfig, SftAsRlMode, SingleMemberMode,
};
use gftlab::persistence::read_records;
use gftlab::policy::{Architecture, Policy, Response, Source, TokenId, Vocab};
use gftlab::tasks::{ResponseGroup, TaskSpec};
use gftlab::trainer::{MonitorConfig, OptimizerConfig, RunRecord, StageConfig};
use gftlab::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradient(policy: &Policy, build: impl Fn(&mut Tape, &Policy) -> gftlab::Result<gftlab::autodiff::Var>) -> (f64, Vec<f64>) {
    let mut p = policy.clone();
    p.params_mut().zero_grad();
    let mut tape = Tape::new();
    let root = build(&mut tape, &p).unwrap();
    let loss = tape.scalar(root).unwrap();
    tape.backward(root, p.params_mut()).unwrap();
    (loss, p.params().flat_grad())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn standardize(rewards: &[f64]) -> Vec<f64> {
    let k = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / k;
    let sd = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k).sqrt();
    rewards.iter().map(|r| (r - mean) / (sd + 1e-6)).collect()
}

/// Central differences with the stop-gradient values frozen at the
/// unperturbed point; returns the worst relative error.
fn fd_relative_error(policy: &Policy, groups: &[ResponseGroup], cfg: &ObjectiveConfig) -> f64 {
    let mut p = policy.clone();
    p.params_mut().zero_grad();
    let mut tape = Tape::new();
    let root = batch_loss(&mut tape, &p, groups, cfg).unwrap().loss;
    let loss = tape.scalar(root).unwrap();
    tape.backward(root, p.params_mut()).unwrap();
    let analytic = p.params().flat_grad();
    let frozen = tape.detached_log().to_vec();
    let x0 = policy.params().flatten();
    let eval = |x: &[f64]| {
        let mut params = policy.params().clone();
        params.set_flat(x).unwrap();
        let q = Policy::from_parts(policy.vocab().clone(), policy.arch(), params).unwrap();
        let mut t = Tape::replaying(frozen.clone());
        let r = batch_loss(&mut t, &q, groups, cfg).unwrap().loss;
        t.scalar(r).unwrap()
    };
    let floor = (1e8 * f64::EPSILON * loss.abs().max(1.0) / FD_STEP).max(1e-12);
    let mut worst: f64 = 0.0;
    for j in 0..x0.len() {
        let mut x = x0.clone();
        x[j] = x0[j] + FD_STEP;
        let plus = eval(&x);
        x[j] = x0[j] - FD_STEP;
        let minus = eval(&x);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max((analytic[j] - numeric).abs() / (numeric.abs() + floor));
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut lines = Vec::new();
    for (oi, (label, base)) in gradcheck_objectives().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..50u64 {
            let seed = 10_000 * (oi as u64 + 1) + i;
            let (policy, groups) = random_instance(base.kind, seed).unwrap();
            let tau = ChaCha8Rng::seed_from_u64(seed).random_range(0.2..0.95);
            worst = worst.max(fd_relative_error(&policy, &groups, &base.with_tau(tau)));
        }
        ensure(worst < 1e-6, || format!("{label}: max relative error {worst:.3e}"))?;
        lines.push(format!("{label} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{} in {secs:.2}s", lines.join(", ")))
}

/// Every response of total length 1..=4 over `content` plus EOS.
fn response_grid(content: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![]];
    for len in 1..=4 {
        for p in &prefixes {
            let mut y = p.clone();
            y.push(Vocab::EOS);
            out.push(y);
        }
        let mut next = Vec::new();
        for p in &prefixes {
            for &c in content {
                let mut y = p.clone();
                y.push(c);
                next.push(y);
            }
        }
        prefixes = next;
        if len == 4 {
            out.extend(prefixes.iter().cloned());
        }
    }
    out
}

/// Tabular order-1 policy whose first response token is EOS with probability `p`.
fn eos_policy(p: f64) -> Policy {
    let vocab = Vocab::new(&["a"]).unwrap();
    let mut policy = Policy::tabular(vocab, 1).unwrap();
    let v = policy.vocab().size();
    let b = (p * (v - 1) as f64 / (1.0 - p)).ln();
    let mut flat = policy.params().flatten();
    for row in 0..flat.len() / v {
        flat[row * v + Vocab::EOS] = b;
    }
    policy.params_mut().set_flat(&flat).unwrap();
    policy
}

fn criterion_2() -> Outcome {
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for n_sym in 1..=3usize {
        let symbols = ["a", "b", "c"];
        let vocab = Vocab::new(&symbols[..n_sym]).unwrap();
        let first = vocab.size() - n_sym;
        let content: Vec<TokenId> = (first..first + n_sym).collect();
        for order in 1..=2 {
            let policy = Policy::tabular_random(vocab.clone(), order, 1.5, 31 * n_sym as u64 + order as u64).unwrap();
            let query = vec![content[0]];
            for y in response_grid(&content) {
                let exact = sft_as_rl_gradient(&policy, &query, &y, SftAsRlMode::Exact).unwrap();
                let (_, direct) = gradient(&policy, |t, p| sft_loss(t, p, &query, &y));
                worst = worst.max(max_abs_diff(&exact, &direct));
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-10, || format!("exact vs SFT gradient differs by {worst:.3e}"))?;

    let query = [3];
    let expert = [Vocab::EOS];
    let half = eos_policy(0.5);
    let (_, direct) = gradient(&half, |t, p| sft_loss(t, p, &query, &expert));
    let scale = direct.iter().map(|g| g.abs()).fold(0.0, f64::max);
    let mut small_err = 0.0;
    let mut large_err = 0.0;
    for seed in 0..5 {
        let few = sft_as_rl_monte_carlo(&half, &query, &expert, 100, seed).unwrap();
        let many = sft_as_rl_monte_carlo(&half, &query, &expert, 100_000, seed).unwrap();
        small_err += max_abs_diff(&few.mean, &direct) / 5.0;
        large_err += max_abs_diff(&many.mean, &direct) / 5.0;
    }
    ensure(large_err < 0.02 * scale && large_err < small_err, || {
        format!("Monte Carlo error {large_err:.3e} at 1e5 rollouts vs {small_err:.3e} at 100 (scale {scale:.3e})")
    })?;

    let rare = eos_policy(0.01);
    for (pol, target) in [(&rare, 0.01), (&half, 0.5)] {
        let pi = pol.sequence_logprob(&query, &expert).unwrap().exp();
        ensure((pi - target).abs() < 1e-9, || format!("constructed π(y*) = {pi}, wanted {target}"))?;
    }
    let mut ratios = Vec::new();
    for seed in 0..5 {
        let lo = sft_as_rl_monte_carlo(&rare, &query, &expert, 4000, seed).unwrap().mean_variance();
        let hi = sft_as_rl_monte_carlo(&half, &query, &expert, 4000, seed).unwrap().mean_variance();
        ensure(lo > hi, || format!("seed {seed}: variance {lo:.3e} at π=0.01 vs {hi:.3e} at π=0.5"))?;
        ratios.push(lo / hi);
    }
    let min_ratio = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(format!(
        "{checked} grid instances, max |Δ| {worst:.1e}; MC error {large_err:.1e}; variance ratio >= {min_ratio:.1}"
    ))
}

fn self_group(rng: &mut ChaCha8Rng, content: &[TokenId], k: usize) -> ResponseGroup {
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<TokenId> {
        (0..len).map(|_| content[rng.random_range(0..content.len())]).collect()
    };
    let query = pick(2, rng);
    let responses = (0..k)
        .map(|_| {
            let len = rng.random_range(1..=3);
            let mut tokens = pick(len, rng);
            tokens.push(Vocab::EOS);
            Response {
                tokens,
                source: Source::SelfGenerated,
                logprob: None,
                truncated: false,
            }
        })
        .collect();
    let rewards = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    ResponseGroup {
        query,
        responses,
        rewards,
        advantages: None,
    }
}

fn criterion_3() -> Outcome {
    let adv = AdvantageConfig::default();
    let tiny_tau = RectifierConfig {
        tau: f64::MIN_POSITIVE,
        semantics: DcrSemantics::LossForm,
    };
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0);
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(&["a", "b", "c"]).unwrap();
        let first = vocab.size() - 3;
        let content: Vec<TokenId> = (first..first + 3).collect();
        let policy = Policy::tabular_random(vocab, 1 + (seed as usize % 2), 1.5, seed).unwrap();
        let k = rng.random_range(2..=6);
        let group = self_group(&mut rng, &content, k);

        let (l_gft, g_gft) = gradient(&policy, |t, p| gft_loss(t, p, &group, &adv, &tiny_tau));
        let (l_grpo, g_grpo) = gradient(&policy, |t, p| grpo_loss(t, p, &group, &adv));
        let weights = standardize(&group.rewards);
        let tokens: Vec<Vec<TokenId>> = group.responses.iter().map(|r| r.tokens.clone()).collect();
        let (l_pg, g_pg) = gradient(&policy, |t, p| policy_gradient_loss(t, p, &group.query, &tokens, &weights));
        ensure(close(l_gft, l_grpo) && close(l_grpo, l_pg), || {
            format!("seed {seed}: losses {l_gft} / {l_grpo} / {l_pg}")
        })?;
        let d = max_abs_diff(&g_gft, &g_grpo).max(max_abs_diff(&g_grpo, &g_pg));
        ensure(d <= 1e-12, || format!("seed {seed}: gradients differ by {d:.3e}"))?;
        worst = worst.max(d);

        let expert = group.responses[0].tokens.clone();
        let single = ResponseGroup {
            query: group.query.clone(),
            responses: vec![Response::expert(expert.clone())],
            rewards: vec![1.0],
            advantages: None,
        };
        let raw = AdvantageConfig {
            single_member_mode: SingleMemberMode::RawReward,
            ..adv
        };
        let (l_single, g_single) = gradient(&policy, |t, p| gft_loss(t, p, &single, &raw, &tiny_tau));
        let (l_sft, g_sft) = gradient(&policy, |t, p| sft_loss(t, p, &group.query, &expert));
        ensure(close(l_single, l_sft), || format!("seed {seed}: singleton {l_single} vs sft {l_sft}"))?;
        let d = max_abs_diff(&g_single, &g_sft);
        ensure(d <= 1e-12, || format!("seed {seed}: singleton gradient differs by {d:.3e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("50 instances, max gradient |Δ| {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut tokens = 0usize;
    let mut w_range = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..200u64 {
        let (policy, groups) = random_instance(ObjectiveKind::Gft, 777 + seed).unwrap();
        let tau = ChaCha8Rng::seed_from_u64(seed).random_range(0.05..1.0);
        let scale = 1.0 / groups.len() as f64;
        let adv: Vec<f64> = groups.iter().flat_map(|g| standardize(&g.rewards)).collect();
        for sem in [DcrSemantics::LossForm, DcrSemantics::GradForm] {
            let mut cfg = ObjectiveConfig::new(ObjectiveKind::Gft).with_tau(tau);
            cfg.rectifier.semantics = sem;
            let mut p = policy.clone();
            let mut tape = Tape::new();
            let bl = batch_loss(&mut tape, &p, &groups, &cfg).unwrap();
            tape.backward(bl.loss, p.params_mut()).unwrap();
            let dlogp = tape.grad(bl.forced.token_logprobs).to_vec();
            for (span, &a) in bl.forced.spans.iter().zip(&adv) {
                for t in span.clone() {
                    let coef = -dlogp[t];
                    let pi = bl.token_probs[t];
                    match sem {
                        DcrSemantics::LossForm => {
                            ensure(coef.abs() <= a.abs() * scale * (1.0 + 1e-12), || {
                                format!("seed {seed}: LossForm coefficient {coef} exceeds |A| {}", a.abs() * scale)
                            })?;
                            tokens += 1;
                        }
                        DcrSemantics::GradForm if a.abs() > 1e-9 => {
                            let w = coef / (a * scale);
                            ensure(w >= 1.0 - 1e-12 && w <= 1.0 / tau + 1e-12, || {
                                format!("seed {seed}: GradForm weight {w} outside [1, {}] at π={pi}", 1.0 / tau)
                            })?;
                            w_range = (w_range.0.min(w), w_range.1.max(w));
                        }
                        DcrSemantics::GradForm => {}
                    }
                }
            }
        }
    }

    let taus: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
    for seed in 0..20u64 {
        let (policy, groups) = random_instance(ObjectiveKind::Gft, 5000 + seed).unwrap();
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = groups
            .iter()
            .flat_map(|g| g.responses.iter().map(|r| (g.query.clone(), r.tokens.clone())))
            .collect();
        let f = rectified_fraction(&policy, &pairs, &taus).unwrap();
        ensure(f.windows(2).all(|w| w[0] <= w[1]), || format!("seed {seed}: rectified fraction {f:?} not monotone"))?;
    }
    Ok(format!(
        "{tokens} LossForm tokens bounded; GradForm weights in [{:.3}, {:.3}]; rectified fraction monotone",
        w_range.0, w_range.1
    ))
}

fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

fn criterion_5() -> Outcome {
    let cfg = AdvantageConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..500 {
        let k = rng.random_range(2..=16);
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = group_advantages(&r, &cfg);
        let sum: f64 = a.iter().sum();
        ensure(sum.abs() <= 1e-12 * k as f64, || format!("case {case}: ΣA = {sum:e}"))?;
        let oracle = standardize(&r);
        ensure(max_abs_diff(&a, &oracle) <= 1e-12, || format!("case {case}: advantages disagree with oracle"))?;

        let c = rng.random_range(-5.0..5.0);
        let shifted = group_advantages(&r.iter().map(|x| x + c).collect::<Vec<_>>(), &cfg);
        ensure(max_abs_diff(&a, &shifted) <= 1e-9, || format!("case {case}: shift by {c} changed advantages"))?;
        let dyadic: Vec<f64> = (0..8).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
        let base = group_advantages(&dyadic, &cfg);
        let moved = group_advantages(&dyadic.iter().map(|x| x + 3.0).collect::<Vec<_>>(), &cfg);
        ensure(base == moved, || format!("case {case}: dyadic shift is not exact"))?;

        let s = rng.random_range(0.01..100.0);
        let scaled = group_advantages(&r.iter().map(|x| x * s).collect::<Vec<_>>(), &cfg);
        for i in 0..k {
            for j in 0..k {
                ensure(r[i].partial_cmp(&r[j]) == scaled[i].partial_cmp(&scaled[j]), || {
                    format!("case {case}: scaling by {s} changed the ranking")
                })?;
            }
        }
    }

    let mut compared = 0;
    for n in 1..=10usize {
        for c in 0..=n {
            for k in 1..=n {
                let mut hit = 0u64;
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() as usize == k && mask & ((1u32 << c) - 1) != 0 {
                        hit += 1;
                    }
                }
                let oracle = hit as f64 / binomial(n, k) as f64;
                let got = pass_at_k(n, c, k).unwrap();
                ensure((got - oracle).abs() <= 1e-12, || format!("pass@{k} n={n} c={c}: {got} vs {oracle}"))?;
                compared += 1;
            }
        }
    }
    let v = pass_at_k(8, 4, 2).unwrap();
    ensure((v - 11.0 / 14.0).abs() <= 1e-15, || format!("pass_at_k(8,4,2) = {v}"))?;
    Ok(format!("500 random groups; {compared} pass@k cases match subset enumeration"))
}

fn desk() -> &'static ExperimentResult {
    use std::sync::OnceLock;
    static RESULT: OnceLock<ExperimentResult> = OnceLock::new();
    RESULT.get_or_init(|| {
        let mut spec = ExperimentSpec::desk("acceptance", ExperimentSpec::standard_methods());
        spec.threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        let start = Instant::now();
        let result = run_experiment(&spec, false).expect("desk experiment runs");
        println!("desk experiment: {:.0}s", start.elapsed().as_secs_f64());
        result
    })
}

fn accuracy(c: &CellSummary) -> Option<f64> {
    Some(c.report.accuracy)
}

fn mean_of(result: &ExperimentResult, method: &str, f: impl Fn(&CellSummary) -> Option<f64>) -> Result<f64, String> {
    let v = result.per_seed(method, f);
    ensure(v.len() == 5, || format!("{method}: only {} of 5 seeds succeeded", v.len()))?;
    Ok(v.iter().map(|(_, x)| x).sum::<f64>() / v.len() as f64)
}

fn wins(pairs: &[(u64, f64, f64)]) -> usize {
    pairs.iter().filter(|(_, a, b)| a > b).count()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let r = desk();
    let secs = start.elapsed().as_secs_f64();
    ensure(r.failures().count() == 0, || format!("{} failed cells", r.failures().count()))?;
    let w = wins(&r.paired("gft", "sft", accuracy));
    let gft = mean_of(r, "gft", accuracy)?;
    let sft = mean_of(r, "sft", accuracy)?;
    let grpo = mean_of(r, "grpo", accuracy)?;
    ensure(w >= 4, || format!("GFT beats SFT on {w}/5 seeds"))?;
    ensure(gft >= grpo, || format!("mean accuracy GFT {gft:.4} < GRPO {grpo:.4}"))?;
    ensure(secs < 1200.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "GFT > SFT on {w}/5 seeds; mean accuracy GFT {gft:.3}, GRPO {grpo:.3}, SFT {sft:.3}; {secs:.0}s"
    ))
}

fn criterion_7() -> Outcome {
    let r = desk();
    let kl = |c: &CellSummary| c.report.kl_to_base;
    let kl_wins = wins(&r.paired("sft", "gft", kl));
    let sft_drop = r.side_drop("sft");
    let gft_drop = r.side_drop("gft");
    let drop_wins = gft_drop
        .iter()
        .filter(|(s, g)| sft_drop.iter().any(|(t, d)| t == s && g < d))
        .count();
    ensure(kl_wins >= 4, || format!("KL(SFT) > KL(GFT) on {kl_wins}/5 seeds"))?;
    ensure(drop_wins >= 4, || format!("GFT side drop smaller on {drop_wins}/5 seeds"))?;
    Ok(format!(
        "KL SFT {:.3} vs GFT {:.3} ({kl_wins}/5); side drop SFT {:.3} vs GFT {:.3} ({drop_wins}/5)",
        mean_of(r, "sft", kl)?,
        mean_of(r, "gft", kl)?,
        sft_drop.iter().map(|x| x.1).sum::<f64>() / 5.0,
        gft_drop.iter().map(|x| x.1).sum::<f64>() / 5.0,
    ))
}

fn criterion_8() -> Outcome {
    let r = desk();
    let p64 = |c: &CellSummary| c.report.pass_at_k.get(&64).copied();
    let w = wins(&r.paired("gft", "grpo", p64));
    ensure(w >= 4, || format!("pass@64 GFT > GRPO on {w}/5 seeds"))?;
    Ok(format!(
        "pass@64 GFT {:.3} vs GRPO {:.3} ({w}/5 seeds)",
        mean_of(r, "gft", p64)?,
        mean_of(r, "grpo", p64)?
    ))
}

fn criterion_9() -> Outcome {
    let r = desk();
    let gft = mean_of(r, "gft", accuracy)?;
    let no_gal = mean_of(r, "gft_no_gal", accuracy)?;
    let no_dcr = mean_of(r, "gft_no_dcr", accuracy)?;
    let double = mean_of(r, "sft", accuracy)?;
    ensure(gft >= no_gal && gft >= no_dcr, || {
        format!("GFT {gft:.4} vs w/o GAL {no_gal:.4}, w/o DCR {no_dcr:.4}")
    })?;
    ensure(no_gal >= double && no_dcr >= double, || {
        format!("single ablations {no_gal:.4}, {no_dcr:.4} vs double ablation {double:.4}")
    })?;
    Ok(format!(
        "GFT {gft:.3} >= w/o GAL {no_gal:.3}, w/o DCR {no_dcr:.3} >= w/o both {double:.3}"
    ))
}

fn small_run(learning_rate: f64) -> RunConfig {
    let small = Architecture::Neural {
        embed_dim: 8,
        hidden_dim: 16,
        window: 4,
    };
    let setup = SetupConfig {
        task: TaskSpec::Modadd { modulus: 11 },
        side_task: Some(TaskSpec::Reverse { alphabet: 3, length: 3 }),
        n_train: 40,
        n_eval: 16,
        n_side_eval: 8,
        teacher: Some(TeacherConfig {
            arch: small,
            n_queries: 40,
            steps: 20,
            batch: 8,
            eval_queries: 8,
            ..TeacherConfig::default()
        }),
        base: BaseConfig {
            arch: small,
            side_queries: 20,
            side_steps: 10,
            warm_queries: 30,
            warm_steps: 10,
            batch: 8,
            ..BaseConfig::default()
        },
    };
    let mut sft = StageConfig::new("sft", ObjectiveConfig::new(ObjectiveKind::Sft), 8);
    sft.batch_queries = 8;
    sft.optimizer = OptimizerConfig::adam(learning_rate);
    let mut gft = StageConfig::new("gft", ObjectiveConfig::new(ObjectiveKind::Gft), 8);
    gft.batch_queries = 2;
    gft.optimizer = OptimizerConfig::adam(learning_rate);
    RunConfig {
        schema_version: SCHEMA_VERSION,
        seed: 4,
        setup,
        stages: vec![sft, gft],
        eval: EvalConfig {
            n_samples: 8,
            ks: vec![1, 8],
            ..EvalConfig::default()
        },
        monitor: MonitorConfig {
            kl_every: 2,
            ..MonitorConfig::default()
        },
        side_eval_samples: 2,
        output_dir: None,
        fixture_dir: None,
    }
}

fn criterion_10() -> Outcome {
    let cfg = small_run(1e-3);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ma, _) = train_run(&cfg, a.path()).map_err(|e| e.to_string())?;
    let (mb, _) = train_run(&cfg, b.path()).map_err(|e| e.to_string())?;
    ensure(ma.final_checkpoint_hash == mb.final_checkpoint_hash, || "final checkpoint hashes differ".into())?;
    for name in ["base.ckpt", "final.ckpt", "stage-sft.ckpt", "stage-gft.ckpt"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        ensure(x == y, || format!("{name} differs between runs"))?;
    }
    let records: Vec<RunRecord> = read_records(&a.path().join("records.jsonl")).unwrap();
    for rec in &records {
        let values = [rec.loss, rec.grad_norm, rec.mean_entropy, rec.rectified_fraction, rec.mean_reward];
        ensure(values.iter().all(|v| v.is_finite()), || format!("non-finite record at step {}", rec.step))?;
        ensure(rec.kl_to_base.is_none_or(f64::is_finite), || format!("non-finite KL at step {}", rec.step))?;
    }

    let c = tempfile::tempdir().unwrap();
    let err = train_run(&small_run(1e300), c.path());
    let aborted = match err {
        Err(Error::NonFinite { what, step, .. }) => format!("{what} at step {step}"),
        other => return Err(format!("expected a non-finite abort, got {other:?}")),
    };
    let logged: Vec<RunRecord> = read_records(&c.path().join("records.jsonl")).unwrap_or_default();
    ensure(
        logged.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite()),
        || "a non-finite step was logged before the abort".into(),
    )?;
    Ok(format!(
        "hash {} reproduced; {} finite records; overflow aborted with non-finite {aborted}",
        &ma.final_checkpoint_hash[..12],
        records.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", criterion_1),
        ("SFT as importance-weighted policy gradient", criterion_2),
        ("reduction identities", criterion_3),
        ("rectifier bounds", criterion_4),
        ("advantage and pass@k identities", criterion_5),
        ("method comparison on modadd", criterion_6),
        ("forgetting", criterion_7),
        ("diversity", criterion_8),
        ("ablation ordering", criterion_9),
        ("determinism and non-finite aborts", criterion_10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = format!("criterion_{}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| id.contains(f.as_str()) || name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("{id} {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("{id} {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
