//! Loss family: SFT, DFT, REINFORCE-style policy gradient, simplified GRPO,
//! group fine-tuning (GFT) and its ablations, plus the importance-sampled
//! view of the SFT gradient.
//!
//! Every token-level objective here has the form
//!
//! ```text
//! loss = − Σ_k w_k Σ_t c_{k,t} · log π_{k,t}
//! ```
//!
//! with a per-response weight `w_k` (1, a reward, or a standardized
//! advantage) and a detached per-token coefficient `c_{k,t}` (1, `sg(π)`, or
//! the rectifier). Because `c` carries no gradient, the coefficient on
//! `∇ log π_{k,t}` is exactly `w_k · c_{k,t}`.

mod check;
mod sft_rl;

use serde::{Deserialize, Serialize};

pub use check::{gradcheck_objectives, gradcheck_suite, random_instance, GradcheckRow, GRADCHECK_TOLERANCE};
pub use sft_rl::{sft_as_rl_gradient, sft_as_rl_monte_carlo, McEstimate, SftAsRlMode};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::policy::{Policy, Source, TeacherForced, TokenId};
use crate::tasks::ResponseGroup;

/// Advantage of a singleton group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SingleMemberMode {
    /// `A = 0`: the literal standardized score of a one-element group.
    #[default]
    ZeroAdvantage,
    /// `A = R`: makes a lone expert group behave like SFT.
    RawReward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub epsilon: f64,
    pub single_member_mode: SingleMemberMode,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        AdvantageConfig {
            epsilon: 1e-6,
            single_member_mode: SingleMemberMode::ZeroAdvantage,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Which gradient the rectified loss reproduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DcrSemantics {
    /// `−A·C(π)·log π` with `C` detached: coefficient `A·π` below τ, `A` above.
    #[default]
    LossForm,
    /// `−A·ŵ·log π` with `ŵ = C(π)/π` detached: coefficient `A` below τ, `A/π` above.
    GradForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifierConfig {
    pub tau: f64,
    pub semantics: DcrSemantics,
}

impl Default for RectifierConfig {
    fn default() -> Self {
        RectifierConfig {
            tau: 0.7,
            semantics: DcrSemantics::LossForm,
        }
    }
}

impl RectifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Sft,
    Dft,
    Grpo,
    Gft,
    GftNoGal,
    GftNoDcr,
    SftAsRl,
}

impl ObjectiveKind {
    pub fn label(&self) -> &'static str {
        match self {
            ObjectiveKind::Sft => "sft",
            ObjectiveKind::Dft => "dft",
            ObjectiveKind::Grpo => "grpo",
            ObjectiveKind::Gft => "gft",
            ObjectiveKind::GftNoGal => "gft_no_gal",
            ObjectiveKind::GftNoDcr => "gft_no_dcr",
            ObjectiveKind::SftAsRl => "sft_as_rl",
        }
    }

    /// Consumes one trajectory per query rather than a K-member group.
    pub fn is_single_trajectory(&self) -> bool {
        matches!(self, ObjectiveKind::Sft | ObjectiveKind::Dft | ObjectiveKind::SftAsRl)
    }
}

/// Every knob the loss family needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub advantage: AdvantageConfig,
    #[serde(default)]
    pub rectifier: RectifierConfig,
    /// Divide each response's token sum by its length.
    #[serde(default)]
    pub length_normalize: bool,
}

impl ObjectiveConfig {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveConfig {
            kind,
            advantage: AdvantageConfig::default(),
            rectifier: RectifierConfig::default(),
            length_normalize: false,
        }
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.rectifier.tau = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.advantage.validate().map_err(|e| e.at("advantage"))?;
        self.rectifier.validate().map_err(|e| e.at("rectifier"))
    }
}

/// Standardized group advantages `(R_k − μ)/(σ + ε)` with population σ.
pub fn group_advantages(rewards: &[f64], cfg: &AdvantageConfig) -> Vec<f64> {
    match rewards.len() {
        0 => Vec::new(),
        1 => match cfg.single_member_mode {
            SingleMemberMode::ZeroAdvantage => vec![0.0],
            SingleMemberMode::RawReward => vec![rewards[0]],
        },
        k => {
            let mean = rewards.iter().sum::<f64>() / k as f64;
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k as f64;
            let denom = var.sqrt() + cfg.epsilon;
            rewards.iter().map(|r| (r - mean) / denom).collect()
        }
    }
}

/// Rectifier value for one probability: π below τ, 1 at or above.
pub fn rectify_value(pi: f64, tau: f64) -> f64 {
    if pi < tau {
        pi
    } else {
        1.0
    }
}

/// Elementwise rectifier `C(π)`: `sg(π)` where `π < τ`, the constant 1
/// elsewhere. The branch is chosen from the (detached) numeric value.
pub fn rectifier(tape: &mut Tape, pi: Var, cfg: &RectifierConfig) -> Result<Var> {
    if tape.value(pi).iter().any(|p| p.is_nan()) {
        return Err(Error::NonFinite {
            what: "token probability",
            step: 0,
            group: None,
        });
    }
    if let Some(bad) = tape.value(pi).iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Domain {
            op: "rectifier",
            detail: format!("token probability {bad} is not positive"),
        });
    }
    let shape = tape.shape(pi);
    let detached = tape.stop_gradient(pi)?;
    let below: Vec<f64> = tape
        .value(detached)
        .iter()
        .map(|&p| if p < cfg.tau { 1.0 } else { 0.0 })
        .collect();
    let above: Vec<f64> = below.iter().map(|b| 1.0 - b).collect();
    let mask = tape.constant(below, shape)?;
    let ones = tape.constant(above, shape)?;
    let kept = tape.mul(detached, mask)?;
    tape.add(kept, ones)
}

/// Detached per-token coefficient applied to `log π`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenCoefficient {
    Unit,
    /// `sg(π)` on every token (DFT).
    Detached,
    Rectified(RectifierConfig),
}

/// A built batch loss plus the per-token bookkeeping the trainer reports.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: Var,
    pub forced: TeacherForced,
    /// Coefficient on `∇ log π_t` for every teacher-forced token.
    pub coefficients: Vec<f64>,
    /// The response-level weight (advantage, reward or 1) of each token's response.
    pub response_weights: Vec<f64>,
    /// Token probabilities `π_t`.
    pub token_probs: Vec<f64>,
    /// Number of groups the loss averages over.
    pub groups: usize,
}

/// `− Σ_k w_k [/T_k] Σ_t c_t log π_t` over teacher-forced `pairs`, scaled by `scale`.
pub fn weighted_token_loss(
    tape: &mut Tape,
    policy: &Policy,
    pairs: &[(&[TokenId], &[TokenId])],
    weights: &[f64],
    coefficient: TokenCoefficient,
    length_normalize: bool,
    scale: f64,
) -> Result<BatchLoss> {
    if pairs.len() != weights.len() {
        return Err(Error::ShapeMismatch {
            op: "weighted_token_loss",
            lhs: (pairs.len(), 1),
            rhs: (weights.len(), 1),
        });
    }
    let forced = policy.teacher_forced(tape, pairs)?;
    let logp = forced.token_logprobs;
    let n = tape.shape(logp).0;
    let mut omega = vec![0.0; n];
    let mut response_weights = vec![0.0; n];
    for (span, &w) in forced.spans.iter().zip(weights) {
        let norm = if length_normalize { span.len() as f64 } else { 1.0 };
        for t in span.clone() {
            omega[t] = w / norm;
            response_weights[t] = w;
        }
    }
    let pi = tape.exp(logp)?;
    let token_probs = tape.value(pi).to_vec();
    let coef: Option<Var> = match coefficient {
        TokenCoefficient::Unit => None,
        TokenCoefficient::Detached => Some(tape.stop_gradient(pi)?),
        TokenCoefficient::Rectified(cfg) => match cfg.semantics {
            DcrSemantics::LossForm => Some(rectifier(tape, pi, &cfg)?),
            DcrSemantics::GradForm => {
                let c = rectifier(tape, pi, &cfg)?;
                let frozen_pi = tape.detached_log().last().cloned().unwrap_or_default();
                let w_hat: Vec<f64> = tape
                    .value(c)
                    .iter()
                    .zip(&frozen_pi)
                    .map(|(c, p)| c / p)
                    .collect();
                Some(tape.constant(w_hat, (n, 1))?)
            }
        },
    };
    let coef_values: Vec<f64> = match coef {
        Some(c) => tape.value(c).to_vec(),
        None => vec![1.0; n],
    };
    let coefficients = omega
        .iter()
        .zip(&coef_values)
        .map(|(o, c)| o * c * scale)
        .collect();
    let omega_var = tape.constant(omega, (n, 1))?;
    let weighted = match coef {
        Some(c) => {
            let wc = tape.mul(omega_var, c)?;
            tape.mul(wc, logp)?
        }
        None => tape.mul(omega_var, logp)?,
    };
    let total = tape.sum(weighted)?;
    let loss = tape.scale(total, -scale)?;
    Ok(BatchLoss {
        loss,
        forced,
        coefficients,
        response_weights,
        token_probs,
        groups: 0,
    })
}

/// `−log π(y* | x)`.
pub fn sft_loss(tape: &mut Tape, policy: &Policy, query: &[TokenId], expert: &[TokenId]) -> Result<Var> {
    Ok(weighted_token_loss(tape, policy, &[(query, expert)], &[1.0], TokenCoefficient::Unit, false, 1.0)?.loss)
}

/// `−Σ_t sg(π_t) log π_t`.
pub fn dft_loss(tape: &mut Tape, policy: &Policy, query: &[TokenId], expert: &[TokenId]) -> Result<Var> {
    Ok(weighted_token_loss(
        tape,
        policy,
        &[(query, expert)],
        &[1.0],
        TokenCoefficient::Detached,
        false,
        1.0,
    )?
    .loss)
}

/// REINFORCE surrogate `−Σ_k weight_k · log π(y_k | x)`.
pub fn policy_gradient_loss(
    tape: &mut Tape,
    policy: &Policy,
    query: &[TokenId],
    responses: &[Vec<TokenId>],
    weights: &[f64],
) -> Result<Var> {
    let pairs: Vec<(&[TokenId], &[TokenId])> = responses.iter().map(|r| (query, r.as_slice())).collect();
    Ok(weighted_token_loss(tape, policy, &pairs, weights, TokenCoefficient::Unit, false, 1.0)?.loss)
}

/// Response weights and token coefficient of one objective on one group.
fn group_weighting(
    kind: ObjectiveKind,
    group: &ResponseGroup,
    group_id: usize,
    cfg: &ObjectiveConfig,
) -> Result<(Vec<f64>, TokenCoefficient)> {
    group.check(group_id)?;
    let advantages = || match &group.advantages {
        Some(a) if a.len() == group.k() => a.clone(),
        _ => group_advantages(&group.rewards, &cfg.advantage),
    };
    let rect = TokenCoefficient::Rectified(cfg.rectifier);
    Ok(match kind {
        ObjectiveKind::Sft => (vec![1.0; group.k()], TokenCoefficient::Unit),
        ObjectiveKind::Dft => (vec![1.0; group.k()], TokenCoefficient::Detached),
        ObjectiveKind::Grpo => {
            if let Some(s) = group.sources().find(|s| *s != Source::SelfGenerated) {
                return Err(Error::Group {
                    group: group_id,
                    detail: format!("GRPO accepts self-generated responses only, found {s:?}"),
                });
            }
            (advantages(), TokenCoefficient::Unit)
        }
        ObjectiveKind::Gft => (advantages(), rect),
        ObjectiveKind::GftNoGal => (group.rewards.clone(), rect),
        ObjectiveKind::GftNoDcr => (advantages(), TokenCoefficient::Unit),
        ObjectiveKind::SftAsRl => {
            return Err(Error::Config(
                "sft_as_rl is an estimator, not a trainable batch objective".into(),
            ))
        }
    })
}

/// Batch objective: mean over groups of each group's summed token loss.
pub fn batch_loss(
    tape: &mut Tape,
    policy: &Policy,
    groups: &[ResponseGroup],
    cfg: &ObjectiveConfig,
) -> Result<BatchLoss> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut pairs: Vec<(&[TokenId], &[TokenId])> = Vec::new();
    let mut weights = Vec::new();
    let mut coefficient = None;
    for (gid, g) in groups.iter().enumerate() {
        let (w, c) = group_weighting(cfg.kind, g, gid, cfg)?;
        coefficient.get_or_insert(c);
        weights.extend(w);
        pairs.extend(g.responses.iter().map(|r| (g.query.as_slice(), r.tokens.as_slice())));
    }
    let coefficient = coefficient.unwrap_or(TokenCoefficient::Unit);
    let mut out = weighted_token_loss(
        tape,
        policy,
        &pairs,
        &weights,
        coefficient,
        cfg.length_normalize,
        1.0 / groups.len() as f64,
    )?;
    out.groups = groups.len();
    Ok(out)
}

/// Simplified GRPO: standardized advantages over self-samples, no KL, no clipping.
pub fn grpo_loss(tape: &mut Tape, policy: &Policy, group: &ResponseGroup, adv: &AdvantageConfig) -> Result<Var> {
    let cfg = ObjectiveConfig {
        advantage: *adv,
        ..ObjectiveConfig::new(ObjectiveKind::Grpo)
    };
    Ok(batch_loss(tape, policy, std::slice::from_ref(group), &cfg)?.loss)
}

/// Token-level GFT loss on one group.
pub fn gft_loss(
    tape: &mut Tape,
    policy: &Policy,
    group: &ResponseGroup,
    adv: &AdvantageConfig,
    rect: &RectifierConfig,
) -> Result<Var> {
    let cfg = ObjectiveConfig {
        advantage: *adv,
        rectifier: *rect,
        ..ObjectiveConfig::new(ObjectiveKind::Gft)
    };
    Ok(batch_loss(tape, policy, std::slice::from_ref(group), &cfg)?.loss)
}

/// GFT with one component removed (`GftNoGal` or `GftNoDcr`).
pub fn ablation_loss(
    kind: ObjectiveKind,
    tape: &mut Tape,
    policy: &Policy,
    group: &ResponseGroup,
    adv: &AdvantageConfig,
    rect: &RectifierConfig,
) -> Result<Var> {
    if !matches!(kind, ObjectiveKind::GftNoGal | ObjectiveKind::GftNoDcr) {
        return Err(Error::Config(format!("{} is not an ablation", kind.label())));
    }
    let cfg = ObjectiveConfig {
        kind,
        advantage: *adv,
        rectifier: *rect,
        length_normalize: false,
    };
    Ok(batch_loss(tape, policy, std::slice::from_ref(group), &cfg)?.loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Response, Vocab};

    #[test]
    fn advantages_worked_example() {
        let r = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let a = group_advantages(&r, &AdvantageConfig::default());
        // direct arithmetic: μ = 0.25, σ = sqrt(0.1875)
        let sigma = (0.1875f64).sqrt();
        assert!((sigma - 0.433013).abs() < 1e-6);
        let pos = 0.75 / (sigma + 1e-6);
        let neg = -0.25 / (sigma + 1e-6);
        assert!((a[0] - 1.732047).abs() < 1e-6, "{}", a[0]);
        assert!((a[2] - (-0.577349)).abs() < 1e-6, "{}", a[2]);
        assert_eq!(a[0], pos);
        assert_eq!(a[7], neg);
    }

    #[test]
    fn advantages_degenerate_cases() {
        let cfg = AdvantageConfig::default();
        assert_eq!(group_advantages(&[0.3; 5], &cfg), vec![0.0; 5]);
        assert_eq!(group_advantages(&[1.0], &cfg), vec![0.0]);
        let raw = AdvantageConfig {
            single_member_mode: SingleMemberMode::RawReward,
            ..cfg
        };
        assert_eq!(group_advantages(&[1.0], &raw), vec![1.0]);
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], &cfg);
        let b = group_advantages(&[2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn rectifier_branches() {
        let cfg = RectifierConfig::default();
        let mut p = crate::autodiff::ParameterVector::new();
        for (pi, expect) in [(0.9, 1.0), (0.5, 0.5), (0.7, 1.0)] {
            let mut t = Tape::new();
            let x = t.leaf(vec![pi], (1, 1)).unwrap();
            let c = rectifier(&mut t, x, &cfg).unwrap();
            assert_eq!(t.value(c), &[expect]);
            let l = t.mul(c, x).unwrap();
            t.backward(l, &mut p).unwrap();
            // only the live factor x contributes: d(c·x)/dx = c
            assert_eq!(t.grad(x)[0], expect);
        }
        let mut t = Tape::new();
        let z = t.leaf(vec![0.0], (1, 1)).unwrap();
        assert!(matches!(rectifier(&mut t, z, &cfg), Err(Error::Domain { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(RectifierConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(RectifierConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(RectifierConfig { tau: 1.0, ..Default::default() }.validate().is_ok());
        assert!(AdvantageConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
    }

    fn toy_policy() -> Policy {
        Policy::tabular_random(Vocab::new(&["a", "b"]).unwrap(), 1, 1.0, 4).unwrap()
    }

    #[test]
    fn grpo_rejects_non_self_sources() {
        let policy = toy_policy();
        let g = ResponseGroup {
            query: vec![3],
            responses: vec![Response::expert(vec![3, Vocab::EOS])],
            rewards: vec![1.0],
            advantages: None,
        };
        let mut t = Tape::new();
        assert!(matches!(
            grpo_loss(&mut t, &policy, &g, &AdvantageConfig::default()),
            Err(Error::Group { .. })
        ));
    }

    #[test]
    fn missing_rewards_rejected() {
        let policy = toy_policy();
        let g = ResponseGroup {
            query: vec![3],
            responses: vec![Response::expert(vec![3, Vocab::EOS])],
            rewards: vec![],
            advantages: None,
        };
        let mut t = Tape::new();
        let err = gft_loss(&mut t, &policy, &g, &AdvantageConfig::default(), &RectifierConfig::default());
        assert!(matches!(err, Err(Error::Group { .. })));
    }

    #[test]
    fn zero_weights_give_zero_loss_and_gradient() {
        let mut policy = toy_policy();
        let mut t = Tape::new();
        let l = policy_gradient_loss(&mut t, &policy, &[3], &[vec![3, 4, Vocab::EOS], vec![4, Vocab::EOS]], &[0.0, 0.0])
            .unwrap();
        assert_eq!(t.value(l)[0], 0.0);
        t.backward(l, policy.params_mut()).unwrap();
        assert!(policy.params().flat_grad().iter().all(|g| *g == 0.0));
    }
}
