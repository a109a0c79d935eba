use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdamLike,
}

/// First-order optimizer settings. For SGD `beta1` is the momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_opt: f64,
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamLike,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_opt: 1e-8,
            grad_clip_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: momentum,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(self.epsilon_opt > 0.0) {
            return Err(Error::Config("epsilon_opt must be positive".into()));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Moment buffers carried between updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Gradient norms observed by one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    /// Norm of the raw accumulated gradient.
    pub grad_norm: f64,
    /// Norm of the gradient after optional clipping.
    pub applied_norm: f64,
}

/// Applies one update from the gradients accumulated in `params`.
pub fn optimizer_update(
    params: &mut ParameterVector,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<UpdateStats> {
    let mut g = params.flat_grad();
    let mut theta = params.flatten();
    let n = theta.len();
    if state.m.len() != n {
        state.m = vec![0.0; n];
        state.v = vec![0.0; n];
    }
    let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            step: state.t as usize,
            group: None,
        });
    }
    let mut applied_norm = grad_norm;
    if let Some(c) = cfg.grad_clip_norm {
        if grad_norm > c {
            let s = c / grad_norm;
            g.iter_mut().for_each(|x| *x *= s);
            applied_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        }
    }
    state.t += 1;
    let lr = cfg.learning_rate;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for i in 0..n {
                state.m[i] = cfg.beta1 * state.m[i] + g[i];
                theta[i] -= lr * state.m[i];
            }
        }
        OptimizerKind::AdamLike => {
            let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
            for i in 0..n {
                state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
                state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + cfg.epsilon_opt);
            }
        }
    }
    if theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "parameter update",
            step: state.t as usize - 1,
            group: None,
        });
    }
    params.set_flat(&theta)?;
    Ok(UpdateStats {
        grad_norm,
        applied_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(data: Vec<f64>, grad: Vec<f64>) -> ParameterVector {
        let mut p = ParameterVector::new();
        let n = data.len();
        p.push("w", (1, n), data).unwrap();
        p.get_mut(0).grad = grad;
        p
    }

    #[test]
    fn sgd_step() {
        let mut p = pv(vec![0.0, 0.0], vec![1.0, -2.0]);
        let mut s = OptimizerState::default();
        optimizer_update(&mut p, &mut s, &OptimizerConfig::sgd(0.1, 0.0)).unwrap();
        assert_eq!(p.flatten(), vec![-0.1, 0.2]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut p = pv(vec![0.0, 0.0, 0.0], vec![3.0, -0.5, 1e-3]);
        let mut s = OptimizerState::default();
        optimizer_update(&mut p, &mut s, &OptimizerConfig::adam(1e-3)).unwrap();
        for (x, g) in p.flatten().iter().zip([3.0, -0.5, 1e-3]) {
            assert_eq!(x.signum(), -f64::signum(g));
            assert!((x.abs() - 1e-3).abs() < 1e-7, "{x}");
        }
    }

    #[test]
    fn clipping_rescales_to_norm() {
        let mut p = pv(vec![0.0, 0.0], vec![6.0, 8.0]);
        let mut s = OptimizerState::default();
        let cfg = OptimizerConfig {
            grad_clip_norm: Some(1.0),
            ..OptimizerConfig::sgd(1.0, 0.0)
        };
        let stats = optimizer_update(&mut p, &mut s, &cfg).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.applied_norm - 1.0).abs() < 1e-12);
        let moved = p.flatten().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((moved - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut p = pv(vec![0.0], vec![f64::NAN]);
        let mut s = OptimizerState::default();
        let err = optimizer_update(&mut p, &mut s, &OptimizerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { what: "gradient", .. }));
        assert_eq!(p.flatten(), vec![0.0]);
    }

    #[test]
    fn validation() {
        assert!(OptimizerConfig::adam(0.0).validate().is_err());
        assert!(OptimizerConfig::sgd(0.1, 1.0).validate().is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
