use super::{ParameterVector, Tape, Var};
use crate::error::{Error, Result};

/// Central-difference step used throughout the test suite.
pub const FD_STEP: f64 = 1e-5;

/// Multiple of the difference quotient's roundoff unit `ε·max(|L|, 1)/h`
/// used as the floor of the relative-error denominator.
pub const ROUNDOFF_FLOOR: f64 = 1e8;

/// Compares the tape gradient of `loss_fn` at `params` against central
/// differences and returns `max |analytic - numeric| / (|numeric| + floor)`,
/// where `floor = max(1e-12, ROUNDOFF_FLOOR · ε · max(|L|, 1) / step)`.
/// The floor keeps components that vanish by exact cancellation from being
/// scored on roundoff alone.
///
/// `loss_fn` builds the scalar loss on the tape it is handed. Every perturbed
/// evaluation replays the stop-gradient values recorded at the unperturbed
/// point, so detached weights (and any branch decided from them) stay frozen.
pub fn finite_difference_check<F>(mut loss_fn: F, params: &ParameterVector, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, &ParameterVector) -> Result<Var>,
{
    let mut base = params.clone();
    base.zero_grad();
    let mut tape = Tape::new();
    let root = loss_fn(&mut tape, &base)?;
    let loss = tape.scalar(root)?;
    tape.backward(root, &mut base)?;
    let floor = (ROUNDOFF_FLOOR * f64::EPSILON * loss.abs().max(1.0) / step).max(1e-12);
    let frozen = tape.detached_log().to_vec();

    let eval = |f: &mut F, p: &ParameterVector| -> Result<f64> {
        let mut t = Tape::replaying(frozen.clone());
        let r = f(&mut t, p)?;
        t.scalar(r)
    };

    let mut probe = base.clone();
    let mut worst: f64 = 0.0;
    for pi in 0..base.len() {
        for j in 0..base.get(pi).numel() {
            let orig = base.get(pi).data[j];
            probe.get_mut(pi).data[j] = orig + step;
            let plus = eval(&mut loss_fn, &probe)?;
            probe.get_mut(pi).data[j] = orig - step;
            let minus = eval(&mut loss_fn, &probe)?;
            probe.get_mut(pi).data[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteProbe {
                    param: base.get(pi).name.clone(),
                    index: j,
                });
            }
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = base.get(pi).grad[j];
            let rel = (analytic - numeric).abs() / (numeric.abs() + floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut p = ParameterVector::new();
        p.push("theta", (1, 4), vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let err = finite_difference_check(
            |t, p| {
                let th = t.param(p, 0);
                let sq = t.mul(th, th)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &p,
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn non_finite_probe_names_parameter() {
        let mut p = ParameterVector::new();
        p.push("w", (1, 1), vec![1.0]).unwrap();
        let res = finite_difference_check(
            |t, p| {
                let w = t.param(p, 0);
                let v = t.value(w)[0];
                // finite at the base point, infinite once perturbed
                let c = t.scalar_constant(if v == 1.0 { 1.0 } else { f64::INFINITY });
                t.mul(w, c)
            },
            &p,
            FD_STEP,
        );
        match res {
            Err(Error::NonFiniteProbe { param, index }) => {
                assert_eq!(param, "w");
                assert_eq!(index, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
