//! Plain SGD with optional global-norm gradient clipping.

use crate::nn::{ParamSet, TensorMut, TensorRef};
use crate::{Error, Result};

/// One SGD step: `p <- p - lr*g` for every tensor whose name satisfies
/// `trainable`, after clipping the global norm of that subset to `clip`.
/// All gradients are zeroed afterwards, including frozen ones.
///
/// Errors with "divergence detected" if any gradient being applied is
/// non-finite.
pub fn sgd_step<P: ParamSet>(
    params: &mut P,
    grads: &mut P,
    lr: f64,
    clip: Option<f64>,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut norm_sq = 0.0;
    for (name, g) in grads.tensors() {
        if !trainable(&name) {
            continue;
        }
        if !g.all_finite() {
            return Err(Error::Numeric("divergence detected".into()));
        }
        norm_sq += g.sum_sq();
    }
    let norm = norm_sq.sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };

    {
        let gs = grads.tensors();
        let mut ps = params.tensors_mut();
        assert_eq!(gs.len(), ps.len(), "parameter/gradient tensor count mismatch");
        for ((gn, g), (pn, p)) in gs.iter().zip(ps.iter_mut()) {
            assert_eq!(gn, pn, "parameter/gradient tensor order mismatch");
            apply(p, g, -lr * scale, trainable(gn));
        }
    }
    for (_, mut g) in grads.tensors_mut() {
        g.fill(0.0);
    }
    Ok(())
}

fn apply(p: &mut TensorMut<'_>, g: &TensorRef<'_>, a: f64, active: bool) {
    if active {
        p.scaled_add(a, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::Array2;

    fn lin(v: f64) -> Linear {
        Linear {
            w: Array2::from_elem((2, 2), v),
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = lin(1.5);
        let mut g = lin(0.0);
        sgd_step(&mut p, &mut g, 0.1, Some(5.0), |_| true).unwrap();
        assert!(p.w.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut p = lin(1.5);
        let mut g = lin(2.0);
        sgd_step(&mut p, &mut g, 0.0, None, |_| true).unwrap();
        assert!(p.w.iter().all(|&x| x == 1.5));
        assert!(g.w.iter().all(|&x| x == 0.0), "grads zeroed");
    }

    #[test]
    fn scalar_update_arithmetic() {
        let mut p = Linear {
            w: Array2::from_elem((1, 1), 1.0),
        };
        let mut g = Linear {
            w: Array2::from_elem((1, 1), 0.5),
        };
        sgd_step(&mut p, &mut g, 0.1, None, |_| true).unwrap();
        assert!((p.w[[0, 0]] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_requested_norm() {
        // Gradient of all 3s over 4 entries: norm 6; clip at 3 halves it.
        let mut p = lin(0.0);
        let mut g = lin(3.0);
        sgd_step(&mut p, &mut g, 1.0, Some(3.0), |_| true).unwrap();
        for &x in p.w.iter() {
            assert!((x - (-1.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn below_clip_threshold_is_untouched() {
        let mut p = lin(0.0);
        let mut g = lin(0.1);
        sgd_step(&mut p, &mut g, 1.0, Some(5.0), |_| true).unwrap();
        for &x in p.w.iter() {
            assert!((x - (-0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_tensors_are_skipped_and_still_zeroed() {
        let mut p = lin(1.0);
        let mut g = lin(2.0);
        sgd_step(&mut p, &mut g, 0.5, None, |_| false).unwrap();
        assert!(p.w.iter().all(|&x| x == 1.0));
        assert!(g.w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = lin(1.0);
        let mut g = lin(0.0);
        g.w[[0, 1]] = f64::NAN;
        let err = sgd_step(&mut p, &mut g, 0.1, None, |_| true).unwrap_err();
        assert!(err.to_string().contains("divergence detected"));
        let mut g = lin(0.0);
        g.w[[1, 0]] = f64::INFINITY;
        assert!(sgd_step(&mut p, &mut g, 0.1, None, |_| true).is_err());
    }
}
