//! Finite-difference validation of recorded gradients.
//!
//! The checker evaluates a computation twice: once analytically through
//! the tape's backward pass, and once numerically with central
//! differences, rebuilding the tape for every perturbed input element.
//! The two must agree within a relative tolerance; disagreement means the
//! backward implementation of some operation in the computation is wrong.

use std::fmt;

use super::{Tape, Tensor, TensorError, TensorId};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Caller-supplied label of the checked computation.
    pub name: String,
    /// Largest relative error over all input elements.
    pub max_rel_err: f64,
    /// Input element where the largest error occurred.
    pub worst_index: usize,
    /// Analytic gradient at the worst element.
    pub analytic_at_worst: f64,
    /// Numeric gradient at the worst element.
    pub numeric_at_worst: f64,
    /// Number of input elements compared.
    pub checked: usize,
    /// Tolerance the check was run against.
    pub tolerance: f64,
    /// Whether `max_rel_err` stayed within the tolerance.
    pub passed: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} elements (worst: analytic {:.6e} vs numeric {:.6e}) tol {:.1e} -> {}",
            self.name,
            self.max_rel_err,
            self.checked,
            self.analytic_at_worst,
            self.numeric_at_worst,
            self.tolerance,
            if self.passed { "pass" } else { "FAIL" }
        )
    }
}

/// Failures that prevent a gradient comparison from being meaningful.
#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite intermediate produced by `{op}` (tape node {op_index})")]
    NonFinite { op_index: usize, op: &'static str },
    #[error("failed to build computation: {0}")]
    Build(#[from] TensorError),
}

/// Compares the tape gradient of `build` w.r.t. `x` against central
/// finite differences with step [`FD_STEP`].
///
/// `build` must record a pure scalar-valued computation of the input it
/// is handed. Relative error is measured as `|a − n| / max(1, |a|, |n|)`,
/// so near-zero gradients are compared absolutely.
pub fn grad_check<F>(
    name: &str,
    x: &Tensor,
    tolerance: f64,
    build: F,
) -> Result<GradReport, GradCheckError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    let eval = |input: &Tensor| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let ix = tape.leaf(input);
        let loss = build(&mut tape, ix)?;
        if tape.value(loss).len() != 1 {
            return Err(GradCheckError::NonScalarLoss {
                shape: tape.shape(loss).to_vec(),
            });
        }
        if let Some((op_index, op)) = tape.first_nonfinite() {
            return Err(GradCheckError::NonFinite { op_index, op });
        }
        Ok(tape.value(loss)[0])
    };

    // Analytic gradient.
    let mut tape = Tape::new();
    let ix = tape.leaf(x);
    let loss = build(&mut tape, ix)?;
    if tape.value(loss).len() != 1 {
        return Err(GradCheckError::NonScalarLoss {
            shape: tape.shape(loss).to_vec(),
        });
    }
    if let Some((op_index, op)) = tape.first_nonfinite() {
        return Err(GradCheckError::NonFinite { op_index, op });
    }
    tape.backward(loss).expect("loss verified scalar");
    let analytic = tape.grad(ix);

    // Numeric gradient, one central difference per input element.
    let mut report = GradReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        checked: x.len(),
        tolerance,
        passed: true,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let original = probe.data()[i];
        probe.data_mut()[i] = original + FD_STEP;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = original - FD_STEP;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let rel = rel_err(analytic[i], numeric);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    report.passed = report.max_rel_err <= tolerance && report.max_rel_err.is_finite();
    Ok(report)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn correct_backward_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let x = random_tensor(&mut rng, vec![3, 4]);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check("softmax", &x, 1e-4, |tape, ix| {
            let s = tape.row_softmax(ix);
            tape.weighted_sum(s, &w)
        })
        .unwrap();
        assert!(report.passed, "{report}");
    }

    #[test]
    fn hidden_dependency_is_detected_as_wrong_gradient() {
        // The closure feeds the input's current values back in as
        // "constant" weights, so the recorded backward only sees half of
        // the true dependency — the checker must flag the mismatch.
        let x = Tensor::vector(vec![0.7, -1.3, 2.1]);
        let report = grad_check("rigged", &x, 1e-4, |tape, ix| {
            let frozen = tape.value(ix).to_vec();
            tape.weighted_sum(ix, &frozen)
        })
        .unwrap();
        assert!(!report.passed, "fault injection went undetected: {report}");
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn non_finite_intermediates_are_reported_with_location() {
        let x = Tensor::vector(vec![800.0]);
        let err = grad_check("overflow", &x, 1e-4, |tape, ix| {
            let e = tape.exp(ix);
            Ok(tape.sum_all(e))
        })
        .unwrap_err();
        match err {
            GradCheckError::NonFinite { op, .. } => assert_eq!(op, "exp"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check("vector-loss", &x, 1e-4, |tape, ix| Ok(tape.scale(ix, 2.0)))
            .unwrap_err();
        assert!(matches!(err, GradCheckError::NonScalarLoss { .. }));
    }
}
