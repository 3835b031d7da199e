//! Finite-difference gradient verification.
//!
//! Analytic gradients from the tape are compared against central finite
//! differences of a re-evaluated loss. The helpers are generic over the
//! state being perturbed so the same harness serves raw tapes, single
//! layers and whole networks.

/// Default perturbation step.
pub const FD_STEP: f64 = 1e-5;

/// Default acceptance threshold on the relative error.
pub const FD_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Worst relative error between `analytic` and central finite differences
/// of `eval` taken through every slot of the parameter exposed by `slot_of`.
///
/// `eval` must be a pure function of the state: repeated evaluation at the
/// same parameters has to return the same loss.
#[allow(clippy::needless_range_loop)] // the slot is re-borrowed between evals
pub fn grad_check_param<S>(
    state: &mut S,
    mut slot_of: impl FnMut(&mut S) -> &mut [f64],
    mut eval: impl FnMut(&mut S) -> f64,
    analytic: &[f64],
    step: f64,
) -> f64 {
    let n = slot_of(state).len();
    assert_eq!(n, analytic.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = slot_of(state)[i];
        slot_of(state)[i] = orig + step;
        let f_plus = eval(state);
        slot_of(state)[i] = orig - step;
        let f_minus = eval(state);
        slot_of(state)[i] = orig;
        let fd = (f_plus - f_minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], fd));
    }
    worst
}
