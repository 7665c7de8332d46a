//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape's backward pass: it only ever calls
//! the forward evaluation, so it can falsify analytic gradients.

use crate::numerics::matrix::Matrix;
use crate::numerics::tape::{NodeId, Tape};

/// Central finite differences of a scalar function of several matrices.
pub fn numerical_gradient(
    params: &[Matrix],
    eval: &dyn Fn(&[Matrix]) -> f64,
    h: f64,
) -> Vec<Matrix> {
    let mut grads = Vec::with_capacity(params.len());
    for p_idx in 0..params.len() {
        let (rows, cols) = params[p_idx].shape();
        let mut grad = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let mut plus = params.to_vec();
            plus[p_idx].as_mut_slice()[i] += h;
            let mut minus = params.to_vec();
            minus[p_idx].as_mut_slice()[i] -= h;
            grad.as_mut_slice()[i] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        grads.push(grad);
    }
    grads
}

/// Worst-case hybrid relative error: |a - n| / max(1, |a|, |n|).
pub fn max_relative_error(analytic: &[Matrix], numeric: &[Matrix]) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape(), "gradient shape mismatch");
        for (&av, &nv) in a.as_slice().iter().zip(n.as_slice()) {
            let denom = 1.0f64.max(av.abs()).max(nv.abs());
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

/// Checks a tape-built scalar loss against central finite differences.
///
/// `build` must record one leaf per parameter, in order, before any other
/// node, and return the loss node.
pub fn finite_diff_check(
    params: &[Matrix],
    build: impl Fn(&[Matrix], &mut Tape) -> NodeId,
    h: f64,
    tol: f64,
) {
    let mut tape = Tape::new();
    let loss = build(params, &mut tape);
    let grads = tape.backward(loss).expect("backward failed in gradient check");
    let analytic: Vec<Matrix> = params
        .iter()
        .enumerate()
        .map(|(i, p)| grads.get_or_zeros(NodeId(i), p))
        .collect();

    let eval = |p: &[Matrix]| -> f64 {
        let mut t = Tape::new();
        let l = build(p, &mut t);
        t.value(l).item().expect("loss must be scalar")
    };
    let numeric = numerical_gradient(params, &eval, h);
    let err = max_relative_error(&analytic, &numeric);
    assert!(
        err <= tol,
        "gradient check failed: max relative error {err:.3e} > {tol:.1e}"
    );
}
