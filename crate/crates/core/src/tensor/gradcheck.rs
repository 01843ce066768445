//! Central finite-difference gradient oracle.
//!
//! Test support: evaluates a scalar-valued function of array inputs by forward
//! evaluation only, perturbing one entry at a time. Independent of the tape's
//! backward pass by construction.

use super::{Array, Real};

/// Central finite differences of `f` with respect to `inputs[which]`.
pub fn finite_diff(
    f: &dyn Fn(&[Array]) -> Real,
    inputs: &[Array],
    which: usize,
    h: Real,
) -> Array {
    let mut grad = Array::zeros(inputs[which].shape());
    for i in 0..inputs[which].len() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += h;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Maximum relative error between an analytic gradient and the
/// finite-difference oracle, with an absolute floor to avoid blowing up
/// near-zero entries.
pub fn max_rel_error(analytic: &Array, numeric: &Array) -> Real {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0 as Real;
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        let denom = a.abs().max(n.abs()).max(1e-3);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// Check a tape-built scalar function against finite differences for every
/// input marked differentiable. Returns the worst relative error.
pub fn check(
    build: &dyn Fn(&mut super::tape::Tape, &[super::tape::Var]) -> super::tape::Var,
    inputs: &[Array],
    h: Real,
) -> Real {
    use super::tape::Tape;
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);

    let eval = |arrays: &[Array]| -> Real {
        let mut t = Tape::new();
        let vs: Vec<_> = arrays.iter().map(|a| t.leaf(a.clone())).collect();
        let l = build(&mut t, &vs);
        t.value(l).scalar_value()
    };

    let mut worst = 0.0 as Real;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(inputs[k].shape()));
        let numeric = finite_diff(&eval, inputs, k, h);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    worst
}
