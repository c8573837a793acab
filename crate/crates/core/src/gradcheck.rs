//! Central-difference gradient verification.
//!
//! `grad_check` never consults the tape's backward rules to produce its
//! reference: each coordinate is probed with two plain forward evaluations
//! on fresh tapes, so it is an independent oracle for reverse mode.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error with the floor used across all gradient comparisons.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, elementwise over `x`. Returns the maximum
/// relative error.
#[allow(clippy::needless_range_loop)] // probes and reads share the index
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::invalid(
            "grad_check",
            format!("eps {eps} outside [1e-6, 1e-4]"),
        ));
    }

    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true))?;
        let y = f(&tape, xv)?;
        let yval = tape.value(y);
        if yval.len() != 1 {
            return Err(Error::invalid("grad_check", "f must be scalar-valued"));
        }
        if !yval.data()[0].is_finite() {
            return Err(Error::NonFinite { op: "grad_check(f(x))".to_string(), index: 0 });
        }
        tape.backward(y)?;
        match tape.grad(xv) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; x.len()],
        }
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(probe.clone())?;
        let y = f(&tape, xv)?;
        Ok(tape.value(y).data()[0])
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone().with_requires_grad(false);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        max_rel = max_rel.max(relative_error(numeric, analytic[i]));
    }
    Ok(max_rel)
}
