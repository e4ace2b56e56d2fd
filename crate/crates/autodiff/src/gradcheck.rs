//! Central finite-difference gradient checker.
//!
//! Only forward evaluation is used to build the numerical estimate, so the
//! check is independent of every backward rule it verifies.

use crate::{Real, Tape, Tensor, TensorError, Var};

/// Denominator floor for the per-element relative error, so that gradients
/// which are exactly or nearly zero compare by absolute difference.
pub const REL_FLOOR: Real = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest per-element relative error across all inputs.
    pub max_rel_err: Real,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

pub fn rel_err(a: Real, b: Real) -> Real {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<Real, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarRoot(tape.value(out).shape().to_vec()))
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences of step `h` for every element of every input.
pub fn check<F>(inputs: &[Tensor], h: Real, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v).expect("param grad")).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let mut est = Tensor::zeros(input.shape());
        for j in 0..input.numel() {
            let orig = input.data()[j];
            perturbed[k].data_mut()[j] = orig + h;
            let plus = eval(&perturbed, &f)?;
            perturbed[k].data_mut()[j] = orig - h;
            let minus = eval(&perturbed, &f)?;
            perturbed[k].data_mut()[j] = orig;
            est.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(est);
    }

    let mut max_rel_err = 0.0;
    let mut worst = (0, 0);
    for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let e = rel_err(x, y);
            if e > max_rel_err {
                max_rel_err = e;
                worst = (k, j);
            }
        }
    }
    Ok(GradCheck {
        max_rel_err,
        worst,
        analytic,
        numeric,
    })
}
