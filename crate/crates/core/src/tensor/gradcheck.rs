use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central differences.
///
/// Detached values are frozen at their unperturbed values during the
/// finite-difference evaluations (see [`Tape::replay`]), so functions with
/// stop-gradients are checked against the gradient they actually define.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)` over all
/// coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Parameter(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let (analytic, log): (Vec<Option<Tensor>>, Vec<Tensor>) = {
        let tape = Tape::logging();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar function, got shape {:?}",
                out.shape()
            )));
        }
        let grads = tape.backward(out)?;
        (vars.iter().map(|v| grads.wrt(*v).cloned()).collect(), tape.detached_log())
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::replay(log.clone());
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
