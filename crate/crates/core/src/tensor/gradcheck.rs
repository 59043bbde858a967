use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `step`, over every coordinate of every input.
///
/// Returns `max |analytic - numeric| / max(1e-12, |numeric|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = values.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.item(out)
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NotScalar(tape.shape(out).to_vec()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (analytic[i][j] - numeric).abs() / numeric.abs().max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
