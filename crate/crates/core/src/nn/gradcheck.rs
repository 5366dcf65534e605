use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative error, so exact zeros compare cleanly.
const REL_FLOOR: f64 = 1e-7;

/// Largest relative error between reverse-mode and central-difference
/// gradients of the scalar returned by `loss`, over every parameter entry.
///
/// `loss` receives a fresh tape and the parameters bound on it.
pub fn grad_check<F>(params: &[Tensor], step: f64, loss: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<_>>()?;
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect::<Result<_>>()?;
        let r = loss(&mut t, &vs)?;
        let v = t.value(r);
        if v.shape() != (1, 1) {
            return Err(Error::Shape("grad_check loss must be scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p.shape());
        for j in 0..p.data().len() {
            let orig = p.data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
