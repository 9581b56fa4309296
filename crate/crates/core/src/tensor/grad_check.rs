use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between tape gradients of the scalar `f(x)` and
/// central finite differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// Multi-input variant of [`grad_check`]; every input is perturbed coordinate
/// by coordinate.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_pairs(f, inputs, eps)?
        .into_iter()
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// `(analytic, numeric)` for every input coordinate, inputs in order.
pub fn grad_check_pairs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.detached())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.detached();
                if i == which {
                    t.data_mut()[coord] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::contract("grad_check function must be scalar-valued"));
        }
        Ok(v.data()[0])
    };

    let mut out = Vec::new();
    for (which, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = vec![0.0; input.len()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for coord in 0..input.len() {
            let numeric = (eval(which, coord, eps)? - eval(which, coord, -eps)?) / (2.0 * eps);
            out.push((analytic[coord], numeric));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|tape, v| Ok(tape.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
