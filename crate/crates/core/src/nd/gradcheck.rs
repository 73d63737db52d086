//! Central finite-difference checks for tape gradients.

use crate::error::Result;
use crate::nd::tape::{Tape, Var};
use crate::nd::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1, |a|, |n|)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Max relative error between the tape gradient of `f` at `x` and central differences.
pub fn gradcheck<F>(x: &Tensor, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_many(std::slice::from_ref(x), h, |t, v| f(t, v[0]))
}

/// As [`gradcheck`], over every coordinate of every input.
pub fn gradcheck_many<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vars)?;
        Ok(t.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.take_or_zeros(*v)).collect();

    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, g) in analytic.iter().enumerate() {
        for j in 0..g.len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = gradcheck(&x, 1e-5, |t, v| {
            let sq = t.mul(v, v)?;
            t.sum(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = gradcheck(&x, 1e-5, |t, _| Ok(t.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(err, 0.0);
    }
}
