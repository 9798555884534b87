use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`. The numeric quotient divides
/// by the perturbation actually representable in `f32`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = analytic_grad(&f, x)?;
    let mut worst = 0.0f64;
    let mut probe = x.clone().with_requires_grad(false);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let f_hi = eval(&f, &probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let a = a as f64;
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// `∂f/∂x` by one reverse sweep.
pub fn analytic_grad<F>(f: &F, x: &Tensor) -> Result<Vec<f32>>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_check(&tape, out)?;
    tape.backward(out)?;
    Ok(tape
        .grad(xv)
        .map(<[f32]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]))
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = f(&mut tape, xv)?;
    scalar_check(&tape, out)?;
    Ok(tape.item(out)? as f64)
}

fn scalar_check(tape: &Tape, out: Var) -> Result<()> {
    if tape.value(out).is_scalar() {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn([4], |i| i as f32 * 0.3 - 0.5);
        let err = grad_check(
            |t, v| {
                let s = t.scale(v, 2.5);
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn square_sum_passes() {
        let x = Tensor::from_fn([5], |i| (i as f32 * 1.7).sin());
        let err = grad_check(
            |t, v| {
                let s = t.square(v)?;
                Ok(t.sum(s))
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::zeros([3]);
        assert!(matches!(
            grad_check(|_, v| Ok(v), &x, 1e-3),
            Err(Error::Contract(_))
        ));
    }
}
