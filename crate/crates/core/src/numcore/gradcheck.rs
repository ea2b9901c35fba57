use super::tape::{Parameter, Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Anything that owns an ordered list of parameters (slot `i` on a tape
/// refers to `params()[i]`).
pub trait ParamSet<F> {
    fn params(&self) -> &[Parameter<F>];
    fn params_mut(&mut self) -> &mut [Parameter<F>];
}

impl<F> ParamSet<F> for Vec<Parameter<F>> {
    fn params(&self) -> &[Parameter<F>] {
        self
    }

    fn params_mut(&mut self) -> &mut [Parameter<F>] {
        self
    }
}

fn eval<F: Real, P: ParamSet<F>>(
    set: &mut P,
    build_loss: &mut impl FnMut(&mut P, &mut Tape<F>) -> Result<Var>,
) -> Result<(Tape<F>, Var, F)> {
    let mut tape = Tape::new();
    let loss = build_loss(set, &mut tape)?;
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss evaluated to {v}")));
    }
    Ok((tape, loss, v))
}

/// Compares tape gradients with central differences over every parameter
/// entry and returns `max |analytic - numeric| / max(1, |numeric|)`.
///
/// Leaves parameter values untouched and parameter grads holding the
/// analytic gradient.
pub fn grad_check<F: Real, P: ParamSet<F>>(
    set: &mut P,
    mut build_loss: impl FnMut(&mut P, &mut Tape<F>) -> Result<Var>,
    epsilon: F,
) -> Result<F> {
    let (tape, loss, _) = eval(set, &mut build_loss)?;
    set.params_mut().iter_mut().for_each(Parameter::zero_grad);
    tape.backward(loss, set.params_mut())?;
    drop(tape);

    let two_eps = epsilon + epsilon;
    let mut worst = F::zero();
    for p in 0..set.params().len() {
        for i in 0..set.params()[p].value.len() {
            let orig = set.params()[p].value.data()[i];
            set.params_mut()[p].value.data_mut()[i] = orig + epsilon;
            let plus = eval(set, &mut build_loss).map(|r| r.2);
            set.params_mut()[p].value.data_mut()[i] = orig - epsilon;
            let minus = eval(set, &mut build_loss).map(|r| r.2);
            set.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / two_eps;
            let analytic = set.params()[p].grad.data()[i];
            let err = (analytic - numeric).abs() / numeric.abs().max(F::one());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn quadratic_matches_two_w() {
        let mut set = vec![Parameter::new(
            "w",
            Tensor::<f64>::from_rows(&[vec![0.3, -1.2], vec![2.5, 0.01]]).unwrap(),
        )];
        let err = grad_check(
            &mut set,
            |s, tape| {
                let w = tape.param(0, &s[0]);
                Ok(tape.sum_squares(w))
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
        let want: Vec<f64> = set[0].value.data().iter().map(|w| 2.0 * w).collect();
        assert_eq!(set[0].grad.data(), want.as_slice());
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut set = vec![Parameter::new("w", Tensor::<f64>::vector(vec![1.0, 2.0]))];
        let err = grad_check(
            &mut set,
            |s, tape| {
                let _w = tape.param(0, &s[0]);
                Ok(tape.input(Tensor::scalar(3.0)))
            },
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
        assert!(set[0].grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let mut set = vec![Parameter::new("w", Tensor::<f64>::vector(vec![1.0]))];
        let r = grad_check(
            &mut set,
            |_, tape| Ok(tape.input(Tensor::scalar(f64::NAN))),
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
