use super::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A scalar-valued computation that can be replayed at any precision.
pub trait TensorProgram {
    fn run<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var>;
}

fn scalar_of<T: Element>(tape: &Tape<T>, out: Var) -> Result<T> {
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar program, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

fn evaluate<P: TensorProgram>(program: &P, x: Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let input = tape.constant(x);
    let out = program.run(&mut tape, input)?;
    scalar_of(&tape, out)
}

/// Compares the `f32` tape gradient of `program` at `x` with central
/// differences of step `step`.
///
/// The difference quotients replay the program in `f64`, so the oracle's
/// own rounding stays far below the tolerances it is used with. Returns the
/// largest per-coordinate `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<P: TensorProgram>(program: &P, x: &Tensor, step: f32) -> Result<f64> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Contract(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }

    let mut tape = Tape::<f32>::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = program.run(&mut tape, leaf)?;
    scalar_of(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .expect("backward populates every tracked leaf")
        .to_vec();

    let base = x.cast::<f64>();
    let reference = evaluate(program, base.clone())?;
    let again = evaluate(program, base.clone())?;
    if reference.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "program is not deterministic: {reference} then {again}"
        )));
    }

    let h = step as f64;
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += h;
        let mut minus = base.clone();
        minus.data_mut()[i] -= h;
        let numeric = (evaluate(program, plus)? - evaluate(program, minus)?) / (2.0 * h);
        let a = a as f64;
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    struct SumAll;
    impl TensorProgram for SumAll {
        fn run<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            tape.sum(x)
        }
    }

    struct ReluOnly;
    impl TensorProgram for ReluOnly {
        fn run<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            tape.relu(x)
        }
    }

    /// Scales by the call count, so repeated evaluations disagree.
    struct Drifting(Cell<u32>);
    impl TensorProgram for Drifting {
        fn run<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
            self.0.set(self.0.get() + 1);
            let s = tape.scale(x, T::from_f64(self.0.get() as f64))?;
            tape.sum(s)
        }
    }

    #[test]
    fn linear_sum_is_exact() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7]).unwrap();
        let err = grad_check(&SumAll, &x, 1e-3).unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(&SumAll, &x, 0.0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            grad_check(&SumAll, &x, -1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_scalar_program_is_rejected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(&ReluOnly, &x, 1e-3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nondeterministic_program_is_detected() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(&Drifting(Cell::new(0)), &x, 1e-3);
        assert!(matches!(err, Err(Error::Oracle(_))));
    }
}
