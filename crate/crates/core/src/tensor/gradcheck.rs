//! Central finite-difference oracle for tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

/// Worst entry found by [`check_gradients`].
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a-b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = out.value();
    if value.numel() != 1 {
        return Err(invalid!("gradient check needs a scalar function, got {:?}", value.shape()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Compares tape gradients of a scalar `f` against central differences for
/// every element of every input accepted by `include(input, element)`.
pub fn check_gradients_where<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    include: impl Fn(usize, usize) -> bool,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(invalid!("finite-difference step must be positive, got {h}"));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        if v.numel() == 1 && !v.item().is_finite() {
            return Err(Error::NonFinite(format!("function value {}", v.item())));
        }
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            if !include(ii, e) {
                continue;
            }
            let x0 = input.data()[e];
            work[ii].data_mut()[e] = x0 + h;
            let fp = eval(&f, &work)?;
            work[ii].data_mut()[e] = x0 - h;
            let fm = eval(&f, &work)?;
            work[ii].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ii].data()[e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst_input = ii;
                report.worst_index = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// [`check_gradients_where`] over every element.
pub fn check_gradients<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    check_gradients_where(f, inputs, h, |_, _| true)
}

/// Single-input form; returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 5.0, 2.0]).unwrap();
        let err = finite_diff_check(|_, x| Ok(x.sum()), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn square_sum_matches_analytic() {
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(|_, x| Ok(x.square().sum()), &x, 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(finite_diff_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
        let x = Tensor::from_f64(&[1], &[-1.0]).unwrap();
        assert!(matches!(
            finite_diff_check(|_, x| Ok(x.ln().sum()), &x, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
