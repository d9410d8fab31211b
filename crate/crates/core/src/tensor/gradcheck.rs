use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// First coordinate whose error exceeded the tolerance.
    pub failing_coord: Option<usize>,
    pub coords_checked: usize,
}

/// Relative error with the denominator floored so that two vanishing
/// gradients compare equal.
pub(crate) const REL_FLOOR: f64 = 1e-6;

pub(crate) fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, point: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.detached())?;
    let y = f(&mut tape, x)?;
    tape.value(y).item()
}

/// Checks the gradient of the scalar function `f` at `point`.
///
/// `coords` restricts the check to a subset of coordinates (all when `None`).
/// `f` is evaluated twice at the unperturbed point; any bitwise difference is
/// reported as [`Error::OracleIntegrity`].
pub fn finite_diff_check<F>(
    f: F,
    point: &Tensor,
    h: f64,
    tol: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Argument(format!("finite-difference step {} must be > 0", h)));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.detached().with_requires_grad(true))?;
    let y = f(&mut tape, x)?;
    let base = tape.value(y).item()?;
    if eval(&f, point)?.to_bits() != base.to_bits() {
        return Err(Error::OracleIntegrity(
            "function returned different values on repeated evaluation".into(),
        ));
    }
    let analytic = match tape.backward(y) {
        Ok(()) => tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]),
        Err(Error::EmptyTape) => vec![0.0; point.numel()],
        Err(e) => return Err(e),
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut report = GradCheckReport {
        passed: true,
        max_rel_error: f64::NEG_INFINITY,
        worst_coord: coords.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        failing_coord: None,
        coords_checked: coords.len(),
    };
    let mut probe = point.detached();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let err = rel_error(analytic[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        if err >= tol && report.failing_coord.is_none() {
            report.failing_coord = Some(i);
            report.passed = false;
        }
    }
    report.max_rel_error = report.max_rel_error.max(0.0);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_sq(t: &mut Tape, x: Var) -> Result<Var> {
        let s = t.square(x)?;
        t.sum(s)
    }

    #[test]
    fn quadratic_passes() {
        let p = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let r = finite_diff_check(sum_sq, &p, 1e-3, 1e-4, None).unwrap();
        assert!(r.passed, "{:?}", r);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn corrupted_rule_is_located() {
        let p = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            t.corrupt_op = Some("exp");
            let e = t.exp(x)?;
            t.sum(e)
        };
        let r = finite_diff_check(f, &p, 1e-3, 1e-4, None).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failing_coord, Some(0));
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            calls.set(calls.get() + 1.0);
            let s = t.sum(x)?;
            t.add_scalar(s, calls.get())
        };
        let p = Tensor::full(&[2], 1.0);
        assert!(matches!(
            finite_diff_check(f, &p, 1e-3, 1e-4, None),
            Err(Error::OracleIntegrity(_))
        ));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let p = Tensor::full(&[2], 1.0);
        assert!(finite_diff_check(sum_sq, &p, 0.0, 1e-4, None).is_err());
    }
}
