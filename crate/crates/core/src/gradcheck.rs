//! Central finite-difference verification of tape gradients.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Parameters;

/// `|a-b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `(analytic, numeric)` for every entry, in flat order.
    pub entries: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tol)
    }

    /// Largest relative error among entries with `max(|a|, |b|) >= floor`.
    ///
    /// Central differences carry an absolute rounding error of roughly
    /// `ε·|f| / h`, so entries far below that are not resolvable; this
    /// diagnostic separates them from genuine disagreements.
    pub fn max_rel_error_above(&self, floor: f64) -> f64 {
        self.params
            .iter()
            .flat_map(|p| &p.entries)
            .filter(|(a, b)| a.abs().max(b.abs()) >= floor)
            .map(|&(a, b)| relative_error(a, b))
            .fold(0.0, f64::max)
    }

    /// Number of entries with `max(|a|, |b|) < floor`.
    pub fn entries_below(&self, floor: f64) -> usize {
        self.params
            .iter()
            .flat_map(|p| &p.entries)
            .filter(|(a, b)| a.abs().max(b.abs()) < floor)
            .count()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "param={} max_rel_error={:.3e} worst_index={} analytic={:.6e} numeric={:.6e}",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric
            )?;
        }
        write!(
            f,
            "max_rel_error={:.3e} tol={:.1e} passed={}",
            self.max_rel_error, self.tol, self.passed
        )
    }
}

/// Compares the tape gradient of `loss` against `(f(θ+h) − f(θ−h)) / 2h` for
/// every entry of every parameter of `model`.
///
/// `loss` must bind the model's parameters on the tape in canonical order
/// (see [`Parameters`]) and be deterministic; two baseline evaluations that
/// differ bitwise are reported as a contract error.
pub fn finite_diff_gradcheck<M, F>(
    model: &mut M,
    h: f64,
    tol: f64,
    loss: F,
) -> Result<GradCheckReport>
where
    M: Parameters,
    F: for<'a> Fn(&'a M, &mut Tape<'a>) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let l = loss(m, &mut tape)?;
        Ok(tape.value(l).item())
    };

    let (names, analytic) = {
        let mut tape = Tape::new();
        let l = loss(model, &mut tape)?;
        let named = model.named_params();
        if tape.params().len() != named.len() {
            return Err(Error::Contract(format!(
                "loss bound {} parameters but the model has {}",
                tape.params().len(),
                named.len()
            )));
        }
        let grads = tape.backward(l)?;
        let analytic: Vec<_> = tape.params().iter().map(|&v| grads.get(v)).collect();
        let names: Vec<_> = named.into_iter().map(|(n, _)| n).collect();
        (names, analytic)
    };

    let base = eval(model)?;
    let again = eval(model)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "loss is not deterministic ({base} vs {again})"
        )));
    }

    let mut report = Vec::with_capacity(names.len());
    for (pi, name) in names.into_iter().enumerate() {
        let numel = analytic[pi].numel();
        let mut worst = ParamCheck {
            name,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            entries: Vec::with_capacity(numel),
        };
        for j in 0..numel {
            let orig = model.params_mut()[pi].data()[j];
            model.params_mut()[pi].data_mut()[j] = orig + h;
            let plus = eval(model);
            model.params_mut()[pi].data_mut()[j] = orig - h;
            let minus = eval(model);
            model.params_mut()[pi].data_mut()[j] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[pi].data()[j];
            let err = relative_error(a, numeric);
            worst.entries.push((a, numeric));
            if err > worst.max_rel_error || j == 0 {
                worst.max_rel_error = err;
                worst.worst_index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        report.push(worst);
    }
    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: report,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_has_unit_gradient() {
        let mut params = vec![Tensor::vector(&[0.3, -1.2, 4.0])];
        let report = finite_diff_gradcheck(&mut params, 1e-5, 1e-10, |p, tape| {
            let x = tape.param(&p[0]);
            tape.sum(x)
        })
        .unwrap();
        assert!(report.passed, "{report}");
        assert!(report.max_rel_error < 1e-10);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut params = vec![Tensor::scalar(0.0)];
        let analytic = {
            let mut tape = Tape::new();
            let x = tape.param(&params[0]);
            let s = tape.sigmoid(x).unwrap();
            tape.backward(s).unwrap().get(x).item()
        };
        assert!((analytic - 0.25).abs() < 1e-15);
        let report = finite_diff_gradcheck(&mut params, 1e-5, 1e-8, |p, tape| {
            let x = tape.param(&p[0]);
            tape.sigmoid(x)
        })
        .unwrap();
        assert!(report.passed, "{report}");
        assert!((report.params[0].numeric - 0.25).abs() < 1e-10);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let mut params = vec![Tensor::scalar(1.0)];
        let err = finite_diff_gradcheck(&mut params, 1e-5, 1e-4, |p, tape| {
            calls.set(calls.get() + 1.0);
            let x = tape.param(&p[0]);
            tape.affine(x, 1.0, calls.get())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn unreachable_tolerance_fails() {
        let mut params = vec![Tensor::vector(&[0.7, -0.3])];
        let report = finite_diff_gradcheck(&mut params, 1e-5, 1e-16, |p, tape| {
            let x = tape.param(&p[0]);
            let t = tape.tanh(x)?;
            tape.sum(t)
        })
        .unwrap();
        assert!(!report.passed);
        assert_eq!(report.failing().count(), 1);
    }

    #[test]
    fn parameters_are_restored() {
        let mut params = vec![Tensor::vector(&[0.1, 0.2])];
        let before = params.clone();
        finite_diff_gradcheck(&mut params, 1e-5, 1e-4, |p, tape| {
            let x = tape.param(&p[0]);
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        })
        .unwrap();
        assert_eq!(params, before);
    }
}
