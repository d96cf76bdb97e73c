use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest per-coordinate disagreement between an analytic gradient and
/// central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub checked: usize,
}

/// `|a - c| / (|a| + |c| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain(format!("eps {eps} outside (0, 1e-2]")));
    }
    Ok(())
}

/// Gradient check of a scalar function built on a tape from a single input.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut tape = Tape::new();
    let leaf = tape.leaf(Tensor::new(x.shape().to_vec(), x.data().to_vec())?);
    let out = f(&mut tape, leaf)?;
    if !tape.scalar(out).is_finite() {
        return Err(Error::Numeric("non-finite function value".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |data: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let out = f(&mut t, v)?;
        Ok(t.scalar(out))
    };
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_with(eval, x.data(), &analytic, &coords, eps)
}

/// Compares `analytic[c]` with the central difference of `f` at each of
/// `coords`.
///
/// The error denominator is floored at `1e4` times the roundoff of the
/// central difference, `EPSILON * |f(x)| / eps`, so coordinates whose true
/// gradient sits below what the difference can resolve are compared in
/// absolute terms instead of reporting float noise.
pub fn grad_check_with<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    coords: &[usize],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    let mut probe = x.to_vec();
    let center = f(&probe)?;
    let floor = 1e4 * f64::EPSILON * center.abs() / eps;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: 0,
        checked: 0,
    };
    for &c in coords {
        let orig = probe[c];
        probe[c] = orig + eps;
        let plus = f(&probe)?;
        probe[c] = orig - eps;
        let minus = f(&probe)?;
        probe[c] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!("non-finite value perturbing coordinate {c}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[c];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor).max(1e-12);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_coord = c;
        }
        report.checked += 1;
    }
    Ok(report)
}
