use alloc::format;
use alloc::vec::Vec;

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        if other.max_rel_err > self.max_rel_err {
            GradCheckReport {
                checked: self.checked + other.checked,
                ..other
            }
        } else {
            GradCheckReport {
                checked: self.checked + other.checked,
                ..self
            }
        }
    }
}

pub(crate) fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval<F>(f: &F, x: Tensor<f64>, grad: bool) -> Result<(Tape<f64>, Var, Var)>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.with_requires_grad(grad));
    let y = f(&mut tape, xv)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((tape, xv, y))
}

/// Compares reverse-mode gradients of scalar `f` at `x` against central
/// differences with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, h, &coords)
}

/// Same as [`grad_check`] restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor<f64>, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let (mut tape, xv, y) = eval(&f, x.clone(), true)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(xv) {
        Some(g) => g.into(),
        None => alloc::vec![0.0; x.numel()],
    };
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &c in coords {
        let mut plus = x.clone();
        plus.data_mut()[c] += h;
        let mut minus = x.clone();
        minus.data_mut()[c] -= h;
        let (tp, _, yp) = eval(&f, plus, false)?;
        let (tm, _, ym) = eval(&f, minus, false)?;
        let numeric = (tp.value(yp).item() - tm.value(ym).item()) / (2.0 * h);
        let e = rel_err(analytic[c], numeric);
        if report.checked == 0 || e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = c;
        }
        report.checked += 1;
    }
    Ok(report)
}
