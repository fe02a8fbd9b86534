//! Central finite-difference checks of reverse-mode gradients.

use crate::autodiff::params::{Bound, ParamId, ParamStore};
use crate::autodiff::tape::{Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;
use crate::scalar::Scalar;

/// Denominator floor for the relative error of near-zero gradient entries.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheck {
    fn merge(&mut self, other: &GradCheck) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.checked += other.checked;
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares the gradient of scalar `f` at `x` against central differences
/// with step `eps`, element-wise. Returns the largest relative error.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<f64>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    Ok(grad_check_report(f, x, eps)?.max_rel_err)
}

pub fn grad_check_report<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt(xv);
    let eval = |t: Tensor<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(t)?;
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).data()[0].as_f64())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += S::lit(eps);
        let mut minus = x.clone();
        minus.data_mut()[i] -= S::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i].as_f64();
        report.max_rel_err = report.max_rel_err.max(rel_err(a, numeric));
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// Finite-difference check over parameters of a store. `f` builds the scalar
/// loss from bound parameters. At most `per_tensor` entries of each listed
/// tensor are probed, spread evenly.
pub fn grad_check_params<S, F>(
    store: &ParamStore<S>,
    ids: &[ParamId],
    f: F,
    eps: f64,
    per_tensor: usize,
) -> Result<GradCheck>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &ParamStore<S>) -> Result<(Var, Bound)>,
{
    let mut tape = Tape::new();
    let (y, bound) = f(&mut tape, store)?;
    let grads = tape.backward(y)?;
    let eval = |s: &ParamStore<S>| -> Result<f64> {
        let mut tape = Tape::new();
        let (y, _) = f(&mut tape, s)?;
        Ok(tape.value(y).data()[0].as_f64())
    };
    let mut report = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for &id in ids {
        let analytic = grads.wrt(bound[id]);
        let n = store.get(id).numel();
        let stride = (n / per_tensor.max(1)).max(1);
        let mut part = GradCheck {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
        };
        for i in (0..n).step_by(stride).take(per_tensor) {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += S::lit(eps);
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= S::lit(eps);
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic.data()[i].as_f64();
            part.max_rel_err = part.max_rel_err.max(rel_err(a, numeric));
            part.max_abs_err = part.max_abs_err.max((a - numeric).abs());
            part.checked += 1;
        }
        report.merge(&part);
    }
    Ok(report)
}
