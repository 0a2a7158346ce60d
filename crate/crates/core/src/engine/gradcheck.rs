//! Central finite-difference oracle for analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-5;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&tape, xv)?;
    let v = y.value();
    if v.numel() != 1 {
        return Err(Error::shape("grad_check", format!("f must return a scalar, got {:?}", v.shape())));
    }
    Ok(v.item())
}

/// Max over coordinates of `|analytic − central difference| / max(1, |central difference|)`
/// for a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&tape, xv)?;
    let base = y.value().item();
    if eval_scalar(&f, x)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(
            "two evaluations at the same point differ; freeze any running statistics".into(),
        ));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .wrt(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Same metric as [`grad_check`] but over stored parameters.
///
/// At most `max_coords` coordinates per parameter are probed (evenly strided); pass
/// `usize::MAX` to probe all of them. Parameter values are restored before returning.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    max_coords: usize,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let y = f(&tape, store)?;
        let v = y.value();
        if v.numel() != 1 {
            return Err(Error::shape("grad_check", "f must return a scalar"));
        }
        Ok(v.item())
    };
    let tape = Tape::new();
    let y = f(&tape, store)?;
    let base = y.value().item();
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(
            "two evaluations at the same point differ; freeze any running statistics".into(),
        ));
    }
    let grads = tape.backward(y)?;

    let mut worst = 0.0f64;
    for &id in ids {
        let n = store.value(id).numel();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let up = eval(store);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let down = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up? - down?) / (2.0 * eps);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
