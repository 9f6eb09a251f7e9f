//! Central finite differences, the independent oracle for `backward`.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::Tensor;

/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every coordinate `i`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite_difference_gradient", format!("eps = {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!(
                "f evaluated to {hi} / {lo} around coordinate {i}"
            )));
        }
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Largest `|a - b| / (1 + |b|)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / (1.0 + b.abs()))
        .fold(0.0, f64::max)
}

/// Worst agreement found by [`check_store_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst entry.
    pub worst_param: String,
    /// Number of scalars compared.
    pub checked: usize,
}

/// Compares `backward` with central differences for every trainable
/// parameter of `store`, where `loss` builds a scalar from a bound store.
///
/// Stop-gradient values seen on the analytic pass are replayed as constants
/// on every perturbed evaluation, so straight-through and detached branches
/// are differentiated the same way on both sides.
pub fn check_store_gradients<F>(store: &ParamStore, eps: f64, mut loss: F) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape, &Binding) -> Result<Var>,
{
    let mut tape = Tape::recording_stops();
    let b = store.bind(&mut tape);
    let l = loss(&mut tape, &b)?;
    let grads = tape.backward(l)?;
    let stops = tape.take_recorded_stops();

    let mut work = store.clone();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let analytic = grads.wrt(b.var(id));
        let numeric = finite_difference_gradient(
            |probe| {
                *work.get_mut(id) = probe.clone();
                let mut tape = Tape::replaying_stops(stops.clone());
                let b = work.bind(&mut tape);
                let l = loss(&mut tape, &b)?;
                Ok(tape.value(l).data()[0])
            },
            store.get(id),
            eps,
        )?;
        *work.get_mut(id) = store.get(id).clone();
        let err = max_relative_error(&analytic, &numeric);
        report.checked += analytic.len();
        if err >= report.max_rel_err {
            report.max_rel_err = err;
            report.worst_param = store.name(id).to_string();
        }
    }
    Ok(report)
}
