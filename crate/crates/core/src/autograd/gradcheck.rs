//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use crate::autograd::tape::{Tape, Var};
use crate::autograd::tensor::{DType, ParamStore};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(parameter name, max relative error, coordinates checked)`.
    pub per_param: Vec<(String, f64, usize)>,
}

/// `|analytic - numeric| / max(|numeric|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares tape gradients of `loss_fn` against central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` for every trainable parameter of
/// `store`. At most `max_coords` coordinates per parameter are sampled
/// (seeded); `None` checks all of them. Requires float64 parameters.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Tape) -> Result<Var>,
{
    if let Some((_, name, _)) = store
        .iter()
        .find(|(_, _, t)| t.requires_grad() && t.dtype() != DType::F64)
    {
        return Err(Error::Config(format!("gradient check needs f64 parameters; `{name}` is not")));
    }
    let mut tape = Tape::new(DType::F64);
    let loss = loss_fn(store, &mut tape)?;
    let grads = tape.backward(loss)?;

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(DType::F64);
        let v = tape.no_grad(|t| loss_fn(store, t))?;
        let (r, c) = tape.dims(v);
        if r * c != 1 {
            return Err(Error::NonScalarLoss(vec![r, c]));
        }
        let f = tape.value(v)[0];
        if !f.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        Ok(f)
    };

    let mut rng = rng::substream(seed, rng::stream::GRADCHECK);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_param: Vec::new(),
    };
    let ids: Vec<_> = store.ids().filter(|&id| store.get(id).requires_grad()).collect();
    for id in ids {
        let name = store.name(id).to_string();
        let n = store.get(id).numel();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.push((name, worst, coords.len()));
    }
    Ok(report)
}
