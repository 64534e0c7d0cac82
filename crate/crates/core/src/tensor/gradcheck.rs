//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamId, ParamStore, TensorError, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(ParamId, usize)>,
    pub coordinates: usize,
}

/// Denominator floor per unit of loss magnitude. Central differences carry
/// roundoff of order `eps * |f| / FD_STEP` (about 1e-10 for an O(1) loss), so
/// coordinates whose true gradient is exactly zero (a key bias under softmax
/// shift invariance, say) would otherwise report pure noise as error.
pub const DENOM_FLOOR: f64 = 1e-4;

/// `|a - n| / max(floor, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

fn eval<E, F>(f: &F, store: &ParamStore) -> Result<f64, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" }.into());
    }
    Ok(v)
}

/// Compares the backward-pass gradient of the scalar `f` against central
/// differences with step [`FD_STEP`] on every coordinate of every parameter.
///
/// `f` must be deterministic: it is rebuilt from scratch for each probe.
pub fn gradcheck<E, F>(store: &ParamStore, f: F) -> Result<GradCheckReport, E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(TensorError::NonFinite { op: "gradcheck" }.into());
    }
    let floor = DENOM_FLOOR * value.abs().max(1.0);
    let grads = g.backward(loss)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in store.ids() {
        let analytic = grads.param(id);
        for k in 0..store.get(id).numel() {
            let orig = store.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + FD_STEP;
            let plus = eval(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig - FD_STEP;
            let minus = eval(&f, &probe)?;
            probe.get_mut(id).data_mut()[k] = orig;

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g[k]);
            let err = relative_error(a, numeric, floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((id, k));
            }
        }
    }
    Ok(report)
}
