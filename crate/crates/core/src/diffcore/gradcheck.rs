use serde::Serialize;

use super::{DiffError, ParamId, ParamStore, Tensor};

/// Outcome of comparing backward gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    /// First coordinate where either gradient was NaN/inf.
    pub non_finite: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error <= threshold
    }
}

/// Checks `f`'s analytic gradient against central differences.
///
/// `f` maps the parameter store to `(loss, gradient per checked id)`; it must
/// be deterministic (fix every random draw outside it). Up to
/// `max_coords_per_param` coordinates are probed per parameter, spread evenly
/// over the flattened tensor. Relative error is
/// `|g_ad − g_fd| / max(1e-6, |g_ad| + |g_fd|)`; the floor sits at the
/// round-off level of central differences, so exactly-zero gradients pass.
pub fn finite_difference_check<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    eps: f64,
    max_coords_per_param: usize,
    mut f: F,
) -> Result<GradCheckReport, DiffError>
where
    F: FnMut(&ParamStore<f64>) -> Result<(f64, Vec<Option<Tensor<f64>>>), DiffError>,
{
    if !(eps > 0.0) {
        return Err(DiffError::InvalidEps(eps));
    }
    let (_, analytic) = f(store)?;
    assert_eq!(analytic.len(), ids.len(), "one analytic gradient per id");
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        non_finite: None,
    };
    for (&id, g_ad) in ids.iter().zip(&analytic) {
        let n = store.get(id).numel();
        let stride = n.div_ceil(max_coords_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let (up, _) = f(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let (down, _) = f(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let fd = (up - down) / (2.0 * eps);
            let ad = g_ad.as_ref().map_or(0.0, |g| g.data()[i]);
            report.coordinates_checked += 1;
            if !fd.is_finite() || !ad.is_finite() {
                report.non_finite.get_or_insert_with(|| (store.name(id).to_string(), i));
                continue;
            }
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-6);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
