//! Central finite-difference gradient checks.

use rand::Rng;

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::real::Real;

/// Gradients smaller than this are compared on an absolute scale.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ABS_FLOOR);
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub samples: Vec<GradSample>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.samples.is_empty() && self.max_rel_err() <= tol
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Central differences of a scalar function at `x`.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Picks `count` random (parameter, element) pairs among trainable parameters,
/// uniformly over elements.
pub fn sample_entries<F: Real>(store: &ParamStore<F>, count: usize, rng: &mut impl Rng) -> Vec<(ParamId, usize)> {
    let ids = store.trainable_ids();
    let sizes: Vec<usize> = ids.iter().map(|&id| store.tensor(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    (0..count)
        .map(|_| {
            let mut r = rng.random_range(0..total);
            for (&id, &n) in ids.iter().zip(&sizes) {
                if r < n {
                    return (id, r);
                }
                r -= n;
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Compares parameter gradients against central differences.
///
/// `loss(store, with_backward)` must rebuild the forward pass from scratch,
/// return the scalar loss, and when `with_backward` is set accumulate the
/// analytic gradients into `store`.
pub fn check_params<F: Real>(
    store: &mut ParamStore<F>,
    entries: &[(ParamId, usize)],
    step: f64,
    mut loss: impl FnMut(&mut ParamStore<F>, bool) -> Result<f64>,
) -> Result<GradReport> {
    store.zero_grad();
    loss(store, true)?;
    let mut report = GradReport::default();
    for &(id, idx) in entries {
        let analytic = store
            .get(id)
            .grad
            .as_ref()
            .map_or(0.0, |g| g.data()[idx].to_f64_lossy());
        let original = store.tensor(id).data()[idx];
        store.get_mut(id).tensor.data_mut()[idx] = original + F::of(step);
        let up = loss(store, false)?;
        store.get_mut(id).tensor.data_mut()[idx] = original - F::of(step);
        let down = loss(store, false)?;
        store.get_mut(id).tensor.data_mut()[idx] = original;
        let numeric = (up - down) / (2.0 * step);
        report.samples.push(GradSample {
            label: format!("{}[{idx}]", store.get(id).name),
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric),
        });
    }
    Ok(report)
}
