//! Central finite-difference oracle for checking analytic gradients.

use alloc::vec::Vec;

use super::params::{Gradients, ParamId, ParamStore};
use super::rng::RngState;

/// Denominator floor for the relative error, so entries whose true gradient
/// is numerically zero are judged by absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    pub fn rel_err(&self) -> f64 {
        rel_err(self.analytic, self.numeric)
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(Probe::rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err()))
    }
}

/// `(f(x + h) - f(x - h)) / 2h` for one scalar entry of one parameter.
pub fn central_difference(
    store: &mut ParamStore,
    param: ParamId,
    index: usize,
    step: f64,
    f: &mut impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = store.value(param).data()[index];
    store.get_mut(param).value.data_mut()[index] = orig + step;
    let up = f(store);
    store.get_mut(param).value.data_mut()[index] = orig - step;
    let down = f(store);
    store.get_mut(param).value.data_mut()[index] = orig;
    (up - down) / (2.0 * step)
}

/// Compares `analytic` against central differences of `f` at `samples`
/// entries drawn uniformly over all scalars in `params`.
pub fn check(
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &Gradients,
    samples: usize,
    step: f64,
    rng: &mut RngState,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let sizes: Vec<usize> = params.iter().map(|&p| store.value(p).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut probes = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut flat = rng.int_range(0, total - 1);
        let mut k = 0;
        while flat >= sizes[k] {
            flat -= sizes[k];
            k += 1;
        }
        let param = params[k];
        let a = analytic.get(param).map_or(0.0, |g| g.data()[flat]);
        let n = central_difference(store, param, flat, step, &mut f);
        probes.push(Probe { param, index: flat, analytic: a, numeric: n });
    }
    GradCheckReport { probes }
}
