use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamStore};

#[derive(Clone, Debug)]
pub struct FdOptions {
    pub eps: f64,
    /// Bound on `|analytic - numeric| / max(1, |analytic|)`.
    pub tol: f64,
    /// Above this many coordinates, a seeded random subset of this size is checked.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            eps: 1e-5,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdViolation {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub violations: Vec<FdViolation>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Compares `analytic` against central differences of `f` for every
/// parameter coordinate (or a seeded subsample). `store` is perturbed in
/// place and restored bit-for-bit.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    analytic: &Gradients,
    mut f: F,
    opts: &FdOptions,
) -> FdReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let coords: Vec<(usize, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).len()).map(move |i| (id.0, i)))
        .collect();
    let selected: Vec<(usize, usize)> = match opts.max_coords {
        Some(max) if coords.len() > max => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut picks = sample(&mut rng, coords.len(), max).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut report = FdReport::default();
    for (p, i) in selected {
        let id = super::ParamId(p);
        let original = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = original + opts.eps;
        let plus = f(store);
        store.get_mut(id).data_mut()[i] = original - opts.eps;
        let minus = f(store);
        store.get_mut(id).data_mut()[i] = original;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic.get(id)[i];
        let rel_err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if !(rel_err <= opts.tol) {
            report.violations.push(FdViolation {
                param: store.name(id).to_string(),
                index: i,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    report
}
