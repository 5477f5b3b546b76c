//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries probed per parameter array; arrays at or below this size are probed fully.
    pub max_entries_per_param: usize,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_entries_per_param: 12,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, entry, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare tape gradients of `loss` against central differences on sampled entries
/// of every parameter in `store`.
pub fn check_gradients<T: Scalar>(
    store: &ParamStore<T>,
    loss: impl Fn(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let l = loss(store, &mut g)?;
    let grads = g.backward(l).param_grads(store.len());
    drop(g);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(s, &mut g)?;
        Ok(g.scalar_value(l).to_f64_lossy())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let h = T::c(opts.step);
    for id in store.ids() {
        let n = store.get(id).len();
        let entries: Vec<usize> = if n <= opts.max_entries_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_entries_per_param).into_vec()
        };
        for e in entries {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads[id.index()]
                .as_ref()
                .map_or(0.0, |t| t.data()[e].to_f64_lossy());
            let err = rel_err(analytic, numeric, opts.abs_floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((store.name(id).to_string(), e, analytic, numeric));
                }
            }
        }
    }
    Ok(report)
}
