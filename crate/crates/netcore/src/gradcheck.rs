//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Gradients, Graph, ParamId, ParamStore, Result, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Stencil spacing.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that vanishing gradients
    /// are compared in absolute terms.
    pub floor: f64,
    /// Entries sampled per parameter tensor (all of them when smaller).
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-6,
            max_entries_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or |x| kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.tolerance = other.tolerance;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks every parameter of `store`.
pub fn check<F>(store: &ParamStore, loss_fn: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check_params(store, &ids, loss_fn, cfg)
}

/// Checks the listed parameters against central differences of `loss_fn`.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut analytic = Gradients::for_store(store);
    let base_signature = {
        let mut g = Graph::new(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss, &mut analytic)?;
        g.kink_signature()
    };

    let evaluate = |s: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new(s);
        let loss = loss_fn(&mut g)?;
        Ok((g.scalar(loss), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        ..GradCheckReport::default()
    };
    for &id in ids {
        let n = store.get(id).value.numel();
        let entries: Vec<usize> = if n <= cfg.max_entries_per_param {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, cfg.max_entries_per_param).into_vec();
            picked.sort_unstable();
            picked
        };
        for i in entries {
            // Five-point central stencil: truncation error O(h^4), so a
            // larger step keeps rounding noise small.
            let original = store.get(id).value.data()[i];
            let mut at = |k: f64| -> Result<(f64, u64)> {
                work.get_mut(id).value.data_mut()[i] = original + k * cfg.step;
                evaluate(&work)
            };
            let points = [at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?];
            work.get_mut(id).value.data_mut()[i] = original;
            if points.iter().any(|&(_, sig)| sig != base_signature) {
                report.skipped += 1;
                continue;
            }
            let [p2, p1, m1, m2] = points.map(|(v, _)| v);
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * cfg.step);
            let a = analytic.get(id)[i];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(Mismatch {
                    param: store.get(id).name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: err,
                });
            }
        }
    }
    Ok(report)
}
