use std::collections::BTreeSet;

use dccrn_autograd::{Graph, Var};
use ndarray::{ArrayD, IxDyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::store::{ParamStore, Session};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Denominator floor of the relative error `|a - n| / max(|a|, |n|, floor)`,
    /// multiplied by `max(1, |f|)` because finite-difference round-off grows
    /// with the magnitude of the probed scalar `f`.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per array.
    pub max_entries_per_param: Option<usize>,
    /// Entries whose one-sided slopes differ by more than this (relative)
    /// sit on a kink and are skipped.
    pub kink_tol: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            max_entries_per_param: None,
            kink_tol: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst.take());
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Fixed random projection `sum(x * R)` turning any tensor into a scalar probe.
pub fn probe_projection(g: &Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = ArrayD::from_shape_simple_fn(IxDyn(&g.shape(x)), || rng.random_range(-1.0..1.0));
    g.sum(g.mul(x, g.constant(r)))
}

/// Compares backpropagated gradients of the scalar built by `probe` against
/// central finite differences for every entry (or a random subset) of the
/// named parameters.
pub fn grad_check<F>(store: &ParamStore, names: &[String], probe: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Session) -> Result<Var>,
{
    let wanted: BTreeSet<&str> = names.iter().map(String::as_str).collect();
    let g = Graph::new();
    let session = Session::new(&g, store, |n| wanted.contains(n));
    let root = probe(&session)?;
    let analytic = session.gradients(&g.backward(root));
    let f0 = g.scalar(root);
    let floor = opts.floor * f0.abs().max(1.0);

    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let session = Session::frozen(&g, store);
        let root = probe(&session)?;
        Ok(g.scalar(root))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    for name in names {
        let len = store
            .get(name)
            .ok_or_else(|| crate::Error::InvalidConfig(format!("unknown parameter {name}")))?
            .len();
        let zeros = ArrayD::zeros(store.get(name).unwrap().raw_dim());
        let grad = analytic.get(name).unwrap_or(&zeros);
        let entries: Vec<usize> = match opts.max_entries_per_param {
            Some(k) if k < len => sample(&mut rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for idx in entries {
            let original = store.get(name).unwrap().as_slice().unwrap()[idx];
            let mut at = |v: f64| -> Result<f64> {
                work.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] = v;
                eval(&work)
            };
            let fp = at(original + opts.eps)?;
            let fm = at(original - opts.eps)?;
            at(original)?;
            let right = (fp - f0) / opts.eps;
            let left = (f0 - fm) / opts.eps;
            let scale = right.abs().max(left.abs()).max(floor);
            if (right - left).abs() > opts.kink_tol * scale {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
