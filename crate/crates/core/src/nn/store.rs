use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use dccrn_autograd::{BnStats, Gradients, Graph, Tensor, Var};
use ndarray::{arr0, Array1, ArrayD};

use crate::error::{Error, Result};

/// Weight of the previous running value in the batch-norm moving average.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

const STAT_FIELDS: [&str; 5] = ["mean_re", "mean_im", "var_rr", "var_ri", "var_ii"];

/// Named parameters plus non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    /// Copies every parameter and buffer whose name starts with `prefix`.
    pub fn copy_group_from(&mut self, other: &ParamStore, prefix: &str) {
        for (n, t) in other.params.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.params.insert(n.clone(), t.clone());
        }
        for (n, t) in other.buffers.iter().filter(|(n, _)| n.starts_with(prefix)) {
            self.buffers.insert(n.clone(), t.clone());
        }
    }

    /// Hash of the bit patterns of every array under `prefix`.
    pub fn group_hash(&self, prefix: &str) -> u64 {
        let mut h = DefaultHasher::new();
        for (n, t) in self.params.iter().chain(self.buffers.iter()).filter(|(n, _)| n.starts_with(prefix)) {
            n.hash(&mut h);
            t.shape().hash(&mut h);
            for v in t.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Registers running statistics (mean 0, covariance I, no updates yet).
    pub fn init_running_stats(&mut self, bn: &str, channels: usize) {
        for field in STAT_FIELDS {
            let init = if field == "var_rr" || field == "var_ii" { 1.0 } else { 0.0 };
            self.set_buffer(format!("{bn}.running_{field}"), Array1::from_elem(channels, init).into_dyn());
        }
        self.set_buffer(format!("{bn}.num_updates"), arr0(0.0).into_dyn());
    }

    pub fn running_updates(&self, bn: &str) -> u64 {
        self.buffer(&format!("{bn}.num_updates"))
            .and_then(|t| t.iter().next().copied())
            .unwrap_or(0.0) as u64
    }

    /// Running statistics of batch-norm layer `bn`; an error before the first
    /// train-mode update.
    pub fn running_stats(&self, bn: &str) -> Result<BnStats> {
        if self.running_updates(bn) == 0 {
            return Err(Error::MissingRunningStats(bn.to_string()));
        }
        let field = |f: &str| -> Result<Vec<f64>> {
            self.buffer(&format!("{bn}.running_{f}"))
                .map(|t| t.iter().copied().collect())
                .ok_or_else(|| Error::MissingRunningStats(format!("{bn}.running_{f}")))
        };
        Ok(BnStats {
            mean_re: field("mean_re")?,
            mean_im: field("mean_im")?,
            var_rr: field("var_rr")?,
            var_ri: field("var_ri")?,
            var_ii: field("var_ii")?,
        })
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running_stats(&mut self, bn: &str, batch: &BnStats) -> Result<()> {
        let fields = [
            &batch.mean_re,
            &batch.mean_im,
            &batch.var_rr,
            &batch.var_ri,
            &batch.var_ii,
        ];
        for (name, values) in STAT_FIELDS.iter().zip(fields) {
            let key = format!("{bn}.running_{name}");
            let buf = self
                .buffers
                .get_mut(&key)
                .ok_or_else(|| Error::MissingRunningStats(key.clone()))?;
            if buf.len() != values.len() {
                return Err(Error::ShapeMismatch(format!("{key}: {} vs {}", buf.len(), values.len())));
            }
            for (r, b) in buf.iter_mut().zip(values) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
        let count = self.running_updates(bn) as f64 + 1.0;
        self.set_buffer(format!("{bn}.num_updates"), arr0(count).into_dyn());
        Ok(())
    }

    /// Folds every statistic collected by a session into the running buffers.
    pub fn absorb_batch_stats(&mut self, stats: &[(String, BnStats)]) -> Result<()> {
        for (bn, batch) in stats {
            self.update_running_stats(bn, batch)?;
        }
        Ok(())
    }
}

/// Whether batch normalisation uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds a [`ParamStore`] to a [`Graph`] for one forward/backward pass.
///
/// Parameters accepted by `trainable` become gradient leaves; all others are
/// constants, so frozen groups get no gradient at all. Train-mode batch-norm
/// statistics are collected for the caller to fold into the store.
pub struct Session<'a> {
    pub g: &'a Graph,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: RefCell<BTreeMap<String, Var>>,
    batch_stats: RefCell<Vec<(String, BnStats)>>,
}

impl<'a> Session<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            g,
            store,
            trainable: Box::new(trainable),
            bound: RefCell::new(BTreeMap::new()),
            batch_stats: RefCell::new(Vec::new()),
        }
    }

    /// Session in which nothing is trainable.
    pub fn frozen(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self::new(g, store, |_| false)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?
            .clone();
        let v = if (self.trainable)(name) {
            self.g.param(value)
        } else {
            self.g.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn record_batch_stats(&self, bn: &str, stats: BnStats) {
        self.batch_stats.borrow_mut().push((bn.to_string(), stats));
    }

    pub fn take_batch_stats(&self) -> Vec<(String, BnStats)> {
        std::mem::take(&mut *self.batch_stats.borrow_mut())
    }

    /// Gradients of every bound trainable parameter (zeros where unreachable).
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter(|(_, v)| self.g.requires_grad(**v))
            .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v, &self.g.shape(*v))))
            .collect()
    }
}

/// Uniform `[-bound, bound]` tensor.
pub(crate) fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || rng.random_range(-bound..=bound))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_stats_follow_the_moving_average() {
        let mut store = ParamStore::new();
        store.init_running_stats("bn", 1);
        assert!(matches!(store.running_stats("bn"), Err(Error::MissingRunningStats(_))));
        let batches = [1.0, -2.0, 4.0];
        let (mut mean, mut var) = (0.0, 1.0);
        for b in batches {
            let stats = BnStats {
                mean_re: vec![b],
                mean_im: vec![-b],
                var_rr: vec![b * b],
                var_ri: vec![0.5 * b],
                var_ii: vec![2.0],
            };
            store.update_running_stats("bn", &stats).unwrap();
            mean = 0.9 * mean + 0.1 * b;
            var = 0.9 * var + 0.1 * b * b;
        }
        let s = store.running_stats("bn").unwrap();
        assert_eq!(store.running_updates("bn"), 3);
        assert!((s.mean_re[0] - mean).abs() < 1e-15);
        assert!((s.mean_im[0] + mean).abs() < 1e-15);
        assert!((s.var_rr[0] - var).abs() < 1e-15);
        // 0.1 * (0.81 * 0.5 + 0.9 * (-1.0) + 2.0)
        assert!((s.var_ri[0] - 0.1 * (0.81 * 0.5 - 0.9 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_are_constants() {
        let mut store = ParamStore::new();
        store.insert("a.w", ndarray::arr1(&[1.0, 2.0]).into_dyn());
        store.insert("b.w", ndarray::arr1(&[3.0]).into_dyn());
        let g = Graph::new();
        let s = Session::new(&g, &store, |n| n.starts_with("a."));
        let a = s.param("a.w").unwrap();
        let b = s.param("b.w").unwrap();
        assert!(g.requires_grad(a));
        assert!(!g.requires_grad(b));
        assert_eq!(s.param("a.w").unwrap(), a);
        let loss = g.add(g.sum(a), g.sum(b));
        let grads = s.gradients(&g.backward(loss));
        assert_eq!(grads.keys().collect::<Vec<_>>(), vec!["a.w"]);
    }

    #[test]
    fn group_hash_sees_single_bit_changes() {
        let mut store = ParamStore::new();
        store.insert("m.w", ndarray::arr1(&[1.0, 2.0]).into_dyn());
        store.insert("n.w", ndarray::arr1(&[1.0]).into_dyn());
        let before = store.group_hash("m.");
        let other = store.group_hash("n.");
        store.get_mut("m.w").unwrap()[[1]] = f64::from_bits(2f64.to_bits() + 1);
        assert_ne!(store.group_hash("m."), before);
        assert_eq!(store.group_hash("n."), other);
    }
}
