//! Named parameter store with AdamW optimizer state.

use std::collections::BTreeMap;

use super::tape::{Grads, Tape, Var};
use super::{Array, Real};

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Array,
    pub m: Array,
    pub v: Array,
}

/// All trainable parameters of a model, keyed by name.
///
/// Every parameter is registered exactly once; re-registration panics.
/// Iteration order is the sorted name order (BTreeMap), which keeps
/// checkpoints and updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, ParamEntry>,
    pub step: u64,
    pub skipped_steps: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Array) {
        assert!(
            !self.params.contains_key(name),
            "contract error: parameter {name:?} registered twice"
        );
        let m = Array::zeros(value.shape());
        let v = Array::zeros(value.shape());
        self.params
            .insert(name.to_string(), ParamEntry { value, m, v });
    }

    /// Register a parameter along with restored optimizer moments.
    pub fn register_with_state(&mut self, name: &str, value: Array, m: Array, v: Array) {
        assert!(
            !self.params.contains_key(name),
            "contract error: parameter {name:?} registered twice"
        );
        self.params
            .insert(name.to_string(), ParamEntry { value, m, v });
    }

    pub fn get(&self, name: &str) -> &Array {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("contract error: unknown parameter {name:?}"))
            .value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("contract error: unknown parameter {name:?}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Decoupled-weight-decay AdamW step, beta = (0.9, 0.999), eps = 1e-8.
    /// If any gradient entry is non-finite the whole step is skipped and the
    /// skip counter incremented.
    pub fn adamw_step(&mut self, grads: &BTreeMap<String, Array>, lr: Real, weight_decay: Real) {
        for g in grads.values() {
            if !g.all_finite() {
                self.skipped_steps += 1;
                return;
            }
        }
        self.step += 1;
        let (b1, b2, eps): (Real, Real, Real) = (0.9, 0.999, 1e-8);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, entry) in self.params.iter_mut() {
            // Decoupled decay applies even when a parameter saw no gradient.
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Array::zeros(entry.value.shape());
                    &zero
                }
            };
            assert_eq!(
                g.shape(),
                entry.value.shape(),
                "contract error: gradient shape mismatch for {name:?}"
            );
            for i in 0..entry.value.len() {
                let gi = g.data()[i];
                let m = &mut entry.m.data_mut()[i];
                *m = b1 * *m + (1.0 - b1) * gi;
                let v = &mut entry.v.data_mut()[i];
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let p = &mut entry.value.data_mut()[i];
                *p -= lr * mhat / (vhat.sqrt() + eps) + lr * weight_decay * *p;
            }
        }
    }
}

/// Binds store parameters onto a tape during a forward pass and collects
/// their gradients afterwards. A parameter bound several times (streamed
/// frames on one tape) gets its gradients summed.
pub struct ParamTape<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<(String, Var)>,
}

impl<'a> ParamTape<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore) -> Self {
        ParamTape {
            tape,
            store,
            bound: Vec::new(),
        }
    }

    /// Bind a named parameter as a differentiable leaf.
    pub fn param(&mut self, name: &str) -> Var {
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.push((name.to_string(), v));
        v
    }

    pub fn param_shape(&self, name: &str) -> &[usize] {
        self.store.get(name).shape()
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Sum gradients per parameter name.
    pub fn collect_grads(&self, grads: &Grads) -> BTreeMap<String, Array> {
        let mut out: BTreeMap<String, Array> = BTreeMap::new();
        for (name, var) in &self.bound {
            let g = match grads.get(*var) {
                Some(g) => g.clone(),
                None => continue,
            };
            match out.get_mut(name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}
