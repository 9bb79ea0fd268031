//! Adam with bias correction and per-parameter step counts.

use crate::error::{structural, Result};
use crate::params::{Grads, Mat, ParamStore};

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Mat,
    v: Mat,
    steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Vec::new(),
        }
    }

    /// Updates every parameter that has a gradient; the others, and their
    /// moment estimates, are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let slot = &mut self.state[id.index()];
            let st = slot.get_or_insert_with(|| Moments {
                m: Mat::zeros(g.dim()),
                v: Mat::zeros(g.dim()),
                steps: 0,
            });
            st.steps += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            st.m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            st.v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let c1 = 1.0 - b1.powi(st.steps as i32);
            let c2 = 1.0 - b2.powi(st.steps as i32);
            let (lr, eps) = (self.lr, self.eps);
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&st.m)
                .and(&st.v)
                .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
        }
    }

    /// Moment estimates as a named store (`m:<name>`, `v:<name>`) plus a
    /// `1 × n` step-count row under `steps`, aligned with `params`.
    pub fn state_store(&self, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        let mut steps = Mat::zeros((1, params.len()));
        for (id, name, value) in params.iter() {
            let st = self.state.get(id.index()).and_then(Option::as_ref);
            let (m, v) = match st {
                Some(st) => {
                    steps[[0, id.index()]] = st.steps as f64;
                    (st.m.clone(), st.v.clone())
                }
                None => (Mat::zeros(value.dim()), Mat::zeros(value.dim())),
            };
            out.insert(format!("m:{name}"), m);
            out.insert(format!("v:{name}"), v);
        }
        out.insert("steps", steps);
        out
    }

    pub fn from_state_store(lr: f64, params: &ParamStore, state: &ParamStore) -> Result<Self> {
        let mut adam = Adam::new(lr);
        let steps = state
            .id("steps")
            .map(|id| state.get(id))
            .filter(|s| s.dim() == (1, params.len()))
            .ok_or_else(|| structural("optimizer state lacks a matching step row"))?;
        adam.state = vec![None; params.len()];
        for (id, name, value) in params.iter() {
            let n = steps[[0, id.index()]] as u64;
            if n == 0 {
                continue;
            }
            let get = |key: String| {
                state
                    .id(&key)
                    .map(|i| state.get(i).clone())
                    .filter(|m| m.dim() == value.dim())
                    .ok_or_else(|| structural(format!("optimizer state missing {key}")))
            };
            adam.state[id.index()] = Some(Moments {
                m: get(format!("m:{name}"))?,
                v: get(format!("v:{name}"))?,
                steps: n,
            });
        }
        Ok(adam)
    }
}
