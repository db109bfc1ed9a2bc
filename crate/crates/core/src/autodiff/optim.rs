//! Named parameter storage with momentum-SGD and Adam updates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
struct AdamState {
    m: Vec<Real>,
    v: Vec<Real>,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    momentum: Option<Vec<Real>>,
    adam: Option<AdamState>,
}

impl Param {
    fn new(tensor: Tensor) -> Self {
        Param { tensor, momentum: None, adam: None }
    }

    fn grad(&self, name: &str) -> Result<&[Real]> {
        self.tensor.grad.as_deref().ok_or_else(|| Error::MissingGrad(name.to_string()))
    }

    /// Number of Adam steps taken on this parameter.
    pub fn adam_steps(&self) -> u64 {
        self.adam.as_ref().map_or(0, |a| a.step)
    }
}

/// Parameters keyed by name, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Serialized form of a store: names, shapes and values only.
#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    params: Vec<(String, [usize; 4], Vec<Real>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.params.insert(name.into(), Param::new(tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Binds `name` onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, name: &str, trainable: bool) -> Result<Var> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        Ok(tape.param(name, t, trainable))
    }

    /// Copies gradients of every trainable bound parameter from `tape`.
    pub fn pull_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.named_params() {
            if let Some(p) = self.params.get_mut(name) {
                let t = tape.tensor_with_grad(*var);
                if t.requires_grad {
                    p.tensor.grad = t.grad;
                }
            }
        }
    }

    /// Adds gradients of every trainable bound parameter from `tape` onto
    /// the stored ones (a missing gradient counts as zero).
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.named_params() {
            let Some(p) = self.params.get_mut(name) else { continue };
            let Some(g) = tape.grad(*var) else { continue };
            match p.tensor.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => p.tensor.grad = Some(g.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.grad = None;
        }
    }

    /// Clips the global gradient L2 norm to `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: Real) {
        let sq: Real = self
            .params
            .values()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter().map(|v| v * v))
            .sum();
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let f = max_norm / norm;
            for p in self.params.values_mut() {
                if let Some(g) = p.tensor.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= f);
                }
            }
        }
    }

    /// `v ← momentum·v + (grad + wd·w)`, `w ← w − lr·v`.
    pub fn sgd_step(&mut self, lr: Real, momentum: Real, weight_decay: Real) -> Result<()> {
        for (name, p) in &self.params {
            p.grad(name)?;
        }
        for p in self.params.values_mut() {
            let n = p.tensor.numel();
            let grad = p.tensor.grad.take().expect("checked above");
            let buf = p.momentum.get_or_insert_with(|| vec![0.0; n]);
            for ((w, g), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(buf.iter_mut()) {
                *v = momentum * *v + (g + weight_decay * *w);
                *w -= lr * *v;
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }

    /// Bias-corrected Adam with L2 decay folded into the gradient.
    pub fn adam_step(
        &mut self,
        lr: Real,
        betas: (Real, Real),
        weight_decay: Real,
        eps: Real,
    ) -> Result<()> {
        if eps <= 0.0 {
            return Err(Error::Config("adam eps must be positive".into()));
        }
        for (name, p) in &self.params {
            p.grad(name)?;
        }
        let (b1, b2) = betas;
        for p in self.params.values_mut() {
            let n = p.tensor.numel();
            let grad = p.tensor.grad.take().expect("checked above");
            let st = p.adam.get_or_insert_with(|| AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            st.step += 1;
            let c1 = 1.0 - b1.powi(st.step as i32);
            let c2 = 1.0 - b2.powi(st.step as i32);
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i] + weight_decay * *w;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * g;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * g * g;
                let mhat = st.m[i] / c1;
                let vhat = st.v[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
            p.tensor.grad = Some(grad);
        }
        Ok(())
    }

    /// JSON snapshot of parameter values (optimizer state is not saved).
    pub fn to_json(&self) -> String {
        let snap = Snapshot {
            format_version: 1,
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    let s = p.tensor.shape();
                    (k.clone(), [s.n, s.c, s.h, s.w], p.tensor.data().to_vec())
                })
                .collect(),
        };
        serde_json::to_string(&snap).expect("snapshot serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if snap.format_version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", snap.format_version)));
        }
        let mut store = ParamStore::new();
        for (name, dims, data) in snap.params {
            store.insert(name, Tensor::new(Shape::from(dims), data)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: Real, g: Real) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(w);
        t.grad = Some(vec![g]);
        s.insert("w", t);
        s
    }

    fn value(s: &ParamStore) -> Real {
        s.get("w").unwrap().data()[0]
    }

    #[test]
    fn plain_sgd() {
        let mut s = single(1.0, 0.5);
        s.sgd_step(0.1, 0.0, 0.0).unwrap();
        assert!((value(&s) - 0.95).abs() < 1e-12);
        assert_eq!(s.get("w").unwrap().grad.as_deref(), Some(&[0.5][..]));
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut s = single(1.25, 0.0);
        for _ in 0..5 {
            s.sgd_step(0.1, 0.9, 0.0).unwrap();
        }
        assert_eq!(value(&s), 1.25);
    }

    #[test]
    fn sgd_pure_decay() {
        let mut s = single(1.0, 0.0);
        s.sgd_step(0.1, 0.0, 1.0).unwrap();
        assert!((value(&s) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = single(0.0, 1.0);
        s.sgd_step(1.0, 0.5, 0.0).unwrap();
        s.sgd_step(1.0, 0.5, 0.0).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((value(&s) + 2.5).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_reported() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0));
        assert!(matches!(s.sgd_step(0.1, 0.0, 0.0), Err(Error::MissingGrad(n)) if n == "a"));
        assert!(matches!(s.adam_step(0.1, (0.9, 0.999), 0.0, 1e-8), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [0.3, -2.0, 1e-3] {
            let mut s = single(1.0, g);
            let lr = 1e-2;
            let eps = 1e-8;
            s.adam_step(lr, (0.5, 0.999), 0.0, eps).unwrap();
            let dw = value(&s) - 1.0;
            assert!((dw + lr * g / (g.abs() + eps)).abs() < 1e-9, "g={g} dw={dw}");
            assert_eq!(s.param("w").unwrap().adam_steps(), 1);
        }
    }

    #[test]
    fn adam_zero_grad_is_fixed_point() {
        let mut s = single(0.7, 0.0);
        for _ in 0..10 {
            s.adam_step(0.1, (0.9, 0.999), 0.0, 1e-8).unwrap();
        }
        assert_eq!(value(&s), 0.7);
    }

    #[test]
    fn adam_on_square_decreases_monotonically() {
        // Direct simulation of f(w) = w², grad = 2w.
        let mut s = single(1.0, 2.0);
        let mut prev = 1.0f64;
        for step in 0..100 {
            s.adam_step(0.01, (0.9, 0.999), 0.0, 1e-8).unwrap();
            let w = value(&s);
            if step >= 1 {
                assert!(w.abs() < prev.abs(), "step {step}: {w} !< {prev}");
            }
            prev = w;
            s.get_mut("w").unwrap().grad = Some(vec![2.0 * w]);
        }
    }

    #[test]
    fn adam_step_count_monotone() {
        let mut s = single(1.0, 1.0);
        let mut last = 0;
        for _ in 0..4 {
            s.adam_step(0.01, (0.9, 0.999), 1e-3, 1e-8).unwrap();
            let k = s.param("w").unwrap().adam_steps();
            assert!(k > last);
            last = k;
        }
    }

    #[test]
    fn adam_rejects_nonpositive_eps() {
        let mut s = single(1.0, 1.0);
        assert!(s.adam_step(0.01, (0.9, 0.999), 0.0, 0.0).is_err());
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new([1, 2, 1, 1], vec![0.1, -1.0 / 3.0]).unwrap());
        s.insert("b", Tensor::scalar(std::f64::consts::PI));
        let back = ParamStore::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
