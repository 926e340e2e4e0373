//! Named parameter stores, freeze masks, initialisers and the Adam optimiser.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// Ordered collection of named tensors. Ids are insertion indices and stay stable.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(move |i| &mut self.tensors[i])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// True when both stores hold the same names with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape == b.shape
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            })
    }
}

/// Per-tensor trainability marker aligned with a [`ParamStore`]'s ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn all_trainable(n: usize) -> Self {
        Self { frozen: vec![false; n] }
    }

    pub fn all_frozen(n: usize) -> Self {
        Self { frozen: vec![true; n] }
    }

    pub fn from_frozen(frozen: Vec<bool>) -> Self {
        Self { frozen }
    }

    pub fn is_frozen(&self, id: usize) -> bool {
        self.frozen[id]
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn trainable(&self) -> Vec<bool> {
        self.frozen.iter().map(|f| !f).collect()
    }

    pub fn count_frozen(&self) -> usize {
        self.frozen.iter().filter(|f| **f).count()
    }
}

/// Gradients for one store; `None` where the tensor was frozen or unreached.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }

    pub fn sq_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.grads.iter_mut().flatten() {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// Scales all gradient sets jointly so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(sets: &mut [&mut Gradients<T>], max_norm: f64) -> f64 {
    let norm = sets.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / (norm + 1e-6));
        for g in sets.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam. Moment buffers are allocated lazily for tensors
/// that actually receive gradients, so frozen tensors never get state.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, n_tensors: usize) -> Self {
        Self { cfg, step: 0, moments: vec![None; n_tensors] }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Tensors marked frozen in `mask` are never written.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, mask: &FreezeMask) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (ob1, ob2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for id in 0..store.len() {
            if mask.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let p = store.by_id_mut(id);
            let (m, v) = self.moments[id].get_or_insert_with(|| (vec![T::zero(); g.numel()], vec![T::zero(); g.numel()]));
            for i in 0..g.numel() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + ob1 * gi;
                v[i] = b2 * v[i] + ob2 * gi * gi;
                p.data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, the usual linear-layer default.
pub fn init_uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

pub fn init_normal<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::new(shape, data)
}

/// Adds `{prefix}.w` as `[fan_in, fan_out]` and `{prefix}.b` as `[fan_out]`.
pub fn add_linear<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), init_uniform(rng, &[fan_in, fan_out], fan_in));
    store.insert(format!("{prefix}.b"), init_uniform(rng, &[fan_out], fan_in));
}

pub fn add_linear_zero<T: Real>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[fan_in, fan_out]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}
