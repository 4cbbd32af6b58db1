use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Learnable,
    /// Persistent state that is not learned (batch-norm running statistics,
    /// frozen backbone weights).
    Buffer,
}

/// Ordered collection of named tensors making up one model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    kinds: Vec<ParamKind>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            self.kinds[i] = kind;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.kinds.push(kind);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        self.kinds[i]
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, ParamKind)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .zip(&self.kinds)
            .map(|((n, t), k)| (n.as_str(), t, *k))
    }

    /// Number of learnable scalars.
    pub fn num_learnable(&self) -> usize {
        self.iter()
            .filter(|(_, _, k)| *k == ParamKind::Learnable)
            .map(|(_, t, _)| t.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t, kind) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8, kind as u8]);
            for d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Pushes every entry onto `g` as a leaf. Learnable entries require
    /// gradients only when `trainable` is set.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .iter()
            .map(|(_, t, k)| g.leaf(t.clone(), trainable && k == ParamKind::Learnable))
            .collect();
        Bound { vars }
    }

    /// He-uniform initialised conv weight plus zero bias.
    pub fn init_conv<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        cin_per_group: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
    ) {
        let fan_in = (cin_per_group * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let n = cout * cin_per_group * kernel * kernel;
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let w = Tensor::from_vec([cout, cin_per_group, kernel, kernel], data).expect("sized");
        self.insert(format!("{prefix}.w"), w, ParamKind::Learnable);
        if bias {
            self.insert(format!("{prefix}.b"), Tensor::zeros([1, cout, 1, 1]), ParamKind::Learnable);
        }
    }

    /// Batch-norm affine parameters and running statistics.
    pub fn init_bn(&mut self, prefix: &str, channels: usize, kind: ParamKind) {
        let shape = [1, channels, 1, 1];
        self.insert(format!("{prefix}.gamma"), Tensor::full(shape, 1.0), kind);
        self.insert(format!("{prefix}.beta"), Tensor::zeros(shape), kind);
        self.insert(format!("{prefix}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer);
        self.insert(format!("{prefix}.running_var"), Tensor::full(shape, 1.0), ParamKind::Buffer);
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::ConfigMismatch("parameter names differ".into()));
        }
        for (i, t) in other.tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// Graph handles for a [`ParamStore`], positionally aligned with it.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        let i = store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i]
    }

    /// Gradient per store entry after `g.backward`; `None` where no
    /// gradient reached the entry.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| g.grad(*v).cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per store entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f32>> = store.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn from_parts(cfg: AdamConfig, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Self {
        Self { cfg, step, m, v }
    }

    /// Applies one update to the learnable entries that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.cfg;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if store.kinds[i] != ParamKind::Learnable {
                continue;
            }
            let w = store.tensors[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]).unwrap(), ParamKind::Learnable);
        store.insert("buf", Tensor::full([1, 1, 1, 1], 5.0), ParamKind::Buffer);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let grads = vec![
            Some(Tensor::from_vec([1, 1, 1, 2], vec![0.5, -2.0]).unwrap()),
            Some(Tensor::full([1, 1, 1, 1], 1.0)),
        ];
        adam.update(&mut store, &grads);
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.999).abs() < 1e-6);
        assert!((w[1] + 0.999).abs() < 1e-6);
        assert_eq!(store.get("buf").unwrap().data(), &[5.0]);
    }

    #[test]
    fn checksum_tracks_values_and_names() {
        let mut a = ParamStore::new();
        a.insert("x", Tensor::zeros([1, 1, 1, 3]), ParamKind::Learnable);
        let mut b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut("x").unwrap().data_mut()[1] = 1e-30;
        assert_ne!(a.checksum(), b.checksum());
        let mut c = ParamStore::new();
        c.insert("y", Tensor::zeros([1, 1, 1, 3]), ParamKind::Learnable);
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn conv_param_count_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut s = ParamStore::new();
        s.init_conv(&mut rng, "c", 3, 8, 3, true);
        assert_eq!(s.num_learnable(), 3 * 3 * 3 * 8 + 8);
    }
}
