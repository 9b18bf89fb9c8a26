//! Named parameter collections and their binding onto a tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::features::Section;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F> Default for ParamSet<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

/// The tape handles of a [`ParamSet`], in insertion order.
#[derive(Debug, Clone)]
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    /// Wraps handles given in the owning set's insertion order.
    pub fn new(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape.to_vec()).expect("positive extents"));
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::full(shape.to_vec(), F::one()).expect("positive extents"));
    }

    /// Truncated normal (±2σ) initialization.
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64, r: &mut rand_chacha::ChaCha8Rng) {
        let n = shape.iter().product();
        let data = (0..n).map(|_| F::from_f64_lossy(rng::truncated_normal(r, std))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("positive extents"));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.tensors[self.slot(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        let i = self.slot(name);
        &mut self.tensors[i]
    }

    fn slot(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Handle of parameter `name` in a binding of this set.
    pub fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.0[self.slot(name)]
    }

    /// Records every tensor on the tape; trainable ones as gradient leaves.
    pub fn bind(&self, tape: &mut Tape<F>) -> Result<Bound> {
        self.tensors.iter().map(|t| tape.insert(t)).collect::<Result<Vec<_>>>().map(Bound)
    }

    /// Records every tensor as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<F>) -> Result<Bound> {
        self.tensors.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>().map(Bound)
    }

    /// Gradients accumulated on the tape, zero where none reached.
    pub fn grads(&self, tape: &Tape<F>, bound: &Bound) -> Vec<Vec<F>> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &v)| tape.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.numel()]))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Order-sensitive FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01B3);
            }
        };
        for (name, t) in self.names.iter().zip(&self.tensors) {
            feed(name.as_bytes());
            for &e in t.shape() {
                feed(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                feed(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn to_sections(&self, prefix: &str) -> Vec<Section> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| Section {
                name: format!("{prefix}{name}"),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.as_f64() as f32).collect(),
            })
            .collect()
    }

    /// Overwrites every parameter from `sections` named `prefix + name`.
    pub fn load_sections(&mut self, prefix: &str, sections: &[Section]) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let full = format!("{prefix}{name}");
            let s = sections
                .iter()
                .find(|s| s.name == full)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {full}")))?;
            if s.shape != t.shape() {
                return Err(Error::dim(format!(
                    "checkpoint parameter {full} has shape {:?}, expected {:?}",
                    s.shape,
                    t.shape()
                )));
            }
            for (dst, &src) in t.data_mut().iter_mut().zip(&s.data) {
                *dst = F::from_f64_lossy(src as f64);
            }
        }
        Ok(())
    }
}
