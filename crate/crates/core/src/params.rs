//! Flat, named parameter storage shared by the optimizer and checkpoints.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub tensors: Vec<Tensor<T>>,
}

/// Gradient buffers laid out like a [`ParamStore`].
pub type Grads<T> = Vec<Vec<T>>;

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    /// He-normal weights with `std = gain * sqrt(1 / fan_in)`.
    pub fn add_normal<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> usize {
        let n: usize = shape.iter().product();
        let std = gain * (1.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
        self.push(name, shape, data)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        let n: usize = shape.iter().product();
        self.push(name, shape, vec![T::zero(); n])
    }

    fn push(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> usize {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
        self.tensors.len() - 1
    }

    #[inline]
    pub fn get(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.tensors.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
        }
    }
}

/// `acc += other`, elementwise over all tensors.
pub fn accumulate<T: Scalar>(acc: &mut Grads<T>, other: &Grads<T>) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

pub fn scale<T: Scalar>(g: &mut Grads<T>, s: T) {
    for v in g.iter_mut().flatten() {
        *v *= s;
    }
}
