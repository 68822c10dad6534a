use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use seascn_tensor::{Gradients, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name so iteration and serialization
/// are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Copies every tensor whose name and shape also exist in `other`.
    /// Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for (k, t) in self.tensors.iter_mut() {
            if let Some(src) = other.get(k) {
                if src.shape() == t.shape() {
                    *t = src.clone();
                    n += 1;
                }
            }
        }
        n
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Graph handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Panics on a missing name: parameter names are fixed by the module
    /// code that registered them.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name} not registered"),
        }
    }

    pub fn try_get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects parameter gradients by name; parameters the loss does not
    /// reach get zeros.
    pub fn collect_grads<T: Scalar>(&self, store: &ParamStore<T>, grads: &mut Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(store.get(name).expect("bound from store").shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal for layers followed by ReLU: std = sqrt(2 / fan_in).
    He,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    Zeros,
}

pub fn init_tensor<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Normal(s) => s,
        Init::Zeros => return Tensor::zeros(shape),
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_collect_round_trip_names() {
        let mut s = ParamStore::<f64>::new();
        s.insert("b", Tensor::full(&[2], 1.0));
        s.insert("a", Tensor::full(&[3], 2.0));
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let a = bound.get("a");
        let l = g.sum(a);
        let mut grads = g.backward(l);
        let gs = bound.collect_grads(&s, &mut grads);
        assert_eq!(gs.get("a").unwrap().data(), &[1.0; 3]);
        assert_eq!(gs.get("b").unwrap().data(), &[0.0; 2]);
        assert_eq!(s.names().collect::<Vec<_>>(), ["a", "b"]);
    }

    #[test]
    fn he_init_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = init_tensor(&mut rng, &[64, 32, 3, 3], 32 * 9, Init::He);
        let n = t.numel() as f64;
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var - 2.0 / 288.0).abs() < 0.1 * 2.0 / 288.0);
    }
}
