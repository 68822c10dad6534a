//! Layer descriptors: a parameter-name prefix plus static shape.

use rand::Rng;
use seascn_tensor::{Graph, Scalar, Var};

use crate::params::{init_tensor, Bound, Init, ParamStore};

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            ci,
            co,
            k,
            stride,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, init: Init) {
        let fan_in = self.ci * self.k * self.k;
        store.insert(
            self.weight_name(),
            init_tensor(rng, &[self.co, self.ci, self.k, self.k], fan_in, init),
        );
        store.insert(self.bias_name(), init_tensor(rng, &[self.co], fan_in, Init::Zeros));
    }

    /// "Same" padding for odd kernels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = p.get(&self.weight_name());
        let b = p.get(&self.bias_name());
        g.conv2d(x, w, Some(b), self.stride, self.k / 2)
    }

    pub fn forward_relu<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = self.forward(g, p, x);
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self {
            name: name.into(),
            input,
            output,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R, init: Init) {
        store.insert(
            format!("{}.weight", self.name),
            init_tensor(rng, &[self.output, self.input], self.input, init),
        );
        store.insert(
            format!("{}.bias", self.name),
            init_tensor(rng, &[self.output], self.input, Init::Zeros),
        );
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let w = p.get(&format!("{}.weight", self.name));
        let b = p.get(&format!("{}.bias", self.name));
        g.linear(x, w, b)
    }
}

/// A chain of `depth` 3x3 ReLU convolutions.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

impl ConvStack {
    pub fn new(prefix: &str, ci: usize, width: usize, depth: usize) -> Self {
        Self {
            layers: (0..depth)
                .map(|i| Conv::new(format!("{prefix}.{i}"), if i == 0 { ci } else { width }, width, 3, 1))
                .collect(),
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng, Init::He);
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, mut x: Var) -> Var {
        for l in &self.layers {
            x = l.forward_relu(g, p, x);
        }
        x
    }
}
