use crate::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps `(input values, output value, output gradient)` to one optional
/// gradient per input.
pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Append-only tape. Every op evaluates eagerly and, when recording and any
/// input requires a gradient, stores its adjoint for [`Graph::backward`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    /// One hash of the active-unit pattern per ReLU, when tracking.
    relu_patterns: Option<Vec<u64>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            relu_patterns: None,
        }
    }

    /// A graph that never records adjoints; for inference.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            relu_patterns: None,
        }
    }

    /// An inference graph that also fingerprints which units every ReLU
    /// passes, so two evaluations can be checked for lying on the same
    /// linear piece.
    pub fn tracking_kinks() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
            relu_patterns: Some(Vec::new()),
        }
    }

    pub fn relu_patterns(&self) -> Option<&[u64]> {
        self.relu_patterns.as_deref()
    }

    pub(crate) fn note_relu(&mut self, input: Var) {
        if self.relu_patterns.is_none() {
            return;
        }
        // FNV-1a over the sign bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &v in self.nodes[input.0].value.data() {
            h ^= u64::from(v > T::zero());
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        if let Some(p) = &mut self.relu_patterns {
            p.push(h);
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.recording;
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push<F>(&mut self, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let (parents, backward): (Vec<Var>, Option<BackwardFn<T>>) = if requires_grad {
            (parents.to_vec(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeded with ones. Gradients of intermediate
    /// nodes are released once propagated; leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let parent_grads = backward(&inputs, &node.value, &g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape(), "gradient shape");
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
