//! Box classification and regression head.

use rand::Rng;
use seascn_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, Init, ParamStore};
use crate::supervision::DetectionTarget;

/// Two ReLU hidden layers, then `C + 1` class logits and `4C` class-specific
/// box deltas.
#[derive(Clone, Debug)]
pub struct BoxHead {
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
    input: usize,
    num_classes: usize,
}

impl BoxHead {
    pub fn new(channels: usize, roi_size: usize, hidden: usize, num_classes: usize) -> Self {
        let input = channels * roi_size * roi_size;
        Self {
            fc1: Linear::new("box.fc1", input, hidden),
            fc2: Linear::new("box.fc2", hidden, hidden),
            cls: Linear::new("box.cls", hidden, num_classes + 1),
            reg: Linear::new("box.reg", hidden, 4 * num_classes),
            input,
            num_classes,
        }
    }

    pub fn init<T: Scalar, R: Rng>(&self, store: &mut ParamStore<T>, rng: &mut R) {
        self.fc1.init(store, rng, Init::He);
        self.fc2.init(store, rng, Init::He);
        self.cls.init(store, rng, Init::Normal(0.01));
        self.reg.init(store, rng, Init::Normal(0.001));
    }

    /// `[n, c, s, s]` RoI features to `([n, C + 1], [n, 4C])`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, roi: Var) -> Result<(Var, Var)> {
        let shape = g.shape(roi).to_vec();
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        if d != self.input {
            return Err(Error::ChannelMismatch {
                what: "box head input".into(),
                expected: self.input,
                actual: d,
            });
        }
        let x = g.reshape(roi, &[n, d]);
        let h = self.fc1.forward(g, p, x);
        let h = g.relu(h);
        let h = self.fc2.forward(g, p, h);
        let h = g.relu(h);
        Ok((self.cls.forward(g, p, h), self.reg.forward(g, p, h)))
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

/// Mean softmax cross-entropy over all proposals plus the smooth-L1
/// (beta = 1) of the labeled class's deltas on foreground proposals, summed
/// and divided by the proposal count.
pub fn detection_loss<T: Scalar>(g: &mut Graph<T>, cls: Var, deltas: Var, targets: &[DetectionTarget]) -> Result<Var> {
    let (n, k) = g.value(cls).dims2()?;
    if targets.len() != n {
        return Err(Error::SizeMismatch {
            what: "detection targets",
            expected: (n, 1),
            actual: (targets.len(), 1),
        });
    }
    let c = k - 1;
    for t in targets {
        if t.label > c {
            return Err(Error::InvalidClass(t.label));
        }
    }
    let labels: Vec<usize> = targets.iter().map(|t| t.label).collect();
    let ce = g.softmax_cross_entropy(cls, &labels);
    let fg: Vec<usize> = (0..n).filter(|&i| targets[i].label > 0).collect();
    if fg.is_empty() {
        return Ok(ce);
    }
    let mut idx = Vec::with_capacity(4 * fg.len());
    let mut tgt = Vec::with_capacity(4 * fg.len());
    for &i in &fg {
        let base = i * 4 * c + (targets[i].label - 1) * 4;
        idx.extend(base..base + 4);
        tgt.extend(targets[i].deltas.iter().map(|&v| T::lit(v)));
    }
    let picked = g.gather(deltas, idx, &[fg.len(), 4]);
    let tgt = Tensor::from_vec(&[fg.len(), 4], tgt)?;
    let reg = g.smooth_l1(picked, &tgt, T::one());
    let reg = g.scale(reg, T::lit(1.0 / n as f64));
    Ok(g.add(ce, reg))
}
