//! SGD with momentum and weight decay, and the per-step training driver.

use rand::Rng;
use seascn_tensor::{Graph, Scalar};

use crate::config::{ProposalConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;

use super::{joint_loss, Detector, JointLossReport, Sample};

/// Heavy-ball SGD: `g += wd * w; v = momentum * v + g; w -= lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamStore<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.zeros_like(),
        }
    }

    /// Restores saved momentum buffers.
    pub fn with_velocity(velocity: ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &ParamStore<T> {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamStore<T>, lr: f64) {
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for (name, w) in params.iter_mut() {
            let v = self.velocity.get_mut(name).expect("velocity per parameter");
            let g = grads.get(name).expect("gradient per parameter");
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi + wd * *wi;
                *vi = mu * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for (_, t) in grads.iter_mut() {
            t.scale_inplace(s);
        }
    }
    norm
}

/// Loss and gradients of one batch, averaged over its samples.
pub fn batch_gradients<T: Scalar, R: Rng>(
    det: &Detector<T>,
    batch: &[Sample<T>],
    proposals: &ProposalConfig,
    train: &TrainConfig,
    rng: &mut R,
) -> Result<(JointLossReport, ParamStore<T>)> {
    let mut sums = [0.0f64; 3];
    let mut acc: Option<ParamStore<T>> = None;
    for s in batch {
        let mut g = Graph::new();
        let p = det.params().bind(&mut g);
        let l = det.loss_graph(&mut g, &p, s, proposals, train, rng)?;
        sums[0] += g.value(l.detection).item().as_f64();
        sums[1] += g.value(l.segmentation).item().as_f64();
        sums[2] += g.value(l.mask).item().as_f64();
        let mut grads = g.backward(l.total);
        let gs = p.collect_grads(det.params(), &mut grads);
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (name, t) in a.iter_mut() {
                    t.add_assign(gs.get(name).expect("same names"));
                }
            }
        }
    }
    let n = batch.len().max(1) as f64;
    let report = joint_loss(sums[0] / n, sums[1] / n, sums[2] / n, train.loss_weights)?;
    let mut grads = acc.unwrap_or_else(|| det.params().zeros_like());
    let inv = T::lit(1.0 / n);
    for (_, t) in grads.iter_mut() {
        t.scale_inplace(inv);
    }
    Ok((report, grads))
}

/// Forward, joint loss, backward and one SGD update at `step`'s learning
/// rate. A non-finite loss or gradient aborts before touching the weights.
pub fn train_step<T: Scalar, R: Rng>(
    det: &mut Detector<T>,
    opt: &mut Sgd<T>,
    batch: &[Sample<T>],
    proposals: &ProposalConfig,
    train: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<JointLossReport> {
    let (report, mut grads) = batch_gradients(det, batch, proposals, train, rng)?;
    let norm = clip_grad_norm(&mut grads, train.clip_grad_norm);
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient norm".into(),
            value: norm,
        });
    }
    opt.step(det.params_mut(), &grads, train.lr_at(step));
    Ok(report)
}
