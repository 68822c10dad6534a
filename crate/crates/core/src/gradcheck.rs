//! Central finite-difference checks of reverse-mode parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use seascn_tensor::{Graph, Var};

use crate::error::Result;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates probed per tensor; smaller tensors are checked in full.
    pub per_tensor: usize,
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to rounding compare by absolute difference.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            per_tensor: 4,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// The two evaluations activated different ReLU units, so the central
    /// difference straddles a kink and is not a derivative estimate.
    pub crosses_kink: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    /// Probes where both evaluations lie on the same linear piece.
    pub fn smooth(&self) -> impl Iterator<Item = &Probe> {
        self.probes.iter().filter(|p| !p.crosses_kink)
    }

    pub fn kink_crossings(&self) -> usize {
        self.probes.iter().filter(|p| p.crosses_kink).count()
    }

    /// Largest relative error over the smooth probes.
    pub fn max_rel_error(&self) -> f64 {
        self.smooth().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.smooth().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Names of parameters that were probed.
    pub fn params(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.probes.iter().map(|p| p.param.as_str()).collect();
        v.dedup();
        v
    }
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the gradient of the scalar built by `loss` against central
/// differences, perturbing `params` in place (restored afterwards). `loss`
/// must be deterministic given the parameters. Probes whose two evaluations
/// switch any ReLU unit are flagged and left out of the error summary.
pub fn check_gradients<F>(params: &mut ParamStore<f64>, opts: &GradCheck, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let root = loss(&mut g, &p)?;
    let mut grads = g.backward(root);
    let analytic = p.collect_grads(params, &mut grads);
    drop(g);

    let mut eval = |params: &ParamStore<f64>| -> Result<(f64, Vec<u64>)> {
        let mut g = Graph::tracking_kinks();
        let p = params.bind(&mut g);
        let v = loss(&mut g, &p)?;
        let pattern = g.relu_patterns().unwrap_or_default().to_vec();
        Ok((g.value(v).item(), pattern))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let names: Vec<String> = params.names().cloned().collect();
    let mut probes = Vec::new();
    for name in names {
        let n = params.get(&name).expect("listed").numel();
        let idx: Vec<usize> = if n <= opts.per_tensor {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for i in idx {
            let orig = params.get(&name).expect("listed").data()[i];
            params.get_mut(&name).expect("listed").data_mut()[i] = orig + opts.step;
            let (up, up_pattern) = eval(params)?;
            params.get_mut(&name).expect("listed").data_mut()[i] = orig - opts.step;
            let (down, down_pattern) = eval(params)?;
            params.get_mut(&name).expect("listed").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.get(&name).expect("gradient per parameter").data()[i];
            probes.push(Probe {
                param: name.clone(),
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.floor),
                crosses_kink: up_pattern != down_pattern,
            });
        }
    }
    Ok(GradCheckReport { probes })
}
