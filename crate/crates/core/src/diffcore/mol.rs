//! Discretized mixture-of-logistics likelihoods over the normalized range
//! `[-1, 1]`.
//!
//! The mass of a value `x` is `σ((x + b/2 - μ)/s) - σ((x - b/2 - μ)/s)`; the
//! lower CDF is pinned to 0 when `x - b/2` reaches -1 and the upper CDF to 1
//! when `x + b/2` reaches +1, so masses over the bin centers telescope to 1.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Lower clamp applied to log-scales before use.
pub const MIN_LOG_SCALE: f64 = -7.0;

/// Default number of discretization bins across `[-1, 1]`.
pub const DEFAULT_BINS: usize = 256;

/// Width of one bin when `[-1, 1]` is split into `bins` bins.
pub fn bin_width(bins: usize) -> f64 {
    2.0 / bins as f64
}

const EDGE_TOL: f64 = 1e-9;

/// Numerically stable `ln σ(a)`.
pub fn log_sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        -(-a).exp().ln_1p()
    } else {
        a - a.exp().ln_1p()
    }
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Log-mass of one logistic component plus its derivatives with respect to
/// the mean and the (already clamped) log-scale.
fn component_log_mass(x: f64, mean: f64, log_scale: f64, bin: f64) -> (f64, f64, f64) {
    let s = log_scale.exp();
    let lower_sat = x - bin / 2.0 <= -1.0 + EDGE_TOL;
    let upper_sat = x + bin / 2.0 >= 1.0 - EDGE_TOL;
    let a = (x + bin / 2.0 - mean) / s;
    let c = (x - bin / 2.0 - mean) / s;
    match (lower_sat, upper_sat) {
        (true, true) => (0.0, 0.0, 0.0),
        // Only the upper CDF term: ln σ(a).
        (true, false) => {
            let d = sigmoid(-a);
            (log_sigmoid(a), -d / s, -d * a)
        }
        // Only the lower CDF term: ln(1 - σ(c)) = ln σ(-c).
        (false, true) => {
            let d = sigmoid(c);
            (log_sigmoid(-c), d / s, d * c)
        }
        // σ(a) - σ(c) = σ(a) σ(-c) (1 - e^{-(a-c)}).
        (false, false) => {
            let delta = bin / s;
            let lm = log_sigmoid(a) + log_sigmoid(-c) + (-(-delta).exp_m1()).ln();
            let sa = sigmoid(-a);
            let sc = sigmoid(c);
            let d_mean = -sa / s + sc / s;
            let d_log_scale = -sa * a + sc * c - delta / delta.exp_m1();
            (lm, d_mean, d_log_scale)
        }
    }
}

/// Mixture parameters for one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureOfLogistics {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

impl MixtureOfLogistics {
    /// Unpacks the `[logits | means | log_scales]` layout used by the heads.
    pub fn from_packed(packed: &[f64]) -> Self {
        assert!(packed.len() % 3 == 0 && !packed.is_empty());
        let k = packed.len() / 3;
        Self {
            logits: packed[..k].to_vec(),
            means: packed[k..2 * k].to_vec(),
            log_scales: packed[2 * k..].to_vec(),
        }
    }

    pub fn components(&self) -> usize {
        self.logits.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.log_scales[k].max(MIN_LOG_SCALE).exp()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Log-probability of the bin around `x`.
pub fn mol_logprob(dist: &MixtureOfLogistics, x: f64, bin: f64) -> f64 {
    let packed: Vec<f64> = dist
        .logits
        .iter()
        .chain(&dist.means)
        .chain(&dist.log_scales)
        .copied()
        .collect();
    -mol_nll_with_grad(&packed, x, bin, None)
}

/// Negative log-probability for packed parameters; writes the gradient of
/// the NLL with respect to the packed parameters when `grad` is given.
pub(crate) fn mol_nll_with_grad(packed: &[f64], x: f64, bin: f64, grad: Option<&mut [f64]>) -> f64 {
    let k = packed.len() / 3;
    let (logits, rest) = packed.split_at(k);
    let (means, log_scales) = rest.split_at(k);
    let log_w = log_softmax(logits);
    let mut terms = Vec::with_capacity(k);
    let mut derivs = Vec::with_capacity(k);
    for j in 0..k {
        let clamped = log_scales[j] < MIN_LOG_SCALE;
        let ls = log_scales[j].max(MIN_LOG_SCALE);
        let (lm, dm, dls) = component_log_mass(x, means[j], ls, bin);
        terms.push(log_w[j] + lm);
        derivs.push((dm, if clamped { 0.0 } else { dls }));
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let logp = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    if let Some(g) = grad {
        for j in 0..k {
            let post = (terms[j] - logp).exp();
            let w = log_w[j].exp();
            g[j] = -(post - w);
            g[k + j] = -post * derivs[j].0;
            g[2 * k + j] = -post * derivs[j].1;
        }
    }
    -logp
}

/// Draw a value: pick a component by weight, then invert the logistic CDF.
/// The result is clamped to `[-1, 1]`.
pub fn mol_sample(dist: &MixtureOfLogistics, rng: &mut impl Rng) -> f64 {
    let w = dist.weights();
    let mut u = rng.gen::<f64>();
    let mut k = w.len() - 1;
    for (j, wj) in w.iter().enumerate() {
        if u < *wj {
            k = j;
            break;
        }
        u -= wj;
    }
    let v: f64 = rng.gen_range(1e-5..1.0 - 1e-5);
    (dist.means[k] + dist.scale(k) * (v.ln() - (-v).ln_1p())).clamp(-1.0, 1.0)
}
