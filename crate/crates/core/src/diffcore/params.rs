use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DiffError, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters together with their Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    by_name: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let [r, c] = value.shape();
        let id = self.values.len();
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.first_moment.push(Tensor::zeros(r, c));
        self.second_moment.push(Tensor::zeros(r, c));
        Ok(ParamId(id))
    }

    /// Uniform initialisation in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId, DiffError> {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Tensor, &Tensor) {
        (&self.first_moment[id.0], &self.second_moment[id.0])
    }

    /// Restore optimizer state (checkpoint loading).
    pub fn set_state(
        &mut self,
        id: ParamId,
        value: Tensor,
        m: Tensor,
        v: Tensor,
    ) -> Result<(), DiffError> {
        let shape = self.values[id.0].shape();
        if value.shape() != shape || m.shape() != shape || v.shape() != shape {
            return Err(DiffError::Shape(format!("state for '{}'", self.names[id.0])));
        }
        self.values[id.0] = value;
        self.first_moment[id.0] = m;
        self.second_moment[id.0] = v;
        Ok(())
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            grads: self.values.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// One Adam update with bias correction. `weight_decay` is L2 added to the
/// gradient (zero by default).
pub fn adam_step(params: &mut ParamStore, grads: &Gradients, cfg: &AdamConfig) -> Result<(), DiffError> {
    if grads.grads.len() != params.values.len() {
        return Err(DiffError::Shape("gradient count".into()));
    }
    for (p, g) in params.values.iter().zip(&grads.grads) {
        if p.shape() != g.shape() {
            return Err(DiffError::Shape("gradient shape".into()));
        }
    }
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..params.values.len() {
        let g = grads.grads[i].data();
        let p = params.values[i].data_mut();
        let m = params.first_moment[i].data_mut();
        let v = params.second_moment[i].data_mut();
        for j in 0..p.len() {
            let gj = g[j] + cfg.weight_decay * p[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
