//! Parameterized building blocks on top of [`Graph`].

use std::ops::Range;

use rand::Rng;

use super::{ConvGeom, DiffError, Graph, ParamId, ParamStore, Tensor, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), in_dim, out_dim, bound, rng)?;
        let b = store.add_uniform(format!("{name}.b"), 1, out_dim, bound, rng)?;
        Ok(Self { w, b, in_dim, out_dim })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self, DiffError> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head attention with input and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, DiffError> {
        if heads == 0 || dim % heads != 0 {
            return Err(DiffError::Shape(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng)?,
            heads,
        })
    }

    /// Rows of `queries` in each segment's first range attend to rows of
    /// `context` in its second range.
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        context: Var,
        segments: Vec<(Range<usize>, Range<usize>)>,
    ) -> Result<Var, DiffError> {
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, segments)?;
        self.out.forward(g, a)
    }

    /// Self-attention within each row range.
    pub fn forward_self(&self, g: &mut Graph, x: Var, segments: &[Range<usize>]) -> Result<Var, DiffError> {
        let segs = segments.iter().map(|r| (r.clone(), r.clone())).collect();
        self.forward(g, x, x, segs)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self, DiffError> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer encoder block.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff: usize, rng: &mut impl Rng) -> Result<Self, DiffError> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: Mlp::new(store, &format!("{name}.ff"), dim, ff, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, segments: &[Range<usize>]) -> Result<Var, DiffError> {
        let h = self.ln1.forward(g, x)?;
        let h = self.attn.forward_self(g, h, segments)?;
        let x = g.add(x, h)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ff.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub geom: ConvGeom,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, geom: ConvGeom, rng: &mut impl Rng) -> Result<Self, DiffError> {
        let bound = 1.0 / (geom.patch_len() as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), geom.out_channels, geom.patch_len(), bound, rng)?;
        let b = store.add_uniform(format!("{name}.b"), 1, geom.out_channels, bound, rng)?;
        Ok(Self { w, b, geom })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, DiffError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.geom)
    }
}

/// Worst disagreement found by [`gradcheck`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients of the scalar built by `build` with central
/// differences of step `h`. At most `per_param` entries of each parameter are
/// probed (evenly spaced). Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck<F>(store: &mut ParamStore, build: F, h: f64, per_param: usize, floor: f64) -> Result<GradCheck, DiffError>
where
    F: Fn(&mut Graph) -> Result<Var, DiffError>,
{
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)?
    };
    let eval = |s: &ParamStore| -> Result<f64, DiffError> {
        let mut g = Graph::new(s);
        let loss = build(&mut g)?;
        Ok(g.value(loss).item())
    };
    let mut report = GradCheck { max_rel_err: 0.0, checked: 0, worst: None };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let step = (n / per_param.max(1)).max(1);
        for idx in (0..n).step_by(step).take(per_param) {
            let orig = store.get(id).data()[idx];
            store.get_mut(id).data_mut()[idx] = orig + h;
            let fp = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig - h;
            let fm = eval(store)?;
            store.get_mut(id).data_mut()[idx] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic.get(id).data()[idx];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((store.name(id).to_string(), idx, ana, num));
                }
            }
        }
    }
    Ok(report)
}
