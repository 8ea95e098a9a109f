//! The layout network: mask encoder, shared element encoder, a transformer
//! over an unordered token set with a learnable query, and chained
//! attribute decoders (class, then translation, rotation, size).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::layers::{Conv2d, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::diffcore::mol::{bin_width, DEFAULT_BINS};
use crate::diffcore::{
    mol_logprob, mol_sample, sincos_encode_into, ConvGeom, DiffError, Graph, MixtureOfLogistics, ParamId, ParamStore,
    Tensor, Var,
};
use crate::geometry::{BinaryMask, GridSpec, Vec2};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("class {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("invalid attribute prefix: {0}")]
    Prefix(&'static str),
    #[error("floor and free-space masks are on different grids")]
    GridMismatch,
    #[error("invalid model config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub feedforward: usize,
    pub frequencies: usize,
    pub mixture_components: usize,
    pub mask_cells: usize,
    pub mask_cell_size: f64,
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub bins: usize,
    /// Object categories in the catalogue; the end symbol is one more class.
    pub object_classes: usize,
    pub contact_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            encoder_layers: 4,
            feedforward: 256,
            frequencies: 8,
            mixture_components: 4,
            mask_cells: 64,
            mask_cell_size: 0.1,
            conv_channels: vec![8, 16, 32, 32],
            embed_dim: 32,
            head_hidden: 128,
            bins: DEFAULT_BINS,
            object_classes: 21,
            contact_classes: 3,
        }
    }
}

impl ModelConfig {
    pub fn for_catalogue(object_classes: usize) -> Self {
        Self { object_classes, ..Self::default() }
    }

    /// Class count including the end symbol.
    pub fn class_count(&self) -> usize {
        self.object_classes + 1
    }

    pub fn end_class(&self) -> usize {
        self.object_classes
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.conv_channels.is_empty() || self.mask_cells >> self.conv_channels.len() == 0 {
            return bad("conv stack reduces the mask to nothing".into());
        }
        if self.mask_cells % (1 << self.conv_channels.len()) != 0 {
            return bad("mask size must be divisible by 2^conv_blocks".into());
        }
        if self.mixture_components == 0 || self.bins < 2 || self.object_classes == 0 || self.frequencies == 0 {
            return bad("empty heads".into());
        }
        if !(self.mask_cell_size > 0.0) {
            return bad("cell size".into());
        }
        Ok(())
    }

    pub fn mask_grid(&self) -> GridSpec {
        GridSpec::centered(self.mask_cells, self.mask_cell_size).expect("validated config")
    }

    pub fn bin_width(&self) -> f64 {
        bin_width(self.bins)
    }

    fn element_input_dim(&self) -> usize {
        1 + 7 * 2 * self.frequencies
    }
}

/// One conditioning or context element with attributes in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Element {
    pub active: bool,
    pub kind: ElementKind,
    pub t: [f64; 3],
    pub r: f64,
    pub s: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "class")]
pub enum ElementKind {
    Object(usize),
    Contact(usize),
}

/// Inputs for one prediction step.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    /// Floor and free-space channels, each `mask_cells^2`, channel-major.
    pub image: Vec<f64>,
    pub tokens: Vec<Element>,
}

/// A furniture prediction target (or the end symbol when `class` is the end
/// class; the attributes are then ignored).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub class: usize,
    pub t: [f64; 3],
    pub r: f64,
    pub s: [f64; 3],
}

impl Target {
    pub fn end(cfg: &ModelConfig) -> Self {
        Self { class: cfg.end_class(), t: [0.0; 3], r: 0.0, s: [0.0; 3] }
    }
}

/// Attributes realized so far while decoding, in canonical order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Prefix {
    pub class: Option<usize>,
    pub t: Option<[f64; 3]>,
    pub r: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttributeHead {
    Class(Vec<f64>),
    Translation([MixtureOfLogistics; 3]),
    Rotation(MixtureOfLogistics),
    Size([MixtureOfLogistics; 3]),
}

/// Stack floor and free-space masks into the model's 2-channel image,
/// resampled at the model grid's cell centers after rotating the scene by
/// `angle` about the origin.
pub fn mask_image(floor: &BinaryMask, free: &BinaryMask, angle: f64, cfg: &ModelConfig) -> Result<Vec<f64>, ModelError> {
    if floor.grid != free.grid {
        return Err(ModelError::GridMismatch);
    }
    let grid = cfg.mask_grid();
    let n = cfg.mask_cells;
    let mut out = vec![0.0; 2 * n * n];
    let aligned = angle == 0.0 && floor.grid == grid;
    for j in 0..n {
        for i in 0..n {
            let idx = j * n + i;
            if aligned {
                out[idx] = floor.get(i, j) as u8 as f64;
                out[n * n + idx] = free.get(i, j) as u8 as f64;
            } else {
                let p: Vec2 = grid.cell_center(i, j).rotate(-angle);
                out[idx] = floor.sample(p) as u8 as f64;
                out[n * n + idx] = free.sample(p) as u8 as f64;
            }
        }
    }
    Ok(out)
}

pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    convs: Vec<Conv2d>,
    mask_proj: Linear,
    embedding: ParamId,
    element_proj: Linear,
    query: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    class_head: Mlp,
    t_head: Mlp,
    t_proj: Linear,
    r_head: Mlp,
    r_proj: Linear,
    s_head: Mlp,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let c = &config;
        let mut convs = Vec::new();
        let (mut ch, mut size) = (2, c.mask_cells);
        for (i, &out) in c.conv_channels.iter().enumerate() {
            let geom = ConvGeom { in_channels: ch, height: size, width: size, out_channels: out, kernel: 3, stride: 2, padding: 1 };
            convs.push(Conv2d::new(&mut ps, &format!("mask.conv{i}"), geom, &mut rng)?);
            ch = out;
            size = geom.out_height();
        }
        let mask_proj = Linear::new(&mut ps, "mask.proj", ch * size * size, c.d_model, &mut rng)?;
        let table_rows = c.object_classes + c.contact_classes;
        let embedding = ps.add_uniform("embedding", table_rows, c.embed_dim, 1.0, &mut rng)?;
        let element_proj = Linear::new(&mut ps, "element.proj", c.element_input_dim() + c.embed_dim, c.d_model, &mut rng)?;
        let query = ps.add_uniform("query", 1, c.d_model, 1.0, &mut rng)?;
        let blocks = (0..c.encoder_layers)
            .map(|i| TransformerBlock::new(&mut ps, &format!("encoder.{i}"), c.d_model, c.heads, c.feedforward, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let final_ln = LayerNorm::new(&mut ps, "encoder.ln", c.d_model)?;
        let mol = 3 * c.mixture_components;
        let e = c.embed_dim;
        let class_head = Mlp::new(&mut ps, "head.class", c.d_model, c.head_hidden, c.class_count(), &mut rng)?;
        let t_head = Mlp::new(&mut ps, "head.t", c.d_model + e, c.head_hidden, 3 * mol, &mut rng)?;
        let t_proj = Linear::new(&mut ps, "head.t_embed", 3 * 2 * c.frequencies, e, &mut rng)?;
        let r_head = Mlp::new(&mut ps, "head.r", c.d_model + 2 * e, c.head_hidden, mol, &mut rng)?;
        let r_proj = Linear::new(&mut ps, "head.r_embed", 2 * c.frequencies, e, &mut rng)?;
        let s_head = Mlp::new(&mut ps, "head.s", c.d_model + 3 * e, c.head_hidden, 3 * mol, &mut rng)?;
        Ok(Self {
            config,
            params: ps,
            convs,
            mask_proj,
            embedding,
            element_proj,
            query,
            blocks,
            final_ln,
            class_head,
            t_head,
            t_proj,
            r_head,
            r_proj,
            s_head,
        })
    }

    fn embed_index(&self, kind: ElementKind) -> Result<usize, ModelError> {
        let c = &self.config;
        match kind {
            ElementKind::Object(k) if k < c.object_classes => Ok(k),
            ElementKind::Object(k) => Err(ModelError::ClassOutOfRange { class: k, count: c.object_classes }),
            ElementKind::Contact(k) if k < c.contact_classes => Ok(c.object_classes + k),
            ElementKind::Contact(k) => Err(ModelError::ClassOutOfRange { class: k, count: c.contact_classes }),
        }
    }

    /// Mask feature per image; `[images, d_model]`.
    pub fn encode_masks(&self, g: &mut Graph, images: &[&[f64]]) -> Result<Var, ModelError> {
        let n = self.convs[0].geom.in_len();
        let mut data = Vec::with_capacity(images.len() * n);
        for img in images {
            if img.len() != n {
                return Err(ModelError::GridMismatch);
            }
            data.extend_from_slice(img);
        }
        let mut x = g.input(Tensor::from_vec(images.len(), n, data)?);
        for conv in &self.convs {
            let y = conv.forward(g, x)?;
            x = g.gelu(y);
        }
        Ok(self.mask_proj.forward(g, x)?)
    }

    /// Token per element; `[elements, d_model]`.
    pub fn encode_elements(&self, g: &mut Graph, elements: &[Element]) -> Result<Var, ModelError> {
        let l = self.config.frequencies;
        let width = self.config.element_input_dim();
        let mut data = Vec::with_capacity(elements.len() * width);
        let mut idx = Vec::with_capacity(elements.len());
        for e in elements {
            idx.push(self.embed_index(e.kind)?);
            data.push(e.active as u8 as f64);
            for v in e.t.iter().chain(std::iter::once(&e.r)).chain(e.s.iter()) {
                sincos_encode_into(*v, l, &mut data);
            }
        }
        let attrs = g.input(Tensor::from_vec(elements.len(), width, data)?);
        let table = g.param(self.embedding);
        let emb = g.gather(table, &idx)?;
        let x = g.concat_cols(&[attrs, emb])?;
        Ok(self.element_proj.forward(g, x)?)
    }

    /// Query output per condition; `[conditions, d_model]`.
    pub fn predict_next(&self, g: &mut Graph, conds: &[&Condition]) -> Result<Var, ModelError> {
        let images: Vec<&[f64]> = conds.iter().map(|c| c.image.as_slice()).collect();
        let f = self.encode_masks(g, &images)?;
        let all: Vec<Element> = conds.iter().flat_map(|c| c.tokens.iter().copied()).collect();
        let tokens = if all.is_empty() { None } else { Some(self.encode_elements(g, &all)?) };
        let q = g.param(self.query);
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(conds.len());
        let mut query_rows = Vec::with_capacity(conds.len());
        let mut offset = 0;
        for (b, c) in conds.iter().enumerate() {
            let start = rows.len();
            rows.push((f, b));
            if let Some(t) = tokens {
                rows.extend((0..c.tokens.len()).map(|i| (t, offset + i)));
            }
            offset += c.tokens.len();
            query_rows.push(rows.len());
            rows.push((q, 0));
            segments.push(start..rows.len());
        }
        let mut x = g.gather_rows(&rows)?;
        for block in &self.blocks {
            x = block.forward(g, x, &segments)?;
        }
        let x = self.final_ln.forward(g, x)?;
        let picks: Vec<(Var, usize)> = query_rows.into_iter().map(|r| (x, r)).collect();
        Ok(g.gather_rows(&picks)?)
    }

    pub fn class_logits(&self, g: &mut Graph, qhat: Var) -> Result<Var, ModelError> {
        Ok(self.class_head.forward(g, qhat)?)
    }

    fn class_embedding(&self, g: &mut Graph, classes: &[usize]) -> Result<Var, ModelError> {
        for &k in classes {
            if k >= self.config.object_classes {
                return Err(ModelError::Prefix("continuous heads need a non-end class"));
            }
        }
        let table = g.param(self.embedding);
        Ok(g.gather(table, classes)?)
    }

    fn encoded(&self, g: &mut Graph, values: &[&[f64]]) -> Result<Var, ModelError> {
        let l = self.config.frequencies;
        let width = values.first().map_or(0, |v| v.len()) * 2 * l;
        let mut data = Vec::with_capacity(values.len() * width);
        for v in values {
            for x in *v {
                sincos_encode_into(*x, l, &mut data);
            }
        }
        Ok(g.input(Tensor::from_vec(values.len(), width, data)?))
    }

    /// Packed translation mixtures given realized classes; `[rows, 9K]`.
    pub fn t_params(&self, g: &mut Graph, qhat: Var, classes: &[usize]) -> Result<Var, ModelError> {
        let ek = self.class_embedding(g, classes)?;
        let x = g.concat_cols(&[qhat, ek])?;
        Ok(self.t_head.forward(g, x)?)
    }

    fn t_embed(&self, g: &mut Graph, t: &[[f64; 3]]) -> Result<Var, ModelError> {
        let vals: Vec<&[f64]> = t.iter().map(|v| v.as_slice()).collect();
        let enc = self.encoded(g, &vals)?;
        Ok(self.t_proj.forward(g, enc)?)
    }

    fn r_embed(&self, g: &mut Graph, r: &[f64]) -> Result<Var, ModelError> {
        let vals: Vec<&[f64]> = r.iter().map(std::slice::from_ref).collect();
        let enc = self.encoded(g, &vals)?;
        Ok(self.r_proj.forward(g, enc)?)
    }

    /// Packed rotation mixture given class and translation; `[rows, 3K]`.
    pub fn r_params(&self, g: &mut Graph, qhat: Var, classes: &[usize], t: &[[f64; 3]]) -> Result<Var, ModelError> {
        let ek = self.class_embedding(g, classes)?;
        let et = self.t_embed(g, t)?;
        let x = g.concat_cols(&[qhat, ek, et])?;
        Ok(self.r_head.forward(g, x)?)
    }

    /// Packed size mixtures given class, translation and rotation; `[rows, 9K]`.
    pub fn s_params(&self, g: &mut Graph, qhat: Var, classes: &[usize], t: &[[f64; 3]], r: &[f64]) -> Result<Var, ModelError> {
        let ek = self.class_embedding(g, classes)?;
        let et = self.t_embed(g, t)?;
        let er = self.r_embed(g, r)?;
        let x = g.concat_cols(&[qhat, ek, et, er])?;
        Ok(self.s_head.forward(g, x)?)
    }

    /// Summed negative log-likelihood of each target given its condition,
    /// with teacher forcing; `[batch, 1]` per term is reduced to a scalar sum.
    pub fn batch_nll(&self, g: &mut Graph, batch: &[(&Condition, &Target)]) -> Result<Var, ModelError> {
        let conds: Vec<&Condition> = batch.iter().map(|(c, _)| *c).collect();
        let qhat = self.predict_next(g, &conds)?;
        let logits = self.class_logits(g, qhat)?;
        let classes: Vec<usize> = batch.iter().map(|(_, t)| t.class).collect();
        for &k in &classes {
            if k >= self.config.class_count() {
                return Err(ModelError::ClassOutOfRange { class: k, count: self.config.class_count() });
            }
        }
        let ce = g.cross_entropy(logits, &classes)?;
        let mut total = g.sum(ce);
        let live: Vec<usize> = (0..batch.len()).filter(|&i| classes[i] != self.config.end_class()).collect();
        if !live.is_empty() {
            let q = g.gather_rows(&live.iter().map(|&i| (qhat, i)).collect::<Vec<_>>())?;
            let ks: Vec<usize> = live.iter().map(|&i| classes[i]).collect();
            let ts: Vec<[f64; 3]> = live.iter().map(|&i| batch[i].1.t).collect();
            let rs: Vec<f64> = live.iter().map(|&i| batch[i].1.r).collect();
            let ss: Vec<[f64; 3]> = live.iter().map(|&i| batch[i].1.s).collect();
            let bw = self.config.bin_width();
            let tp = self.t_params(g, q, &ks)?;
            let t_nll = g.mol_nll(tp, &Tensor::from_vec(ts.len(), 3, ts.iter().flatten().copied().collect())?, bw)?;
            let rp = self.r_params(g, q, &ks, &ts)?;
            let r_nll = g.mol_nll(rp, &Tensor::from_vec(rs.len(), 1, rs.clone())?, bw)?;
            let sp = self.s_params(g, q, &ks, &ts, &rs)?;
            let s_nll = g.mol_nll(sp, &Tensor::from_vec(ss.len(), 3, ss.iter().flatten().copied().collect())?, bw)?;
            for v in [t_nll, r_nll, s_nll] {
                let s = g.sum(v);
                total = g.add(total, s)?;
            }
        }
        Ok(total)
    }

    /// `log p(k) + log p(t|k) + log p(r|k,t) + log p(s|k,t,r)`; only the
    /// class term for the end symbol.
    pub fn logprob_object(&self, cond: &Condition, target: &Target) -> Result<f64, ModelError> {
        let mut g = Graph::new(&self.params);
        let nll = self.batch_nll(&mut g, &[(cond, target)])?;
        Ok(-g.value(nll).item())
    }

    pub fn query_output(&self, cond: &Condition) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new(&self.params);
        let q = self.predict_next(&mut g, &[cond])?;
        Ok(g.value(q).data().to_vec())
    }

    /// Head for the next attribute after `prefix`, evaluated at `qhat`.
    pub fn decode_distribution(&self, qhat: &[f64], prefix: &Prefix) -> Result<AttributeHead, ModelError> {
        let mut g = Graph::new(&self.params);
        let q = g.input(Tensor::from_vec(1, qhat.len(), qhat.to_vec())?);
        let k = self.config.mixture_components;
        let unpack = |v: &[f64], d: usize| MixtureOfLogistics::from_packed(&v[d * 3 * k..(d + 1) * 3 * k]);
        match (prefix.class, prefix.t, prefix.r) {
            (None, None, None) => {
                let l = self.class_logits(&mut g, q)?;
                Ok(AttributeHead::Class(g.value(l).data().to_vec()))
            }
            (Some(c), _, _) if c >= self.config.object_classes => {
                Err(ModelError::Prefix("the end symbol has no further attributes"))
            }
            (Some(c), None, None) => {
                let p = self.t_params(&mut g, q, &[c])?;
                let v = g.value(p).data();
                Ok(AttributeHead::Translation([unpack(v, 0), unpack(v, 1), unpack(v, 2)]))
            }
            (Some(c), Some(t), None) => {
                let p = self.r_params(&mut g, q, &[c], &[t])?;
                Ok(AttributeHead::Rotation(unpack(g.value(p).data(), 0)))
            }
            (Some(c), Some(t), Some(r)) => {
                let p = self.s_params(&mut g, q, &[c], &[t], &[r])?;
                let v = g.value(p).data();
                Ok(AttributeHead::Size([unpack(v, 0), unpack(v, 1), unpack(v, 2)]))
            }
            _ => Err(ModelError::Prefix("attributes must be realized in the order class, t, r, s")),
        }
    }

    /// Sample the next object (or the end symbol) and return it with its
    /// log-likelihood under the model.
    pub fn sample_next(&self, cond: &Condition, temperature: f64, rng: &mut impl Rng) -> Result<(Target, f64), ModelError> {
        let qhat = self.query_output(cond)?;
        let AttributeHead::Class(logits) = self.decode_distribution(&qhat, &Prefix::default())? else {
            unreachable!("empty prefix yields the class head")
        };
        let scaled: Vec<f64> = logits.iter().map(|l| l / temperature.max(1e-6)).collect();
        let probs = crate::diffcore::mol::softmax(&scaled);
        let class = crate::scenegen::sample_index(&probs, rng);
        let log_probs = crate::diffcore::mol::log_softmax(&logits);
        let mut ll = log_probs[class];
        if class == self.config.end_class() {
            return Ok((Target::end(&self.config), ll));
        }
        let bw = self.config.bin_width();
        let mut prefix = Prefix { class: Some(class), ..Prefix::default() };
        let AttributeHead::Translation(tm) = self.decode_distribution(&qhat, &prefix)? else { unreachable!() };
        let t: [f64; 3] = std::array::from_fn(|d| mol_sample(&tm[d], rng));
        ll += (0..3).map(|d| mol_logprob(&tm[d], t[d], bw)).sum::<f64>();
        prefix.t = Some(t);
        let AttributeHead::Rotation(rm) = self.decode_distribution(&qhat, &prefix)? else { unreachable!() };
        let r = mol_sample(&rm, rng);
        ll += mol_logprob(&rm, r, bw);
        prefix.r = Some(r);
        let AttributeHead::Size(sm) = self.decode_distribution(&qhat, &prefix)? else { unreachable!() };
        let s: [f64; 3] = std::array::from_fn(|d| mol_sample(&sm[d], rng));
        ll += (0..3).map(|d| mol_logprob(&sm[d], s[d], bw)).sum::<f64>();
        Ok((Target { class, t, r, s }, ll))
    }

    pub fn element_embedding_param(&self) -> ParamId {
        self.embedding
    }

    pub fn element_projection(&self) -> &Linear {
        &self.element_proj
    }
}
