//! Training on randomly permuted, randomly truncated object sequences, and
//! autoregressive sampling with contact removal.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{adam_step, AdamConfig, Graph};
use crate::geometry::{iou2d, BinaryMask, FloorPolygon, OrientedBox, Vec3};
use crate::model::{mask_image, Condition, Element, ElementKind, Model, ModelError, Target};
use crate::scenegen::{derive_seed, ContactHuman, Normalization, ObjectInstance, RoomType, SceneLayout, TrainingSample};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at iteration {iteration} (loss {loss})")]
    Diverged { iteration: u64, loss: f64 },
    #[error("sample belongs to {found:?}, model was built for {expected} classes")]
    Catalogue { found: RoomType, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub rotation_augmentation: bool,
    pub contact_dropout: f64,
    pub seed: u64,
    /// Iterations per logged record.
    pub log_every: u64,
    /// Train without contacts or free-space channel (ablation).
    pub ablate_conditioning: bool,
    /// When set, the learning rate follows a cosine from `lr` down to this
    /// value over `iterations`; otherwise it stays constant.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
            iterations: 20_000,
            rotation_augmentation: true,
            contact_dropout: 0.5,
            seed: 0,
            log_every: 100,
            ablate_conditioning: false,
            final_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr, eps and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return bad("batch_size and log_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.contact_dropout) {
            return bad("contact_dropout must lie in [0, 1]");
        }
        if self.final_lr.is_some_and(|f| !(f >= 0.0)) {
            return bad("final_lr must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    /// Learning rate used at 0-based `iteration`.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.final_lr {
            Some(end) if self.iterations > 1 => {
                let p = (iteration.min(self.iterations - 1)) as f64 / (self.iterations - 1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * p).cos())
            }
            _ => self.lr,
        }
    }
}

pub fn object_element(o: &ObjectInstance, norm: &Normalization) -> Element {
    Element {
        active: false,
        kind: ElementKind::Object(o.category),
        t: norm.normalize_t(o.bbox.center),
        r: Normalization::normalize_yaw(o.bbox.yaw),
        s: norm.normalize_s(o.bbox.half_extents),
    }
}

pub fn contact_element(c: &ContactHuman, norm: &Normalization) -> Element {
    Element {
        active: c.active,
        kind: ElementKind::Contact(c.class.index()),
        t: norm.normalize_t(c.bbox.center),
        r: Normalization::normalize_yaw(c.bbox.yaw),
        s: norm.normalize_s(c.bbox.half_extents),
    }
}

pub fn object_target(o: &ObjectInstance, norm: &Normalization) -> Target {
    let e = object_element(o, norm);
    Target { class: o.category, t: e.t, r: e.r, s: e.s }
}

/// Box from normalized attributes.
pub fn target_box(t: &Target, norm: &Normalization) -> OrientedBox {
    let half = norm.denormalize_s(t.s);
    let half = Vec3::new(half.x.max(1e-3), half.y.max(1e-3), half.z.max(1e-3));
    OrientedBox::new(norm.denormalize_t(t.t), half, Normalization::denormalize_yaw(t.r))
}

/// Mark only the first contact active.
pub fn reset_active(contacts: &mut [ContactHuman]) {
    for (i, c) in contacts.iter_mut().enumerate() {
        c.active = i == 0;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub condition: Condition,
    pub target: Target,
    pub prefix_len: usize,
    pub object_count: usize,
    pub contacts_dropped: bool,
    pub angle: f64,
    /// Conditioning contacts after augmentation, in token order.
    pub contacts: Vec<ContactHuman>,
}

/// One (condition, target) pair: random rotation, random object order,
/// uniform prefix length, removal of contacts an object in the context already
/// covers (the inference rule) and contact dropout.
pub fn make_training_instance(
    sample: &TrainingSample,
    model: &Model,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingInstance, PipelineError> {
    let angle = if cfg.rotation_augmentation { rng.gen_range(0.0..TAU) } else { 0.0 };
    instance_with_angle(sample, model, cfg, angle, rng)
}

/// [`make_training_instance`] with a fixed rotation angle.
pub fn instance_with_angle(
    sample: &TrainingSample,
    model: &Model,
    cfg: &TrainConfig,
    angle: f64,
    rng: &mut impl Rng,
) -> Result<TrainingInstance, PipelineError> {
    let mcfg = &model.config;
    if sample.scene.catalogue().len() != mcfg.object_classes {
        return Err(PipelineError::Catalogue { found: sample.scene.room_type, expected: mcfg.object_classes });
    }
    let n = sample.scene.objects.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let m = rng.gen_range(0..=n);
    let dropped = rng.gen_bool(cfg.contact_dropout);
    let norm = &sample.normalization;
    let rot = |o: &ObjectInstance| ObjectInstance { bbox: o.bbox.rotated_about_origin(angle), ..*o };
    let context: Vec<ObjectInstance> = order[..m].iter().map(|&i| rot(&sample.scene.objects[i])).collect();
    let target = match order.get(m) {
        Some(&i) => object_target(&rot(&sample.scene.objects[i]), norm),
        None => Target::end(mcfg),
    };
    let mut contacts: Vec<ContactHuman> = Vec::new();
    if !dropped && !cfg.ablate_conditioning {
        for c in &sample.contacts {
            let bbox = c.bbox.rotated_about_origin(angle);
            if !context.iter().any(|o| iou2d(&bbox, &o.bbox) > REMOVAL_IOU) {
                contacts.push(ContactHuman { bbox, ..*c });
            }
        }
    }
    reset_active(&mut contacts);
    let free = if cfg.ablate_conditioning { BinaryMask::empty(sample.free_mask.grid) } else { sample.free_mask.clone() };
    let image = mask_image(&sample.floor_mask, &free, angle, mcfg)?;
    let tokens = contacts
        .iter()
        .map(|c| contact_element(c, norm))
        .chain(context.iter().map(|o| object_element(o, norm)))
        .collect();
    Ok(TrainingInstance {
        condition: Condition { image, tokens },
        target,
        prefix_len: m,
        object_count: n,
        contacts_dropped: dropped,
        angle,
        contacts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: u64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-instance NLL of every iteration run.
    pub losses: Vec<f64>,
    pub records: Vec<LogRecord>,
}

fn batch_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, iteration.wrapping_add(0x7261_696e)))
}

/// Mean NLL of one batch, with gradients applied when `update` is set.
fn run_batch(model: &mut Model, batch: &[TrainingInstance], adam: Option<&AdamConfig>, iteration: u64) -> Result<f64, PipelineError> {
    let pairs: Vec<(&Condition, &Target)> = batch.iter().map(|i| (&i.condition, &i.target)).collect();
    let (loss, grads) = {
        let mut g = Graph::new(&model.params);
        let total = model.batch_nll(&mut g, &pairs)?;
        let mean = g.scale(total, 1.0 / batch.len() as f64);
        let loss = g.value(mean).item();
        if !loss.is_finite() {
            return Err(PipelineError::Diverged { iteration, loss });
        }
        let grads = match adam {
            Some(_) => Some(g.backward(mean).map_err(ModelError::from)?),
            None => None,
        };
        (loss, grads)
    };
    if let (Some(grads), Some(cfg)) = (grads, adam) {
        if !grads.all_finite() {
            return Err(PipelineError::Diverged { iteration, loss });
        }
        adam_step(&mut model.params, &grads, cfg).map_err(ModelError::from)?;
    }
    Ok(loss)
}

/// Adam on the mean NLL of random training instances. Iterations continue
/// from the model's optimizer step, so resuming a saved model reproduces an
/// uninterrupted run.
pub fn train(
    model: &mut Model,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    log: impl FnMut(&LogRecord),
) -> Result<TrainReport, PipelineError> {
    train_until(model, dataset, cfg, cfg.iterations, log)
}

/// [`train`] stopped after step `stop` (capped at `cfg.iterations`), for
/// periodic checkpointing; the schedule still spans `cfg.iterations`.
pub fn train_until(
    model: &mut Model,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    stop: u64,
    mut log: impl FnMut(&LogRecord),
) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut adam = cfg.adam();
    let start = model.params.step();
    let mut report = TrainReport { losses: Vec::new(), records: Vec::new() };
    let mut window = (0.0, 0u64);
    for it in start..stop.min(cfg.iterations) {
        adam.lr = cfg.lr_at(it);
        let mut rng = batch_rng(cfg.seed, it);
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let s = &dataset[rng.gen_range(0..dataset.len())];
                make_training_instance(s, model, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let loss = run_batch(model, &batch, Some(&adam), it)?;
        // adam_step bumps the step counter even at lr = 0, so resumption stays aligned.
        report.losses.push(loss);
        window.0 += loss;
        window.1 += 1;
        if (it + 1) % cfg.log_every == 0 || it + 1 == cfg.iterations {
            let rec = LogRecord { iteration: it + 1, nll: window.0 / window.1 as f64 };
            log(&rec);
            report.records.push(rec);
            window = (0.0, 0);
        }
    }
    Ok(report)
}

/// Mean NLL over a fixed, seeded set of instances (`per_sample` per scene).
pub fn evaluate_nll(
    model: &Model,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    per_sample: usize,
    seed: u64,
) -> Result<f64, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(dataset.len() * per_sample);
    for s in dataset {
        for _ in 0..per_sample {
            instances.push(make_training_instance(s, model, cfg, &mut rng)?);
        }
    }
    let mut total = 0.0;
    for chunk in instances.chunks(64) {
        let pairs: Vec<(&Condition, &Target)> = chunk.iter().map(|i| (&i.condition, &i.target)).collect();
        let mut g = Graph::new(&model.params);
        let v = model.batch_nll(&mut g, &pairs)?;
        total += g.value(v).item();
    }
    Ok(total / instances.len() as f64)
}

/// Contacts are removed once a generated object overlaps them by more than this.
pub const REMOVAL_IOU: f64 = 0.5;

/// Drop every contact whose footprint IoU with `object` exceeds 0.5 and
/// make the first survivor active.
pub fn remove_contacted(contacts: &[ContactHuman], object: &OrientedBox) -> Vec<ContactHuman> {
    let mut out: Vec<ContactHuman> = contacts.iter().filter(|c| iou2d(&c.bbox, object) <= REMOVAL_IOU).copied().collect();
    reset_active(&mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub max_objects: usize,
    pub temperature: f64,
    pub resample_attempts: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { max_objects: 30, temperature: 1.0, resample_attempts: 3 }
    }
}

/// Conditioning for one generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub room_type: RoomType,
    pub floor: FloorPolygon,
    pub floor_mask: BinaryMask,
    pub free_mask: BinaryMask,
    pub contacts: Vec<ContactHuman>,
    pub normalization: Normalization,
}

impl Conditioning {
    pub fn from_sample(sample: &TrainingSample) -> Self {
        Self {
            room_type: sample.scene.room_type,
            floor: sample.scene.floor.clone(),
            floor_mask: sample.floor_mask.clone(),
            free_mask: sample.free_mask.clone(),
            contacts: sample.contacts.clone(),
            normalization: sample.normalization,
        }
    }

    /// Same room without contacts or free-space humans.
    pub fn ablated(&self) -> Self {
        Self { free_mask: BinaryMask::empty(self.free_mask.grid), contacts: Vec::new(), ..self.clone() }
    }
}

/// Mutable state of one generation.
#[derive(Debug, Clone)]
pub struct GenerationState {
    pub image: Vec<f64>,
    pub remaining: Vec<ContactHuman>,
    pub objects: Vec<ObjectInstance>,
    pub step: usize,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub scene: SceneLayout,
    pub truncated: bool,
    /// Model log-likelihood of each emitted object.
    pub log_likelihoods: Vec<f64>,
    /// Remaining contact count before each step and after the last.
    pub remaining_trace: Vec<usize>,
    pub rejected: usize,
}

/// Autoregressive sampling until the end symbol or `max_objects` steps.
pub fn sample_scene(
    model: &Model,
    cond: &Conditioning,
    cfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Generation, PipelineError> {
    if cond.room_type.catalogue().len() != model.config.object_classes {
        return Err(PipelineError::Catalogue { found: cond.room_type, expected: model.config.object_classes });
    }
    let norm = &cond.normalization;
    let mut remaining = cond.contacts.clone();
    reset_active(&mut remaining);
    let mut state = GenerationState {
        image: mask_image(&cond.floor_mask, &cond.free_mask, 0.0, &model.config)?,
        remaining,
        objects: Vec::new(),
        step: 0,
        max_steps: cfg.max_objects,
    };
    let mut out = Generation {
        scene: SceneLayout::empty(cond.room_type, cond.floor.clone()),
        truncated: false,
        log_likelihoods: Vec::new(),
        remaining_trace: Vec::new(),
        rejected: 0,
    };
    let mut ended = false;
    while state.step < state.max_steps {
        state.step += 1;
        out.remaining_trace.push(state.remaining.len());
        let condition = Condition {
            image: state.image.clone(),
            tokens: state
                .remaining
                .iter()
                .map(|c| contact_element(c, norm))
                .chain(state.objects.iter().map(|o| object_element(o, norm)))
                .collect(),
        };
        let mut accepted = None;
        for _ in 0..=cfg.resample_attempts {
            let (t, ll) = model.sample_next(&condition, cfg.temperature, rng)?;
            if t.class == model.config.end_class() {
                ended = true;
                break;
            }
            let bbox = target_box(&t, norm);
            if cond.floor.contains(bbox.center.floor()) {
                accepted = Some((t.class, bbox, ll));
                break;
            }
        }
        if ended {
            break;
        }
        let Some((category, bbox, ll)) = accepted else {
            out.rejected += 1;
            continue;
        };
        let before = state.remaining.len();
        state.remaining = remove_contacted(&state.remaining, &bbox);
        state.objects.push(ObjectInstance { category, bbox, contact_flag: state.remaining.len() < before });
        out.log_likelihoods.push(ll);
    }
    out.remaining_trace.push(state.remaining.len());
    out.truncated = !ended;
    out.scene.objects = state.objects;
    Ok(out)
}
