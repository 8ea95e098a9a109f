//! Procedural rooms populated with abstract humans.
//!
//! A room is a floor polygon plus furniture boxes drawn from a per-room-type
//! catalogue. Contact humans are boxes attached to contactable furniture;
//! free-space humans are foot disks and walking strips that avoid all
//! furniture. Every generator is a pure function of its seed.

mod catalogue;
mod contacts;
mod freespace;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    box_footprint, iou2d, rasterize_free_space, rasterize_polygon, segment_convex_distance, BinaryMask, FloorPolygon,
    GeometryError, GridSpec, OrientedBox, Polyline, Vec2, Vec3,
};

pub use catalogue::{Catalogue, Category, Placement, RoomType};
pub use contacts::{contact_box, contact_points, populate_contacts, populate_contacts_with, suppress_contacts};
pub use freespace::{populate_free_space, populate_free_space_with};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid split ratios {0:?}")]
    InvalidRatios([f64; 3]),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactClass {
    Sitting,
    Touching,
    Lying,
}

impl ContactClass {
    pub const ALL: [ContactClass; 3] = [ContactClass::Sitting, ContactClass::Touching, ContactClass::Lying];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub contact_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub room_type: RoomType,
    pub floor: FloorPolygon,
    pub objects: Vec<ObjectInstance>,
}

impl SceneLayout {
    pub fn empty(room_type: RoomType, floor: FloorPolygon) -> Self {
        Self { room_type, floor, objects: Vec::new() }
    }

    pub fn catalogue(&self) -> &'static Catalogue {
        self.room_type.catalogue()
    }

    pub fn boxes(&self) -> Vec<OrientedBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }

    /// Rotate the floor and every object about the vertical axis through the
    /// origin.
    pub fn rotated(&self, angle: f64) -> Self {
        Self {
            room_type: self.room_type,
            floor: self.floor.rotated_about_origin(angle),
            objects: self
                .objects
                .iter()
                .map(|o| ObjectInstance { bbox: o.bbox.rotated_about_origin(angle), ..*o })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactHuman {
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub class: ContactClass,
    pub active: bool,
    /// Index of the supporting object in the scene, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host_category: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FreeSpaceHumans {
    pub standers: Vec<(Vec2, f64)>,
    pub walks: Vec<Polyline>,
}

impl FreeSpaceHumans {
    pub fn is_empty(&self) -> bool {
        self.standers.is_empty() && self.walks.is_empty()
    }

    pub fn rotated(&self, angle: f64) -> Self {
        Self {
            standers: self.standers.iter().map(|(c, r)| (c.rotate(angle), *r)).collect(),
            walks: self
                .walks
                .iter()
                .map(|w| Polyline { points: w.points.iter().map(|p| p.rotate(angle)).collect(), radius: w.radius })
                .collect(),
        }
    }
}

/// Affine maps between metric box attributes and `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub t_min: [f64; 3],
    pub t_max: [f64; 3],
    pub s_min: [f64; 3],
    pub s_max: [f64; 3],
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

fn from_unit(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (hi - lo)
}

impl Normalization {
    /// Bounds for a room type: translations cover any room rotated about the
    /// origin, sizes cover the jittered catalogue and contact boxes.
    pub fn for_room(room: RoomType, cfg: &SceneGenConfig) -> Self {
        let reach = cfg.max_side * std::f64::consts::FRAC_1_SQRT_2 + 0.05;
        let mut s_max = room.catalogue().max_half_extents();
        for s in &mut s_max {
            *s = *s * (1.0 + cfg.size_jitter) + 0.1;
        }
        Self {
            t_min: [-reach, 0.0, -reach],
            t_max: [reach, cfg.ceiling_height, reach],
            s_min: [0.0; 3],
            s_max,
        }
    }

    pub fn normalize_t(&self, t: Vec3) -> [f64; 3] {
        let a = t.to_array();
        std::array::from_fn(|i| to_unit(a[i], self.t_min[i], self.t_max[i]))
    }

    pub fn denormalize_t(&self, u: [f64; 3]) -> Vec3 {
        Vec3::from_array(std::array::from_fn(|i| from_unit(u[i], self.t_min[i], self.t_max[i])))
    }

    pub fn normalize_s(&self, s: Vec3) -> [f64; 3] {
        let a = s.to_array();
        std::array::from_fn(|i| to_unit(a[i], self.s_min[i], self.s_max[i]))
    }

    pub fn denormalize_s(&self, u: [f64; 3]) -> Vec3 {
        Vec3::from_array(std::array::from_fn(|i| from_unit(u[i], self.s_min[i], self.s_max[i])))
    }

    pub fn normalize_yaw(yaw: f64) -> f64 {
        (crate::geometry::wrap_angle(yaw) / PI).clamp(-1.0, 1.0)
    }

    pub fn denormalize_yaw(u: f64) -> f64 {
        crate::geometry::wrap_angle(u.clamp(-1.0, 1.0) * PI)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub scene: SceneLayout,
    pub contacts: Vec<ContactHuman>,
    pub free_humans: FreeSpaceHumans,
    pub floor_mask: BinaryMask,
    pub free_mask: BinaryMask,
    pub normalization: Normalization,
}

/// Generator knobs. Defaults follow the desk-scale dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub min_side: f64,
    pub max_side: f64,
    pub l_shape_probability: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub size_jitter: f64,
    pub ceiling_height: f64,
    pub max_rejections: usize,
    pub attempts_per_object: usize,
    pub max_object_iou: f64,
    pub contacts_min: usize,
    pub contacts_max: usize,
    pub contact_nms_threshold: f64,
    pub min_host_iou: f64,
    pub free_density: f64,
    pub foot_radius: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            min_side: 3.0,
            max_side: 7.0,
            l_shape_probability: 0.3,
            min_objects: 3,
            max_objects: 12,
            size_jitter: 0.15,
            ceiling_height: 2.8,
            max_rejections: 1000,
            attempts_per_object: 50,
            max_object_iou: 0.05,
            contacts_min: 0,
            contacts_max: 3,
            contact_nms_threshold: 0.5,
            min_host_iou: 0.3,
            free_density: 1.0,
            foot_radius: 0.2,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if !(self.min_side > 0.0 && self.min_side <= self.max_side) {
            return bad("room sides");
        }
        if self.min_objects > self.max_objects {
            return bad("object counts");
        }
        if self.contacts_min > self.contacts_max {
            return bad("contact counts");
        }
        if !(0.0..=1.0).contains(&self.l_shape_probability) || !(0.0..1.0).contains(&self.size_jitter) {
            return bad("probabilities");
        }
        if !(self.free_density >= 0.0) || !(self.foot_radius > 0.0) || !(self.ceiling_height > 0.0) {
            return bad("free space");
        }
        Ok(())
    }
}

/// Mix a master seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_ROOM: u64 = 1;
pub(crate) const STREAM_CONTACTS: u64 = 2;
pub(crate) const STREAM_FREE: u64 = 3;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Rectangular or L-shaped floor centered on the origin.
fn gen_floor(rng: &mut impl Rng, cfg: &SceneGenConfig) -> FloorPolygon {
    let w = rng.gen_range(cfg.min_side..=cfg.max_side);
    let d = rng.gen_range(cfg.min_side..=cfg.max_side);
    let (hx, hz) = (w / 2.0, d / 2.0);
    let verts = if rng.gen_bool(cfg.l_shape_probability) {
        let cw = w * rng.gen_range(0.3..0.5);
        let cd = d * rng.gen_range(0.3..0.5);
        // Remove the (+x, +z) corner, then rotate the outline by a multiple
        // of 90 degrees to pick which corner is missing.
        let base = [
            Vec2::new(-hx, -hz),
            Vec2::new(hx, -hz),
            Vec2::new(hx, hz - cd),
            Vec2::new(hx - cw, hz - cd),
            Vec2::new(hx - cw, hz),
            Vec2::new(-hx, hz),
        ];
        let quarter = rng.gen_range(0..4);
        base.iter().map(|v| rotate_quarter(*v, quarter)).collect()
    } else {
        vec![Vec2::new(-hx, -hz), Vec2::new(hx, -hz), Vec2::new(hx, hz), Vec2::new(-hx, hz)]
    };
    FloorPolygon::new(verts).expect("constructed outline is simple")
}

fn rotate_quarter(v: Vec2, quarter: u32) -> Vec2 {
    (0..quarter).fold(v, |p, _| Vec2::new(-p.y, p.x))
}

/// Yaw whose local +z axis points along `dir` on the floor.
pub fn yaw_facing(dir: Vec2) -> f64 {
    (-dir.x).atan2(dir.y)
}

fn try_place(cat: &Category, floor: &FloorPolygon, rng: &mut impl Rng, cfg: &SceneGenConfig) -> Option<OrientedBox> {
    let j = cfg.size_jitter;
    let half = Vec3::new(
        cat.size[0] / 2.0 * rng.gen_range(1.0 - j..=1.0 + j),
        cat.size[1] / 2.0 * rng.gen_range(1.0 - j..=1.0 + j),
        cat.size[2] / 2.0 * rng.gen_range(1.0 - j..=1.0 + j),
    );
    let (lo, hi) = floor.bounds();
    let random_point = |rng: &mut dyn rand::RngCore| Vec2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
    let axis_yaw = |rng: &mut dyn rand::RngCore| {
        if rng.gen_bool(0.8) {
            rng.gen_range(0..4) as f64 * FRAC_PI_2 + rng.gen_range(-0.05..0.05)
        } else {
            rng.gen_range(-PI..PI)
        }
    };
    let (c, yaw, y) = match cat.placement {
        Placement::Wall => {
            let edges: Vec<(Vec2, Vec2)> = floor.edges().collect();
            let lengths: Vec<f64> = edges.iter().map(|(a, b)| (*b - *a).norm()).collect();
            let total: f64 = lengths.iter().sum();
            let mut u = rng.gen_range(0.0..total);
            let mut k = edges.len() - 1;
            for (i, l) in lengths.iter().enumerate() {
                if u < *l {
                    k = i;
                    break;
                }
                u -= l;
            }
            let (a, b) = edges[k];
            let len = lengths[k];
            if len < 2.0 * half.x + 0.02 {
                return None;
            }
            let dir = (b - a) * (1.0 / len);
            let inward = Vec2::new(-dir.y, dir.x);
            let s = rng.gen_range(half.x + 0.01..=len - half.x - 0.01);
            let c = a + dir * s + inward * (half.z + 0.02);
            (c, yaw_facing(inward), half.y)
        }
        Placement::Floor => (random_point(rng), axis_yaw(rng), half.y),
        Placement::Ceiling => (random_point(rng), axis_yaw(rng), cfg.ceiling_height - half.y),
    };
    let b = OrientedBox::new(Vec3::new(c.x, y, c.y), half, yaw);
    floor.contains_convex(&box_footprint(&b)).then_some(b)
}

fn footprints_close(a: &OrientedBox, b: &OrientedBox) -> bool {
    let ra = a.half_extents.x.hypot(a.half_extents.z);
    let rb = b.half_extents.x.hypot(b.half_extents.z);
    (a.center.floor() - b.center.floor()).norm() < ra + rb
}

/// A room of the given type with default generator settings.
pub fn gen_room(room_type: RoomType, seed: u64) -> SceneLayout {
    gen_room_with(room_type, seed, &SceneGenConfig::default())
}

pub fn gen_room_with(room_type: RoomType, seed: u64, cfg: &SceneGenConfig) -> SceneLayout {
    let mut rng = rng_for(seed, STREAM_ROOM);
    let floor = gen_floor(&mut rng, cfg);
    let catalogue = room_type.catalogue();
    let priors = catalogue.priors();
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectInstance> = Vec::with_capacity(target);
    let mut rejections = 0;
    while objects.len() < target && rejections < cfg.max_rejections {
        let category = sample_index(&priors, &mut rng);
        let cat = &catalogue.categories[category];
        let mut placed = None;
        for _ in 0..cfg.attempts_per_object {
            if rejections >= cfg.max_rejections {
                break;
            }
            match try_place(cat, &floor, &mut rng, cfg) {
                Some(b)
                    if objects
                        .iter()
                        .all(|o| !footprints_close(&o.bbox, &b) || iou2d(&o.bbox, &b) <= cfg.max_object_iou) =>
                {
                    placed = Some(b);
                    break;
                }
                _ => rejections += 1,
            }
        }
        if let Some(bbox) = placed {
            objects.push(ObjectInstance { category, bbox, contact_flag: false });
        }
    }
    SceneLayout { room_type, floor, objects }
}

pub(crate) fn sample_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Rasterize masks, flag host objects and attach normalization bounds.
pub fn build_sample(
    scene: &SceneLayout,
    contacts: &[ContactHuman],
    free: &FreeSpaceHumans,
    grid: &GridSpec,
) -> Result<TrainingSample, SceneError> {
    build_sample_with(scene, contacts, free, grid, &SceneGenConfig::default())
}

pub fn build_sample_with(
    scene: &SceneLayout,
    contacts: &[ContactHuman],
    free: &FreeSpaceHumans,
    grid: &GridSpec,
    cfg: &SceneGenConfig,
) -> Result<TrainingSample, SceneError> {
    let floor_mask = rasterize_polygon(&scene.floor, grid)?;
    let free_mask = rasterize_free_space(&free.standers, &free.walks, &floor_mask);
    let mut scene = scene.clone();
    for o in &mut scene.objects {
        o.contact_flag = false;
    }
    for c in contacts {
        if let Some(h) = c.host {
            if let Some(o) = scene.objects.get_mut(h) {
                o.contact_flag = true;
            }
        }
    }
    Ok(TrainingSample {
        normalization: Normalization::for_room(scene.room_type, cfg),
        scene,
        contacts: contacts.to_vec(),
        free_humans: free.clone(),
        floor_mask,
        free_mask,
    })
}

/// Room, contacts and free-space humans for one seed, rasterized on `grid`.
pub fn generate_sample(room: RoomType, seed: u64, grid: &GridSpec, cfg: &SceneGenConfig) -> Result<TrainingSample, SceneError> {
    let scene = gen_room_with(room, seed, cfg);
    let contacts = populate_contacts_with(&scene, seed, cfg);
    let free = populate_free_space_with(&scene, seed, cfg);
    build_sample_with(&scene, &contacts, &free, grid, cfg)
}

/// Seeded shuffle followed by a split by `ratios` (train, val, test).
pub fn dataset_split<T>(items: Vec<T>, ratios: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>), SceneError> {
    if items.is_empty() {
        return Err(SceneError::EmptyInput);
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SceneError::InvalidRatios(ratios));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * ratios[0]).round() as usize).min(n);
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("each index once")).collect::<Vec<T>>();
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

impl TrainingSample {
    /// Check every dataset invariant; the error names the first violation.
    pub fn check_invariants(&self, cfg: &SceneGenConfig) -> Result<(), String> {
        let scene = &self.scene;
        let cat = scene.catalogue();
        let fps: Vec<[Vec2; 4]> = scene.objects.iter().map(|o| box_footprint(&o.bbox)).collect();
        for (i, o) in scene.objects.iter().enumerate() {
            let Some(c) = cat.categories.get(o.category) else {
                return Err(format!("object {i}: category {} out of range", o.category));
            };
            if !scene.floor.contains_convex(&fps[i]) {
                return Err(format!("object {i} leaves the floor"));
            }
            if c.placement != Placement::Ceiling && (o.bbox.center.y - o.bbox.half_extents.y).abs() > 1e-9 {
                return Err(format!("object {i} does not rest on the floor"));
            }
            for j in 0..i {
                let v = iou2d(&o.bbox, &scene.objects[j].bbox);
                if v > cfg.max_object_iou + 1e-12 {
                    return Err(format!("objects {j} and {i} overlap (iou2d {v})"));
                }
            }
        }
        for (k, &(c, r)) in self.free_humans.standers.iter().enumerate() {
            if !scene.floor.contains_disk(c, r) {
                return Err(format!("stander {k} leaves the floor"));
            }
            if fps.iter().any(|fp| segment_convex_distance(c, c, fp) < r) {
                return Err(format!("stander {k} hits an object"));
            }
        }
        for (k, w) in self.free_humans.walks.iter().enumerate() {
            for (a, b) in w.segments() {
                if !scene.floor.contains_capsule(a, b, w.radius) {
                    return Err(format!("walk {k} leaves the floor"));
                }
                if fps.iter().any(|fp| segment_convex_distance(a, b, fp) < w.radius) {
                    return Err(format!("walk {k} hits an object"));
                }
            }
        }
        if !self.free_mask.is_subset_of(&self.floor_mask) {
            return Err("free mask is not inside the floor mask".into());
        }
        let mut active = 0;
        for (k, h) in self.contacts.iter().enumerate() {
            let Some(host) = h.host.and_then(|i| scene.objects.get(i)) else {
                return Err(format!("contact {k} has no host"));
            };
            if !host.contact_flag {
                return Err(format!("contact {k}: host not flagged"));
            }
            if !cat.supports(host.category, h.class) {
                return Err(format!("contact {k}: host category cannot support {:?}", h.class));
            }
            let v = iou2d(&h.bbox, &host.bbox);
            if v < cfg.min_host_iou {
                return Err(format!("contact {k}: iou2d with host {v} < {}", cfg.min_host_iou));
            }
            active += h.active as usize;
        }
        if !self.contacts.is_empty() && active != 1 {
            return Err(format!("{active} active contact humans"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::centered(72, 0.1).unwrap()
    }

    #[test]
    fn same_seed_same_room() {
        for room in RoomType::ALL {
            assert_eq!(gen_room(room, 0), gen_room(room, 0));
        }
        assert_ne!(gen_room(RoomType::Bedroom, 0), gen_room(RoomType::Bedroom, 1));
    }

    #[test]
    fn rooms_satisfy_invariants() {
        let cfg = SceneGenConfig::default();
        for seed in 0..300 {
            let room = RoomType::ALL[seed as usize % 4];
            let s = generate_sample(room, seed, &grid(), &cfg).unwrap();
            s.check_invariants(&cfg).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            assert!(!s.scene.objects.is_empty());
            let (lo, hi) = s.scene.floor.bounds();
            for v in [hi.x - lo.x, hi.y - lo.y] {
                assert!((3.0..=7.0).contains(&v));
            }
        }
    }

    #[test]
    fn wall_objects_face_the_room() {
        let cfg = SceneGenConfig::default();
        for seed in 0..50 {
            let scene = gen_room(RoomType::Bedroom, seed);
            for o in &scene.objects {
                if scene.catalogue().categories[o.category].placement != Placement::Wall {
                    continue;
                }
                // Back face touches a wall (within the 2 cm gap); the front
                // point is further from every wall than the back point.
                let front = o.bbox.to_world(Vec3::new(0.0, 0.0, o.bbox.half_extents.z)).floor();
                let back = o.bbox.to_world(Vec3::new(0.0, 0.0, -o.bbox.half_extents.z)).floor();
                assert!(scene.floor.boundary_distance(back) < 0.03 + 1e-9);
                assert!(scene.floor.boundary_distance(front) > scene.floor.boundary_distance(back));
                let _ = &cfg;
            }
        }
    }

    #[test]
    fn build_sample_without_humans() {
        let scene = gen_room(RoomType::Living, 3);
        let s = build_sample(&scene, &[], &FreeSpaceHumans::default(), &grid()).unwrap();
        assert_eq!(s.free_mask.count(), 0);
        assert!(s.contacts.is_empty());
        assert!(s.scene.objects.iter().all(|o| !o.contact_flag));
    }

    #[test]
    fn build_sample_rejects_small_grid() {
        let scene = gen_room(RoomType::Living, 3);
        let small = GridSpec::centered(10, 0.1).unwrap();
        assert!(matches!(
            build_sample(&scene, &[], &FreeSpaceHumans::default(), &small),
            Err(SceneError::Geometry(GeometryError::GridTooSmall))
        ));
    }

    #[test]
    fn lying_human_flags_bed() {
        let cfg = SceneGenConfig { contacts_min: 3, contacts_max: 3, ..Default::default() };
        let mut seen = false;
        for seed in 0..200 {
            let s = generate_sample(RoomType::Bedroom, seed, &grid(), &cfg).unwrap();
            for h in s.contacts.iter().filter(|h| h.class == ContactClass::Lying) {
                let host = &s.scene.objects[h.host.unwrap()];
                assert!(host.contact_flag);
                seen = true;
            }
        }
        assert!(seen);
    }

    #[test]
    fn split_ratios_and_determinism() {
        let items: Vec<usize> = (0..100).collect();
        let (a, b, c) = dataset_split(items.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let again = dataset_split(items.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!((a.clone(), b, c), again);
        let mut all: Vec<usize> = a.into_iter().chain(again.1).chain(again.2).collect();
        all.sort();
        assert_eq!(all, items);
        let (t, v, te) = dataset_split(items, [1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!((t.len(), v.len(), te.len()), (100, 0, 0));
        assert!(matches!(dataset_split(Vec::<u8>::new(), [1.0, 0.0, 0.0], 0), Err(SceneError::EmptyInput)));
        assert!(dataset_split(vec![1], [0.5, 0.1, 0.1], 0).is_err());
    }

    #[test]
    fn normalization_round_trip() {
        let n = Normalization::for_room(RoomType::Bedroom, &SceneGenConfig::default());
        let t = Vec3::new(1.3, 0.4, -2.2);
        let back = n.denormalize_t(n.normalize_t(t));
        assert!((back - t).norm() < 1e-12);
        let s = Vec3::new(0.9, 0.3, 1.0);
        assert!((n.denormalize_s(n.normalize_s(s)) - s).norm() < 1e-12);
        let yaw = -2.5;
        assert!((Normalization::denormalize_yaw(Normalization::normalize_yaw(yaw)) - yaw).abs() < 1e-12);
    }

    #[test]
    fn yaw_facing_points_local_z_along_direction() {
        for dir in [Vec2::new(1.0, 0.0), Vec2::new(0.0, -1.0), Vec2::new(0.6, 0.8)] {
            let b = OrientedBox::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), yaw_facing(dir));
            let f = b.to_world(Vec3::new(0.0, 0.0, 1.0)).floor();
            assert!((f - dir).norm() < 1e-12);
        }
    }
}
