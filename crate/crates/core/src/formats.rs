//! On-disk formats: versioned JSON documents, binary checkpoints, the TOML
//! project config and top-down SVG renders.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::geometry::{box_footprint, BinaryMask, FloorPolygon, GridSpec, Vec2};
use crate::model::{Model, ModelConfig, ModelError};
use crate::pipeline::{SampleConfig, TrainConfig};
use crate::refine::RefineConfig;
use crate::scenegen::{ContactHuman, FreeSpaceHumans, RoomType, SceneGenConfig, SceneLayout};

pub const SCHEMA_VERSION: u32 = 1;
pub const UNITS: &str = "meters, radians";
const CHECKPOINT_MAGIC: &[u8; 8] = b"HSCKPT01";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("expected a {expected} document, found {found}")]
    Kind { expected: String, found: String },
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),
    #[error("checkpoint checksum mismatch (file is corrupt)")]
    Checksum,
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

/// A typed payload with a schema header.
pub trait DocumentKind: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Serialize)]
struct DocumentOut<'a, T> {
    schema_version: u32,
    kind: &'static str,
    units: &'static str,
    data: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentIn<T> {
    schema_version: u32,
    kind: String,
    #[allow(dead_code)]
    units: String,
    data: T,
}

pub fn to_json<T: DocumentKind>(value: &T) -> Result<String, FormatError> {
    let doc = DocumentOut { schema_version: SCHEMA_VERSION, kind: T::KIND, units: UNITS, data: value };
    let mut s = serde_json::to_string_pretty(&doc)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json<T: DocumentKind>(text: &str) -> Result<T, FormatError> {
    // Check the header before the body so version errors are not masked by
    // schema changes inside `data`.
    let kind = peek_kind(text)?;
    if kind != T::KIND {
        return Err(FormatError::Kind { expected: T::KIND.into(), found: kind });
    }
    let doc: DocumentIn<T> = serde_json::from_str(text)?;
    debug_assert_eq!(doc.kind, T::KIND);
    let _ = doc.schema_version;
    Ok(doc.data)
}

/// The `kind` field of a document, after checking its schema version.
pub fn peek_kind(text: &str) -> Result<String, FormatError> {
    #[derive(Deserialize)]
    struct Header {
        schema_version: u32,
        kind: String,
    }
    let h: Header = serde_json::from_str(text)?;
    if h.schema_version != SCHEMA_VERSION {
        return Err(FormatError::SchemaVersion { found: h.schema_version });
    }
    Ok(h.kind)
}

pub fn write_document<T: DocumentKind>(path: &Path, value: &T) -> Result<(), FormatError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, to_json(value)?).map_err(io_err(path))
}

pub fn read_document<T: DocumentKind>(path: &Path) -> Result<T, FormatError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_json(&text)
}

impl DocumentKind for crate::scenegen::TrainingSample {
    const KIND: &'static str = "training_sample";
}

impl DocumentKind for crate::pipeline::Conditioning {
    const KIND: &'static str = "conditioning";
}

impl DocumentKind for crate::metrics::EvalReport {
    const KIND: &'static str = "eval_report";
}

/// A generated or refined scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub scene: SceneLayout,
    #[serde(default)]
    pub truncated: bool,
    /// Per-object model log-likelihood.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub log_likelihoods: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl DocumentKind for SceneFile {
    const KIND: &'static str = "scene";
}

/// Humans used by refinement and rendering.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HumansFile {
    pub contacts: Vec<ContactHuman>,
    pub free: FreeSpaceHumans,
}

impl DocumentKind for HumansFile {
    const KIND: &'static str = "humans";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub room_type: RoomType,
    pub seed: u64,
    pub config_hash: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DocumentKind for Manifest {
    const KIND: &'static str = "manifest";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineTrace {
    pub scene: String,
    pub records: Vec<crate::refine::TraceRecord>,
    pub halvings: Vec<usize>,
}

impl DocumentKind for RefineTrace {
    const KIND: &'static str = "refine_trace";
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    model: ModelConfig,
    config_hash: String,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

/// Parameters, Adam moments and step count. Layout: magic, version (u32),
/// header length (u64), JSON header, then per tensor its values, first and
/// second moments as little-endian f64, and finally a SHA-256 of all
/// preceding bytes.
pub fn checkpoint_bytes(model: &Model, config_hash: &str) -> Result<Vec<u8>, FormatError> {
    let ps = &model.params;
    let tensors: Vec<TensorEntry> = ps
        .ids()
        .map(|id| {
            let t = ps.get(id);
            TensorEntry { name: ps.name(id).to_string(), rows: t.rows(), cols: t.cols() }
        })
        .collect();
    let header = CheckpointHeader { model: model.config.clone(), config_hash: config_hash.to_string(), step: ps.step(), tensors };
    let h = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(h.len() + ps.num_scalars() * 24 + 64);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for id in ps.ids() {
        let (m, v) = ps.moments(id);
        for t in [ps.get(id), m, v] {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// The model and the config hash it was trained under.
pub fn model_from_checkpoint(bytes: &[u8]) -> Result<(Model, String), FormatError> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < 20 + 32 {
        return Err(FormatError::Malformed("too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(FormatError::Checksum);
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::CheckpointVersion(version));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let hend = 20usize.checked_add(hlen).filter(|&e| e <= body.len()).ok_or_else(|| FormatError::Malformed("header length".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[20..hend])?;
    let mut model = Model::new(header.model.clone(), 0)?;
    let ids: Vec<_> = model.params.ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(FormatError::Malformed("tensor count does not match the model config".into()));
    }
    let mut cursor = &body[hend..];
    let mut take = |rows: usize, cols: usize| -> Result<Tensor, FormatError> {
        let n = rows * cols;
        if cursor.len() < n * 8 {
            return Err(FormatError::Malformed("tensor data".into()));
        }
        let (chunk, rest) = cursor.split_at(n * 8);
        cursor = rest;
        let data = chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Tensor::from_vec(rows, cols, data).map_err(|e| FormatError::Malformed(e.to_string()))
    };
    for (id, entry) in ids.into_iter().zip(&header.tensors) {
        let expected = model.params.get(id).shape();
        if model.params.name(id) != entry.name || expected != [entry.rows, entry.cols] {
            return Err(FormatError::Malformed(format!("tensor {} does not match the model", entry.name)));
        }
        let value = take(entry.rows, entry.cols)?;
        let m = take(entry.rows, entry.cols)?;
        let v = take(entry.rows, entry.cols)?;
        model.params.set_state(id, value, m, v).map_err(|e| FormatError::Malformed(e.to_string()))?;
    }
    if !cursor.is_empty() {
        return Err(FormatError::Malformed("trailing bytes".into()));
    }
    model.params.set_step(header.step);
    Ok((model, header.config_hash))
}

pub fn save_checkpoint(path: &Path, model: &Model, config_hash: &str) -> Result<(), FormatError> {
    let bytes = checkpoint_bytes(model, config_hash)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    // Write then rename so an interrupted save never leaves a half file.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, String), FormatError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    model_from_checkpoint(&bytes)
}

// ---------------------------------------------------------------------------
// Project config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub split: [f64; 3],
    pub grid_cells: usize,
    pub cell_size: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { scenes: 2000, split: [0.8, 0.1, 0.1], grid_cells: 72, cell_size: 0.1 }
    }
}

impl DatasetConfig {
    pub fn grid(&self) -> Result<GridSpec, FormatError> {
        GridSpec::centered(self.grid_cells, self.cell_size).map_err(|e| FormatError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint: "model.ckpt".into(), output_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub room_type: RoomType,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub scenegen: SceneGenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub refine: RefineConfig,
    pub paths: PathsConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self::for_room(RoomType::Bedroom)
    }
}

impl ProjectConfig {
    pub fn for_room(room_type: RoomType) -> Self {
        Self {
            room_type,
            seed: 0,
            dataset: DatasetConfig::default(),
            scenegen: SceneGenConfig::default(),
            model: ModelConfig::for_catalogue(room_type.catalogue().len()),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            refine: RefineConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Parse and validate. `model.object_classes` defaults to the room
    /// type's catalogue size.
    pub fn from_toml(text: &str) -> Result<Self, FormatError> {
        let mut value: toml::Table = toml::from_str(text)?;
        let room: RoomType = match value.get("room_type") {
            Some(v) => v.clone().try_into()?,
            None => RoomType::Bedroom,
        };
        let model = value.entry("model").or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(t) = model {
            t.entry("object_classes").or_insert_with(|| toml::Value::Integer(room.catalogue().len() as i64));
        }
        let cfg: ProjectConfig = toml::Value::Table(value).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let invalid = |e: &dyn std::fmt::Display| FormatError::Invalid(e.to_string());
        self.scenegen.validate().map_err(|e| invalid(&e))?;
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.refine.validate().map_err(|e| invalid(&e))?;
        self.dataset.grid()?;
        if self.model.object_classes != self.room_type.catalogue().len() {
            return Err(FormatError::Invalid(format!(
                "model.object_classes is {} but the {} catalogue has {} categories",
                self.model.object_classes,
                self.room_type.name(),
                self.room_type.catalogue().len()
            )));
        }
        let s = self.dataset.split;
        if s.iter().any(|r| !(*r >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(FormatError::Invalid("dataset.split must be non-negative and sum to 1".into()));
        }
        if self.sample.temperature <= 0.0 {
            return Err(FormatError::Invalid("sample.temperature must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

// ---------------------------------------------------------------------------
// SVG

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub pixels_per_meter: f64,
    pub margin: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { pixels_per_meter: 80.0, margin: 0.5 }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Top-down view: floor, free-space underlay, object footprints with labels,
/// contact boxes and walking paths. `x` runs right and `z` runs down.
pub fn render_svg(
    scene: &SceneLayout,
    free_mask: Option<&BinaryMask>,
    humans: Option<&HumansFile>,
    opts: &RenderOptions,
) -> String {
    let (lo, hi) = scene.floor.bounds();
    let k = opts.pixels_per_meter;
    let m = opts.margin;
    let px = |p: Vec2| ((p.x - lo.x + m) * k, (p.y - lo.y + m) * k);
    let w = (hi.x - lo.x + 2.0 * m) * k;
    let h = (hi.y - lo.y + 2.0 * m) * k;
    let points = |pts: &[Vec2]| {
        pts.iter()
            .map(|p| {
                let (x, y) = px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.2} {h:.2}">"#
    );
    let _ = writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r##"<polygon class="floor" points="{}" fill="#f2efe8" stroke="#333333" stroke-width="2"/>"##, points(scene.floor.vertices()));
    if let Some(mask) = free_mask {
        let _ = writeln!(s, r##"<g class="free-space" fill="#3c8dde" fill-opacity="0.3">"##);
        let g = mask.grid;
        for j in 0..g.height {
            let mut i = 0;
            while i < g.width {
                if !mask.get(i, j) {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < g.width && mask.get(i, j) {
                    i += 1;
                }
                let (x, y) = px(Vec2::new(g.origin.x + start as f64 * g.cell_size, g.origin.y + j as f64 * g.cell_size));
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}"/>"#,
                    (i - start) as f64 * g.cell_size * k,
                    g.cell_size * k
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    let cat = scene.catalogue();
    let _ = writeln!(s, r#"<g class="objects">"#);
    for o in &scene.objects {
        let name = cat.categories.get(o.category).map_or("unknown", |c| c.name);
        let fill = if o.contact_flag { "#e0a458" } else { "#9aa5b1" };
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="{fill}" fill-opacity="0.85" stroke="#222222" stroke-width="1"><title>{}</title></polygon>"##,
            points(&box_footprint(&o.bbox)),
            escape(name)
        );
        let (x, y) = px(o.bbox.center.floor());
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{y:.2}" font-size="10" text-anchor="middle" font-family="sans-serif">{}</text>"#, escape(name));
    }
    let _ = writeln!(s, "</g>");
    if let Some(hm) = humans {
        let _ = writeln!(s, r##"<g class="humans" fill="none" stroke="#c0392b" stroke-width="1.5">"##);
        for c in &hm.contacts {
            let dash = if c.active { "" } else { r#" stroke-dasharray="4 3""# };
            let _ = writeln!(s, r#"<polygon points="{}"{dash}/>"#, points(&box_footprint(&c.bbox)));
        }
        for w in &hm.free.walks {
            let _ = writeln!(s, r#"<polyline points="{}" stroke-opacity="0.6"/>"#, points(&w.points));
        }
        for (c, r) in &hm.free.standers {
            let (x, y) = px(*c);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{:.2}"/>"#, r * k);
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

/// Floor polygon of a scene rasterized on `grid`, for conditionings built
/// from a bare scene.
pub fn floor_mask(floor: &FloorPolygon, grid: &GridSpec) -> Result<BinaryMask, FormatError> {
    crate::geometry::rasterize_polygon(floor, grid).map_err(|e| FormatError::Invalid(e.to_string()))
}
