//! Evaluation: free-space violation, contact overlap, category divergence and
//! detection mAP.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{box_footprint, iou2d, iou3d, BinaryMask, OrientedBox};
use crate::scenegen::{ContactHuman, SceneLayout};

/// Additive smoothing applied to category frequencies.
pub const KL_SMOOTHING: f64 = 1e-6;
/// 3D IoU needed for a detection to match.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty scene set")]
    Empty,
    #[error("scenes mix room types")]
    CatalogueMismatch,
    #[error("{0} generated scenes but {1} conditionings")]
    LengthMismatch(usize, usize),
}

/// Fraction of free-space cells covered by any object footprint.
pub fn interpenetration(scene: &SceneLayout, free: &BinaryMask) -> f64 {
    let total = free.count();
    if total == 0 {
        return 0.0;
    }
    let mut covered = BinaryMask::empty(free.grid);
    for o in &scene.objects {
        covered.fill_convex(&box_footprint(&o.bbox));
    }
    let hit = covered.and(free).expect("same grid").count();
    hit as f64 / total as f64
}

/// Mean over contact humans of the best 2D and best 3D IoU against any
/// generated object whose category supports the contact class. `None` when
/// there are no contacts.
pub fn contact_iou_stats(scene: &SceneLayout, contacts: &[ContactHuman]) -> Option<(f64, f64)> {
    if contacts.is_empty() {
        return None;
    }
    let cat = scene.catalogue();
    let (mut s2, mut s3) = (0.0, 0.0);
    for h in contacts {
        let (mut b2, mut b3) = (0.0f64, 0.0f64);
        for o in scene.objects.iter().filter(|o| o.category < cat.len() && cat.supports(o.category, h.class)) {
            b2 = b2.max(iou2d(&h.bbox, &o.bbox));
            b3 = b3.max(iou3d(&h.bbox, &o.bbox));
        }
        s2 += b2;
        s3 += b3;
    }
    let n = contacts.len() as f64;
    Some((s2 / n, s3 / n))
}

fn category_histogram(scenes: &[SceneLayout]) -> Result<Vec<f64>, MetricsError> {
    let first = scenes.first().ok_or(MetricsError::Empty)?;
    if scenes.iter().any(|s| s.room_type != first.room_type) {
        return Err(MetricsError::CatalogueMismatch);
    }
    let mut counts = vec![0.0; first.catalogue().len()];
    for o in scenes.iter().flat_map(|s| &s.objects) {
        if let Some(c) = counts.get_mut(o.category) {
            *c += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    let k = counts.len() as f64;
    Ok(counts
        .iter()
        .map(|c| (if total > 0.0 { c / total } else { 1.0 / k } + KL_SMOOTHING) / (1.0 + k * KL_SMOOTHING))
        .collect())
}

/// Smoothed per-category frequency, one entry per catalogue category.
pub fn category_frequencies(scenes: &[SceneLayout]) -> Result<Vec<f64>, MetricsError> {
    category_histogram(scenes)
}

/// `KL(P_ref || P_gen)` over object category frequencies, in nats.
pub fn category_kl(generated: &[SceneLayout], reference: &[SceneLayout]) -> Result<f64, MetricsError> {
    let g = category_histogram(generated)?;
    let r = category_histogram(reference)?;
    if generated[0].room_type != reference[0].room_type {
        return Err(MetricsError::CatalogueMismatch);
    }
    Ok(kl(&r, &g))
}

/// `sum p ln(p / q)` for two distributions on the same support.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum::<f64>().max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: usize,
    #[serde(rename = "box")]
    pub bbox: OrientedBox,
}

/// Area under the precision envelope, summed over recall steps.
fn average_precision(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / positives as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for i in 0..prec.len() {
        if rec[i] > last_r {
            ap += (rec[i] - last_r) * prec[i];
            last_r = rec[i];
        }
    }
    ap
}

/// Mean over categories (with at least one ground-truth box) of the average
/// precision, matching greedily by confidence at 3D IoU >= 0.5. `predictions`
/// and `truth` are per scene. `None` without any ground truth.
pub fn map_at_05(predictions: &[Vec<Detection>], truth: &[Vec<GroundTruth>]) -> Option<f64> {
    let mut cats: Vec<usize> = truth.iter().flatten().map(|g| g.category).collect();
    cats.sort_unstable();
    cats.dedup();
    if cats.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &c in &cats {
        let positives = truth.iter().flatten().filter(|g| g.category == c).count();
        let mut dets: Vec<(usize, &Detection)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(s, ds)| ds.iter().filter(|d| d.category == c).map(move |d| (s, d)))
            .collect();
        dets.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
        let mut used: Vec<Vec<bool>> = truth.iter().map(|t| vec![false; t.len()]).collect();
        let mut hits = Vec::with_capacity(dets.len());
        for (s, d) in dets {
            let gts = truth.get(s).map(Vec::as_slice).unwrap_or(&[]);
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, g)| g.category == c && !used[s][*j])
                .map(|(j, g)| (j, iou3d(&d.bbox, &g.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, v)) if v >= MATCH_IOU => {
                    used[s][j] = true;
                    hits.push(true);
                }
                _ => hits.push(false),
            }
        }
        sum += average_precision(&hits, positives);
    }
    Some(sum / cats.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub objects: usize,
    pub interpenetration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_2d_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_3d_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub interpenetration: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_2d_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_3d_iou: Option<f64>,
    pub category_kl: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map_at_05: Option<f64>,
    pub per_scene: Vec<SceneEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// One generated scene with what it was conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct EvalItem<'a> {
    pub scene: &'a SceneLayout,
    /// Per-object log-likelihood, used as detection confidence.
    pub confidences: Option<&'a [f64]>,
    pub free_mask: &'a BinaryMask,
    pub contacts: &'a [ContactHuman],
    /// The scene the conditioning came from, for mAP.
    pub reference: Option<&'a SceneLayout>,
}

/// Aggregate metrics. Contact IoUs average over all contact humans across
/// scenes; mAP compares contact-flagged generated objects against the
/// reference scenes' contact-flagged objects.
pub fn evaluate(items: &[EvalItem], references: &[SceneLayout]) -> Result<EvalReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::Empty);
    }
    let generated: Vec<SceneLayout> = items.iter().map(|i| i.scene.clone()).collect();
    let category_kl = category_kl(&generated, references)?;
    let mut per_scene = Vec::with_capacity(items.len());
    let (mut s2, mut s3, mut humans) = (0.0, 0.0, 0usize);
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for it in items {
        let inter = interpenetration(it.scene, it.free_mask);
        let stats = contact_iou_stats(it.scene, it.contacts);
        if let Some((a, b)) = stats {
            s2 += a * it.contacts.len() as f64;
            s3 += b * it.contacts.len() as f64;
            humans += it.contacts.len();
        }
        per_scene.push(SceneEval {
            objects: it.scene.objects.len(),
            interpenetration: inter,
            mean_2d_iou: stats.map(|s| s.0),
            mean_3d_iou: stats.map(|s| s.1),
        });
        if let Some(r) = it.reference {
            truth.push(
                r.objects.iter().filter(|o| o.contact_flag).map(|o| GroundTruth { category: o.category, bbox: o.bbox }).collect(),
            );
            preds.push(
                it.scene
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|(_, o)| o.contact_flag)
                    .map(|(k, o)| Detection {
                        category: o.category,
                        bbox: o.bbox,
                        confidence: it.confidences.and_then(|c| c.get(k).copied()).unwrap_or(0.0),
                    })
                    .collect(),
            );
        }
    }
    let n = items.len() as f64;
    Ok(EvalReport {
        scenes: items.len(),
        interpenetration: per_scene.iter().map(|s| s.interpenetration).sum::<f64>() / n,
        mean_2d_iou: (humans > 0).then(|| s2 / humans as f64),
        mean_3d_iou: (humans > 0).then(|| s3 / humans as f64),
        category_kl,
        map_at_05: map_at_05(&preds, &truth),
        per_scene,
        config_hash: None,
    })
}

impl EvalReport {
    /// Aligned plain-text summary table.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let cols = [
            ("Scenes", self.scenes.to_string()),
            ("Interpenetration", format!("{:.3}", self.interpenetration)),
            ("2D IoU", fmt(self.mean_2d_iou)),
            ("3D IoU", fmt(self.mean_3d_iou)),
            ("Category KL", format!("{:.4}", self.category_kl)),
            ("mAP@0.5", fmt(self.map_at_05)),
        ];
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for (i, (h, _)) in cols.iter().enumerate() {
            let _ = write!(out, "{}{:>w$}", if i > 0 { "  " } else { "" }, h, w = widths[i]);
        }
        out.push('\n');
        for (i, w) in widths.iter().enumerate() {
            let _ = write!(out, "{}{}", if i > 0 { "  " } else { "" }, "-".repeat(*w));
        }
        out.push('\n');
        for (i, (_, v)) in cols.iter().enumerate() {
            let _ = write!(out, "{}{:>w$}", if i > 0 { "  " } else { "" }, v, w = widths[i]);
        }
        out.push('\n');
        if let Some(h) = &self.config_hash {
            let _ = writeln!(out, "config {h}");
        }
        out
    }
}
