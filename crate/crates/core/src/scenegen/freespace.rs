use std::f64::consts::{FRAC_PI_4, PI};

use rand::Rng;

use super::{rng_for, FreeSpaceHumans, SceneGenConfig, SceneLayout, STREAM_FREE};
use crate::geometry::{box_footprint, segment_convex_distance, Polyline, Vec2};

const POINT_TRIES: usize = 50;
const MAX_SEGMENTS: usize = 5;
const HEADING_TRIES: usize = 8;

pub fn populate_free_space(scene: &SceneLayout, seed: u64, density: f64) -> FreeSpaceHumans {
    let cfg = SceneGenConfig { free_density: density, ..SceneGenConfig::default() };
    populate_free_space_with(scene, seed, &cfg)
}

/// Walkers and standers in object-free floor space. Counts are uniform in
/// `0..=floor(4 * density)` walks and `0..=floor(5 * density)` standers.
pub fn populate_free_space_with(scene: &SceneLayout, seed: u64, cfg: &SceneGenConfig) -> FreeSpaceHumans {
    let mut rng = rng_for(seed, STREAM_FREE);
    let max_walks = (4.0 * cfg.free_density).floor() as usize;
    let max_standers = (5.0 * cfg.free_density).floor() as usize;
    let n_walks = rng.gen_range(0..=max_walks);
    let n_standers = rng.gen_range(0..=max_standers);
    let r = cfg.foot_radius;
    let footprints: Vec<[Vec2; 4]> = scene.objects.iter().map(|o| box_footprint(&o.bbox)).collect();
    let clear = |a: Vec2, b: Vec2| {
        scene.floor.contains_capsule(a, b, r) && footprints.iter().all(|fp| segment_convex_distance(a, b, fp) >= r)
    };
    let (lo, hi) = scene.floor.bounds();
    let free_point = |rng: &mut dyn rand::RngCore| {
        (0..POINT_TRIES)
            .map(|_| Vec2::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y)))
            .find(|&p| clear(p, p))
    };

    let mut walks = Vec::new();
    for _ in 0..n_walks {
        let Some(start) = free_point(&mut rng) else { continue };
        let mut points = vec![start];
        let mut heading = rng.gen_range(-PI..PI);
        let segments = rng.gen_range(1..=MAX_SEGMENTS);
        for s in 0..segments {
            let p = *points.last().unwrap();
            let mut next = None;
            for attempt in 0..HEADING_TRIES {
                let turn = if s == 0 && attempt == 0 { 0.0 } else { rng.gen_range(-FRAC_PI_4..=FRAC_PI_4) };
                let h = heading + turn;
                let mut len = rng.gen_range(0.5..=1.5);
                // Later attempts also try shorter steps before giving up.
                if attempt >= HEADING_TRIES / 2 {
                    len *= 0.5;
                }
                let q = p + Vec2::new(h.cos(), h.sin()) * len;
                if clear(p, q) {
                    next = Some((q, h));
                    break;
                }
            }
            match next {
                Some((q, h)) => {
                    points.push(q);
                    heading = h;
                }
                None => break,
            }
        }
        if points.len() >= 2 {
            walks.push(Polyline { points, radius: r });
        }
    }

    let mut standers = Vec::new();
    for _ in 0..n_standers {
        if let Some(p) = free_point(&mut rng) {
            standers.push((p, r));
        }
    }
    FreeSpaceHumans { standers, walks }
}
