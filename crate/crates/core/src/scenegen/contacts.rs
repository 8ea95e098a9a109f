use rand::Rng;

use super::{rng_for, sample_index, ContactClass, ContactHuman, SceneGenConfig, SceneLayout, STREAM_CONTACTS};
use crate::geometry::{contact_box_from_points, iou2d, nms3d_by_volume, OrientedBox, Vec3};

/// Seat height used for sitting boxes when the host is taller.
const SEAT_HEIGHT: f64 = 0.45;
/// Hand height used for touching boxes when the host is taller.
const REACH_HEIGHT: f64 = 1.2;
/// Distance a touching box protrudes past the host's front face.
const TOUCH_PROTRUSION: f64 = 0.1;

pub fn populate_contacts(scene: &SceneLayout, seed: u64) -> Vec<ContactHuman> {
    populate_contacts_with(scene, seed, &SceneGenConfig::default())
}

/// Attach contact humans to random contactable objects, suppress
/// duplicates by 3D IoU and drop boxes that barely touch their host.
pub fn populate_contacts_with(scene: &SceneLayout, seed: u64, cfg: &SceneGenConfig) -> Vec<ContactHuman> {
    let mut rng = rng_for(seed, STREAM_CONTACTS);
    let cat = scene.catalogue();
    let hosts: Vec<usize> = (0..scene.objects.len())
        .filter(|&i| !cat.categories[scene.objects[i].category].contacts.is_empty())
        .collect();
    let n = rng.gen_range(cfg.contacts_min..=cfg.contacts_max);
    if hosts.is_empty() || n == 0 {
        return Vec::new();
    }
    let mut raw = Vec::with_capacity(n);
    for _ in 0..n {
        let host = hosts[rng.gen_range(0..hosts.len())];
        let obj = &scene.objects[host];
        let classes = cat.categories[obj.category].contacts;
        let class = classes[sample_index(&vec![1.0; classes.len()], &mut rng)];
        let bbox = contact_box(&obj.bbox, class, &mut rng);
        raw.push(ContactHuman { bbox, class, active: false, host: Some(host), host_category: Some(obj.category) });
    }
    suppress_contacts(raw, scene, cfg)
}

/// 3D-IoU NMS (priority = volume), then drop boxes whose 2D IoU with the
/// host falls below `min_host_iou`. The first survivor becomes active.
pub fn suppress_contacts(raw: Vec<ContactHuman>, scene: &SceneLayout, cfg: &SceneGenConfig) -> Vec<ContactHuman> {
    let boxes: Vec<OrientedBox> = raw.iter().map(|h| h.bbox).collect();
    let mut kept: Vec<ContactHuman> = nms3d_by_volume(&boxes, cfg.contact_nms_threshold)
        .into_iter()
        .map(|i| raw[i])
        .filter(|h| h.host.and_then(|i| scene.objects.get(i)).is_some_and(|o| iou2d(&h.bbox, &o.bbox) >= cfg.min_host_iou))
        .collect();
    for h in &mut kept {
        h.active = false;
    }
    if let Some(first) = kept.first_mut() {
        first.active = true;
    }
    kept
}

/// Contact box for a human interacting with `host`, built from sampled
/// contact vertices in the host frame.
pub fn contact_box(host: &OrientedBox, class: ContactClass, rng: &mut impl Rng) -> OrientedBox {
    let h = host.half_extents;
    let (w, d) = (2.0 * h.x, 2.0 * h.z);
    let top = 2.0 * h.y;
    // Local region as (x range, y range above the floor, z range).
    let (xr, yr, zr) = match class {
        ContactClass::Sitting => {
            let width = (0.5 * rng.gen_range(0.8f64..1.2)).max(0.45 * w);
            let depth = 0.9 * d * rng.gen_range(0.8..1.2);
            let height = 0.6 * rng.gen_range(0.8..1.2);
            let slack = (w - width).max(0.0) / 2.0;
            let cx = if slack > 0.0 { rng.gen_range(-slack..=slack) } else { 0.0 };
            let cz = 0.05 * d * rng.gen_range(-1.0..=1.0);
            let seat = SEAT_HEIGHT.min(top);
            ((cx - width / 2.0, cx + width / 2.0), ((seat - height).max(0.0), seat), (cz - depth / 2.0, cz + depth / 2.0))
        }
        ContactClass::Lying => {
            let fx = rng.gen_range(0.75..0.95);
            let fz = rng.gen_range(0.75..0.95);
            let cx = rng.gen_range(-1.0..=1.0) * (1.0 - fx) * h.x;
            let cz = rng.gen_range(-1.0..=1.0) * (1.0 - fz) * h.z;
            let thick = 0.25 * rng.gen_range(0.8..1.2);
            ((cx - fx * h.x, cx + fx * h.x), (top, top + thick), (cz - fz * h.z, cz + fz * h.z))
        }
        ContactClass::Touching => {
            let width = w * rng.gen_range(0.7..=1.0);
            let inward = d * rng.gen_range(0.6..=0.9);
            let slack = (w - width) / 2.0;
            let cx = if slack > 0.0 { rng.gen_range(-slack..=slack) } else { 0.0 };
            let hand = REACH_HEIGHT.min(top);
            (
                (cx - width / 2.0, cx + width / 2.0),
                ((hand - 0.3).max(0.0), hand + 0.05),
                (h.z - inward, h.z + TOUCH_PROTRUSION),
            )
        }
    };
    let mut points = Vec::with_capacity(8 + 16);
    for &x in &[xr.0, xr.1] {
        for &y in &[yr.0, yr.1] {
            for &z in &[zr.0, zr.1] {
                points.push(Vec3::new(x, y, z));
            }
        }
    }
    for _ in 0..16 {
        points.push(Vec3::new(
            rng.gen_range(xr.0..=xr.1),
            rng.gen_range(yr.0..=yr.1),
            rng.gen_range(zr.0..=zr.1),
        ));
    }
    let world: Vec<Vec3> = points
        .iter()
        .map(|p| {
            let w = host.to_world(Vec3::new(p.x, 0.0, p.z));
            Vec3::new(w.x, p.y, w.z)
        })
        .collect();
    contact_box_from_points(&world, host.yaw).expect("non-empty point set")
}

/// Points where the body meets its support: the bottom face for sitting and
/// lying, and for touching the plane `TOUCH_PROTRUSION` inside the outer
/// face. `n` points per side.
pub fn contact_points(human: &ContactHuman, n: usize) -> Vec<Vec3> {
    let b = &human.bbox;
    let h = b.half_extents;
    let n = n.max(1);
    let lerp = |i: usize, half: f64| if n == 1 { 0.0 } else { -half + 2.0 * half * i as f64 / (n - 1) as f64 };
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let local = match human.class {
                ContactClass::Sitting | ContactClass::Lying => Vec3::new(lerp(i, h.x), -h.y, lerp(j, h.z)),
                ContactClass::Touching => {
                    let z = (h.z - TOUCH_PROTRUSION).max(-h.z);
                    Vec3::new(lerp(i, h.x), lerp(j, h.y), z)
                }
            };
            out.push(b.to_world(local));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sdf_point_box, FloorPolygon, Vec2};
    use crate::scenegen::{ObjectInstance, RoomType};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn room_with(objects: Vec<(usize, OrientedBox)>, room: RoomType) -> SceneLayout {
        let floor = FloorPolygon::new(vec![
            Vec2::new(-3.0, -3.0),
            Vec2::new(3.0, -3.0),
            Vec2::new(3.0, 3.0),
            Vec2::new(-3.0, 3.0),
        ])
        .unwrap();
        SceneLayout {
            room_type: room,
            floor,
            objects: objects.into_iter().map(|(category, bbox)| ObjectInstance { category, bbox, contact_flag: false }).collect(),
        }
    }

    fn on_floor(x: f64, z: f64, size: [f64; 3], yaw: f64) -> OrientedBox {
        OrientedBox::new(Vec3::new(x, size[1] / 2.0, z), Vec3::new(size[0] / 2.0, size[1] / 2.0, size[2] / 2.0), yaw)
    }

    #[test]
    fn no_contactable_objects_gives_no_contacts() {
        let cat = RoomType::Bedroom.catalogue();
        let lamp = cat.index_of("ceiling_lamp").unwrap();
        let scene = room_with(vec![(lamp, on_floor(0.0, 0.0, [0.5, 0.2, 0.5], 0.0))], RoomType::Bedroom);
        let cfg = SceneGenConfig { contacts_min: 3, contacts_max: 3, ..Default::default() };
        for seed in 0..20 {
            assert!(populate_contacts_with(&scene, seed, &cfg).is_empty());
        }
    }

    #[test]
    fn lying_box_covers_most_of_bed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bed = on_floor(0.3, -0.2, [1.8, 0.55, 2.1], 0.7);
        for _ in 0..200 {
            let b = contact_box(&bed, ContactClass::Lying, &mut rng);
            assert!(iou2d(&b, &bed) >= 0.5);
            assert!((b.bottom() - bed.top()).abs() < 1e-9);
        }
    }

    #[test]
    fn sitting_box_top_at_seat_height() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chair = on_floor(0.0, 0.0, [0.5, 0.9, 0.55], -1.1);
        for _ in 0..100 {
            let b = contact_box(&chair, ContactClass::Sitting, &mut rng);
            assert!((b.top() - SEAT_HEIGHT).abs() < 1e-9);
            assert!(b.bottom() >= -1e-12);
            assert!((b.yaw - chair.yaw).abs() < 1e-12);
            assert!(iou2d(&b, &chair) > 0.3);
        }
    }

    #[test]
    fn touching_box_protrudes_from_front_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = on_floor(1.0, 1.0, [1.2, 0.75, 0.8], 0.3);
        for _ in 0..100 {
            let b = contact_box(&table, ContactClass::Touching, &mut rng);
            let front = b.to_world(Vec3::new(0.0, 0.0, b.half_extents.z));
            let local = table.to_local(front);
            assert!((local.z - (table.half_extents.z + TOUCH_PROTRUSION)).abs() < 1e-9);
            // Contact points lie on the host's front face plane.
            let h = ContactHuman { bbox: b, class: ContactClass::Touching, active: true, host: None, host_category: None };
            for p in contact_points(&h, 4) {
                assert!((table.to_local(p).z - table.half_extents.z).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn contact_points_lie_on_lying_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bed = on_floor(0.0, 0.0, [1.0, 0.5, 2.0], 0.0);
        let b = contact_box(&bed, ContactClass::Lying, &mut rng);
        let h = ContactHuman { bbox: b, class: ContactClass::Lying, active: true, host: None, host_category: None };
        for p in contact_points(&h, 5) {
            assert!(sdf_point_box(p, &bed).abs() < 1e-9);
        }
    }

    #[test]
    fn sitting_points_lie_on_the_seat_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stool = on_floor(0.3, -0.2, [0.6, 0.45, 0.6], 0.7);
        let b = contact_box(&stool, ContactClass::Sitting, &mut rng);
        let h = ContactHuman { bbox: b, class: ContactClass::Sitting, active: true, host: None, host_category: None };
        for p in contact_points(&h, 4) {
            assert!(p.y.abs() < 1e-9);
            // On the base plane; the seat region may overhang slightly.
            let d = sdf_point_box(p, &stool);
            assert!((-1e-9..0.1).contains(&d), "{d}");
        }
    }

    #[test]
    fn two_sitters_on_one_sofa_collapse_to_one() {
        let cat = RoomType::Living.catalogue();
        let sofa = cat.index_of("multi_seat_sofa").unwrap();
        let bbox = on_floor(0.0, 0.0, [2.2, 0.85, 0.95], 0.4);
        let scene = room_with(vec![(sofa, bbox)], RoomType::Living);
        let sitter = |dx: f64| {
            let c = bbox.to_world(Vec3::new(dx, 0.0, 0.0));
            let b = OrientedBox::new(Vec3::new(c.x, 0.15, c.z), Vec3::new(0.5, 0.3, 0.43), bbox.yaw);
            ContactHuman { bbox: b, class: ContactClass::Sitting, active: false, host: Some(0), host_category: Some(sofa) }
        };
        let cfg = SceneGenConfig::default();
        // 0.1 m apart: iou3d = 0.9 / 1.1 > 0.5.
        let close = suppress_contacts(vec![sitter(0.0), sitter(0.1)], &scene, &cfg);
        assert_eq!(close.len(), 1);
        assert!(close[0].active);
        // 0.6 m apart: iou3d = 0.4 / 1.6 < 0.5, both survive.
        let apart = suppress_contacts(vec![sitter(-0.3), sitter(0.3)], &scene, &cfg);
        assert_eq!(apart.len(), 2);
        assert_eq!(apart.iter().filter(|h| h.active).count(), 1);
    }

    #[test]
    fn exactly_one_active() {
        let cfg = SceneGenConfig { contacts_min: 3, contacts_max: 3, ..Default::default() };
        for seed in 0..50 {
            let scene = crate::scenegen::gen_room(RoomType::Living, seed);
            let c = populate_contacts_with(&scene, seed, &cfg);
            if !c.is_empty() {
                assert_eq!(c.iter().filter(|h| h.active).count(), 1);
                assert!(c[0].active);
            }
        }
    }
}
