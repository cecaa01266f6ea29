//! Seeded fundus-like fixtures: a bright disc with a dark branching vessel
//! tree, plus the matching ground-truth mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{BinaryMask, ImageU8};

struct Segment {
    a: (f64, f64),
    b: (f64, f64),
    radius: f64,
}

fn distance_to_segment(p: (f64, f64), s: &Segment) -> f64 {
    let (dx, dy) = (s.b.0 - s.a.0, s.b.1 - s.a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - s.a.0) * dx + (p.1 - s.a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (s.a.0 + t * dx, s.a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn grow(rng: &mut ChaCha8Rng, segs: &mut Vec<Segment>, start: (f64, f64), heading: f64, radius: f64, reach: f64, depth: u32) {
    let mut p = start;
    let mut h = heading;
    let steps = 6 + rng.random_range(0..4);
    let step = reach / steps as f64;
    for i in 0..steps {
        h += rng.random_range(-0.35..0.35);
        let q = (p.0 + step * h.cos(), p.1 + step * h.sin());
        segs.push(Segment { a: p, b: q, radius });
        p = q;
        if depth > 0 && i == steps / 2 {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let branch = h + side * rng.random_range(0.5..1.0);
            grow(rng, segs, p, branch, radius * 0.7, reach * 0.6, depth - 1);
        }
    }
}

/// An RGB fundus-like image and its vessel mask, both `width x height`.
pub fn fundus_pair(width: usize, height: usize, seed: u64) -> (ImageU8, BinaryMask) {
    render(width, height, seed, 1.0, true)
}

/// A magnified crop: a few thick vessels filling the frame, no field-of-view border.
pub fn vessel_crop(size: usize, seed: u64) -> (ImageU8, BinaryMask) {
    render(size, size, seed, 4.0, false)
}

fn render(width: usize, height: usize, seed: u64, thickness: f64, fov_border: bool) -> (ImageU8, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let scale = w.min(h);
    let disc = (w * rng.random_range(0.3..0.7), h * rng.random_range(0.35..0.65));
    let mut segs = Vec::new();
    let trunks = 4 + rng.random_range(0..3);
    for k in 0..trunks {
        let heading = k as f64 * std::f64::consts::TAU / trunks as f64 + rng.random_range(-0.3..0.3);
        let radius = (thickness * scale / 64.0 * rng.random_range(1.0..1.6)).max(0.8);
        grow(&mut rng, &mut segs, disc, heading, radius, scale * 0.6, 2);
    }

    let mut rgb = Vec::with_capacity(width * height * 3);
    let mut mask = Vec::with_capacity(width * height);
    let fov = if fov_border { 0.48 * scale } else { f64::INFINITY };
    for y in 0..height {
        for x in 0..width {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let vessel = segs.iter().any(|s| distance_to_segment(p, s) <= s.radius);
            let r_center = ((p.0 - w / 2.0).powi(2) + (p.1 - h / 2.0).powi(2)).sqrt();
            let r_disc = ((p.0 - disc.0).powi(2) + (p.1 - disc.1).powi(2)).sqrt();
            let noise = rng.random_range(-6.0..6.0);
            let (mut r, mut g, mut b) = if r_center > fov {
                (4.0, 2.0, 1.0)
            } else {
                let glow = 70.0 * (-(r_disc / (0.08 * scale)).powi(2)).exp();
                (170.0 + glow, 80.0 + glow, 35.0 + 0.5 * glow)
            };
            if vessel && r_center <= fov {
                r -= 50.0;
                g -= 45.0;
                b -= 15.0;
            }
            for c in [&mut r, &mut g, &mut b] {
                *c = (*c + noise).round().clamp(0.0, 255.0);
            }
            rgb.extend([r as u8, g as u8, b as u8]);
            mask.push(u8::from(vessel && r_center <= fov));
        }
    }
    (
        ImageU8::new(width, height, 3, rgb).expect("sized buffer"),
        BinaryMask::new(width, height, mask).expect("binary values"),
    )
}
