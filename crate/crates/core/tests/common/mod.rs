//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::path::Path;

use nuigo::network::{ArchConfig, ModelParams};
use nuigo::raster::{save_png16, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic fundus-like picture: a reddish disc on a black surround with
/// radial shading, a bright optic disc, a dark macula and branching vessels.
pub fn synthetic_fundus(size: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let (cx, cy) = (
        s / 2.0 + rng.gen_range(-0.03..0.03) * s,
        s / 2.0 + rng.gen_range(-0.03..0.03) * s,
    );
    let radius = s * rng.gen_range(0.42..0.48);
    let base = [
        rng.gen_range(0.55..0.75f32),
        rng.gen_range(0.22..0.34f32),
        rng.gen_range(0.06..0.14f32),
    ];
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let disc = (
        cx + side * radius * rng.gen_range(0.35..0.55),
        cy + rng.gen_range(-0.1..0.1) * radius,
    );
    let disc_r = radius * rng.gen_range(0.12..0.18);
    let macula = (cx - side * radius * 0.3, cy);
    let macula_r = radius * 0.2;
    // Vessels: polylines leaving the optic disc with random-walk headings.
    let mut segments = Vec::new();
    for v in 0..rng.gen_range(5..9) {
        let mut p = disc;
        let mut heading = v as f32 * std::f32::consts::TAU / 7.0 + rng.gen_range(-0.3..0.3);
        let width = rng.gen_range(0.008..0.018) * s;
        for _ in 0..24 {
            heading += rng.gen_range(-0.25..0.25);
            let q = (
                p.0 + heading.cos() * s * 0.03,
                p.1 + heading.sin() * s * 0.03,
            );
            segments.push((p, q, width));
            p = q;
        }
    }
    let texture: Vec<f32> = (0..size * size)
        .map(|_| rng.gen_range(-0.015..0.015))
        .collect();
    Image::from_fn(size, size, |y, x| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / radius;
        if r > 1.0 {
            return [0.0; 3];
        }
        let shade = 1.0 - 0.6 * r * r;
        let mut c = base.map(|b| b * shade);
        let dd = ((px - disc.0).powi(2) + (py - disc.1).powi(2)).sqrt() / disc_r;
        let glow = (-dd * dd).exp();
        c[0] += (1.0 - c[0]) * 0.8 * glow;
        c[1] += (0.9 - c[1]) * 0.8 * glow;
        c[2] += (0.6 - c[2]) * 0.8 * glow;
        let md = ((px - macula.0).powi(2) + (py - macula.1).powi(2)).sqrt() / macula_r;
        let dark = 1.0 - 0.3 * (-md * md).exp();
        let mut vessel = 0.0f32;
        for &((ax, ay), (bx, by), w) in &segments {
            let (dx, dy) = (bx - ax, by - ay);
            let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let d = ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt();
            vessel = vessel.max((-(d / w).powi(2)).exp());
        }
        let n = texture[y * size + x];
        [
            c[0] * dark * (1.0 - 0.35 * vessel) + n,
            c[1] * dark * (1.0 - 0.55 * vessel) + n,
            c[2] * dark * (1.0 - 0.5 * vessel) + n,
        ]
    })
    .expect("generated image is valid")
}

/// Writes `count` synthetic fundus images named `fundus_000.png`, … into `dir`.
pub fn write_fundus_set(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = synthetic_fundus(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        save_png16(&dir.join(format!("fundus_{i:03}.png")), &img).unwrap();
    }
}

/// Every parameter drawn uniformly from `[-scale, scale)`.
pub fn random_model(arch: ArchConfig, seed: u64, scale: f64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ModelParams::zeros(arch).unwrap();
    for (_, p) in m.named_params_mut() {
        p.data
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-scale..scale));
    }
    m
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

pub fn random_tensor(shape: [usize; 4], seed: u64, scale: f64) -> nuigo::Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [n, h, w, c] = shape;
    let data = (0..n * h * w * c)
        .map(|_| rng.gen_range(-scale..scale))
        .collect();
    nuigo::Tensor::from_vec(n, h, w, c, data).unwrap()
}
