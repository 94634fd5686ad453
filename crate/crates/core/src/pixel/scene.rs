use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pgm::GrayImage;

/// Seed of the shipped `fixtures/test128.pgm`.
pub const FIXTURE_SEED: u64 = 128;

/// A smooth, structured test image: a few seeded low-frequency waves over a
/// diagonal ramp, with soft blobs on top. No region is flat, so every tile
/// edge carries information.
pub fn synthetic_scene(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f32; 4]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(0.08..0.2),
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(-1.0f32..1.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
            ]
        })
        .collect();
    let blobs: Vec<[f32; 4]> = (0..5)
        .map(|_| {
            [
                rng.gen_range(0.0..width as f32),
                rng.gen_range(0.0..height as f32),
                rng.gen_range(8.0..24.0),
                rng.gen_range(-0.25f32..0.25),
            ]
        })
        .collect();
    let mut unit = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f32, y as f32);
            let mut v = 0.2 + 0.3 * fx / width as f32 + 0.2 * fy / height as f32;
            for [k, dx, dy, phase] in &waves {
                v += 0.06 * (k * (dx * fx + dy * fy) + phase).sin();
            }
            for [cx, cy, r, amp] in &blobs {
                let d2 = ((fx - cx).powi(2) + (fy - cy).powi(2)) / (r * r);
                v += amp * (-d2).exp();
            }
            unit.push(v);
        }
    }
    GrayImage::from_unit(width, height, &unit)
}
