//! Procedural test images.
//!
//! [`natural_image`] renders a dead-leaves occlusion model (discs with a
//! power-law radius distribution), whose edge and spectral statistics
//! resemble photographs. [`smooth_image`] is a sum of a few low-frequency
//! sinusoids.

use rand::Rng;

use super::Image;
use crate::rng::SeedStream;

const SUPERSAMPLE: usize = 3;

pub fn natural_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = SeedStream::new(seed).stream("synth.natural", 0);
    let dim = height.max(width) as f64;
    let (r_min, r_max) = (1.5, 0.6 * dim);
    let background: [f32; 3] = [rng.random(), rng.random(), rng.random()];
    // p(r) ∝ r^-3 via inverse CDF
    let discs: Vec<(f64, f64, f64, [f32; 3], f64)> = (0..(3 * height * width / 20).max(60))
        .map(|_| {
            let u: f64 = rng.random();
            let inv = 1.0 / (r_min * r_min) - u * (1.0 / (r_min * r_min) - 1.0 / (r_max * r_max));
            let r = inv.sqrt().recip();
            let cy = rng.random_range(-0.1..1.1) * height as f64;
            let cx = rng.random_range(-0.1..1.1) * width as f64;
            let base: f32 = rng.random();
            let tint: [f32; 3] = [0, 1, 2].map(|_| (base + rng.random_range(-0.2f32..0.2)).clamp(0.0, 1.0));
            let gradient = rng.random_range(-0.3..0.3) / r;
            (cy, cx, r, tint, gradient)
        })
        .collect();
    // later discs are on top; render front to back
    let mut img = Image::zeros(height, width);
    let ss = SUPERSAMPLE as f64;
    for y in 0..height {
        for x in 0..width {
            let mut acc = [0.0f32; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / ss;
                    let px = x as f64 + (sx as f64 + 0.5) / ss;
                    let mut color = background;
                    for &(cy, cx, r, tint, g) in discs.iter().rev() {
                        let (dy, dx) = (py - cy, px - cx);
                        if dy * dy + dx * dx <= r * r {
                            let shade = (g * dy) as f32;
                            color = tint.map(|t| (t + shade).clamp(0.0, 1.0));
                            break;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            for (c, v) in acc.iter().enumerate() {
                img.set(c, y, x, v / (SUPERSAMPLE * SUPERSAMPLE) as f32);
            }
        }
    }
    img
}

pub fn smooth_image(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = SeedStream::new(seed).stream("synth.smooth", 0);
    let waves: Vec<[f64; 5]> = (0..4)
        .map(|_| {
            [
                rng.random_range(0.2..1.5),
                rng.random_range(0.2..1.5),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.12),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    Image::from_fn(height, width, |c, y, x| {
        let (u, v) = (y as f64 / height as f64, x as f64 / width as f64);
        let mut val = 0.5;
        for &[fy, fx, phase, amp, cshift] in &waves {
            val += amp * (std::f64::consts::TAU * (fy * u + fx * v) + phase + cshift * c as f64).sin();
        }
        val as f32
    })
}
