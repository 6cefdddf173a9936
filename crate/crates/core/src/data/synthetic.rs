//! Desk-scale stand-in for polyp / skin-lesion datasets.
//!
//! Each image is a smoothly textured background with one to three blobs.
//! Blobs differ from the background by a small colour shift and a fine
//! oriented stripe texture, so local texture carries most of the signal.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Image, Mask, Sample};
use crate::error::{Error, Result};

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.5;
const MAX_SHAPE_ATTEMPTS: usize = 200;

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    /// (amplitude, phase) of the boundary harmonics 1..=3
    harmonics: [(f64, f64); 3],
    squash: f64,
    tilt: f64,
}

impl Blob {
    fn random<R: Rng>(side: f64, rng: &mut R) -> Self {
        Self {
            cx: rng.random_range(0.2..0.8) * side,
            cy: rng.random_range(0.2..0.8) * side,
            radius: rng.random_range(0.1..0.26) * side,
            harmonics: [
                (rng.random_range(0.0..0.2), rng.random_range(0.0..TAU)),
                (rng.random_range(0.0..0.15), rng.random_range(0.0..TAU)),
                (rng.random_range(0.0..0.08), rng.random_range(0.0..TAU)),
            ],
            squash: rng.random_range(0.7..1.0),
            tilt: rng.random_range(0.0..TAU),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.tilt.sin_cos();
        let u = dx * c + dy * s;
        let v = (-dx * s + dy * c) / self.squash;
        let r = (u * u + v * v).sqrt();
        let theta = v.atan2(u);
        let bound = self
            .harmonics
            .iter()
            .enumerate()
            .fold(1.0, |acc, (k, (a, phi))| {
                acc + a * ((k as f64 + 1.0) * theta + phi).cos()
            });
        r <= self.radius * bound
    }
}

fn random_shape<R: Rng>(side: usize, rng: &mut R) -> Vec<u8> {
    let s = side as f64;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let blobs: Vec<Blob> = (0..rng.random_range(1..=3)).map(|_| Blob::random(s, rng)).collect();
        let mask: Vec<u8> = (0..side * side)
            .map(|i| {
                let (x, y) = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
                u8::from(blobs.iter().any(|b| b.contains(x, y)))
            })
            .collect();
        let frac = mask.iter().map(|&v| v as f64).sum::<f64>() / (side * side) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            return mask;
        }
    }
    // centred disk covering ~20% of the image
    let r = (0.2 / std::f64::consts::PI).sqrt() * s;
    (0..side * side)
        .map(|i| {
            let (x, y) = ((i % side) as f64 + 0.5 - s / 2.0, (i / side) as f64 + 0.5 - s / 2.0);
            u8::from(x * x + y * y <= r * r)
        })
        .collect()
}

/// Sum of a few random low-frequency plane waves, roughly in `[-1, 1]`.
struct Waves(Vec<(f64, f64, f64, f64)>);

impl Waves {
    fn random<R: Rng>(count: usize, max_freq: f64, side: f64, rng: &mut R) -> Self {
        Self(
            (0..count)
                .map(|_| {
                    let f = rng.random_range(0.5..max_freq) * TAU / side;
                    let dir = rng.random_range(0.0..TAU);
                    (f * dir.cos(), f * dir.sin(), rng.random_range(0.0..TAU), 1.0 / count as f64)
                })
                .collect(),
        )
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.0.iter().map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum()
    }
}

fn render<R: Rng>(mask: &[u8], side: usize, rng: &mut R) -> Image {
    let s = side as f64;
    let bg: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.3..0.7));
    // colour shift of the blobs: a random direction, modest magnitude
    let dir: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-1.0..1.0));
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
    let shift = rng.random_range(0.06..0.16);
    let fg: [f64; 3] = [0, 1, 2].map(|c| bg[c] + shift * dir[c] / norm);

    let bg_waves = Waves::random(3, 3.0, s, rng);
    let fg_waves = Waves::random(2, 2.0, s, rng);
    let period = rng.random_range(3.0..5.0);
    let stripe_dir = rng.random_range(0.0..TAU);
    let (sx, sy) = (stripe_dir.cos() * TAU / period, stripe_dir.sin() * TAU / period);
    let noise = Normal::new(0.0, 0.03).expect("valid std");

    let mut data = vec![0f32; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let inside = mask[y * side + x] == 1;
            let base = if inside {
                let stripes = 0.1 * (sx * fx + sy * fy).sin();
                fg.map(|v| v + 0.05 * fg_waves.at(fx, fy) + stripes)
            } else {
                bg.map(|v| v + 0.12 * bg_waves.at(fx, fy))
            };
            for c in 0..3 {
                let v = base[c] + noise.sample(rng);
                data[(c * side + y) * side + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Image {
        height: side,
        width: side,
        data,
    }
}

/// `count` deterministic samples of size `side x side`.
///
/// Every mask covers between 5% and 50% of the image. Sample `i` depends only
/// on `(seed, i, side)`.
pub fn generate_synthetic(seed: u64, count: usize, side: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::InvalidValue("synthetic sample count must be positive".into()));
    }
    if side < 8 {
        return Err(Error::InvalidValue(format!("synthetic side {side} is too small")));
    }
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mask = random_shape(side, &mut rng);
            let image = render(&mask, side, &mut rng);
            Sample::new(
                format!("synth{seed}_{i:05}"),
                image,
                Some(Mask::new(side, side, mask)?),
            )
        })
        .collect()
}
