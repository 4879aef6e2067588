//! Procedural colour images for smoke tests and demos.
//!
//! Each image mixes a smooth colour gradient, a few oriented sinusoids that
//! are mostly shared across channels (like luminance texture in natural
//! photos), and a couple of hard-edged discs. Output depends only on
//! `(seed, index)`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cfa::ColorImage;

struct Wave {
    freq_x: f64,
    freq_y: f64,
    phase: f64,
    amp: [f64; 3],
}

struct Disc {
    cy: f64,
    cx: f64,
    radius: f64,
    color: [f64; 3],
}

pub fn synthetic_image(height: usize, width: usize, seed: u64, index: u64) -> ColorImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut color = || [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    let base = color();
    let gx = color().map(|v| (v - 0.5) * 0.6);
    let gy = color().map(|v| (v - 0.5) * 0.6);

    let waves: Vec<Wave> = (0..3)
        .map(|_| {
            let period = rng.random_range(6.0..32.0);
            let angle = rng.random_range(0.0..TAU);
            let shared = rng.random_range(0.04..0.12);
            Wave {
                freq_x: angle.cos() / period,
                freq_y: angle.sin() / period,
                phase: rng.random_range(0.0..TAU),
                amp: std::array::from_fn(|_| shared * rng.random_range(0.8..1.2)),
            }
        })
        .collect();
    let size = height.min(width) as f64;
    let discs: Vec<Disc> = (0..2)
        .map(|_| Disc {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            radius: rng.random_range(0.1..0.3) * size,
            color: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        })
        .collect();

    ColorImage::from_fn(height, width, |c, y, x| {
        let (fy, fx) = (y as f64 / height as f64 - 0.5, x as f64 / width as f64 - 0.5);
        let mut v = base[c] + gx[c] * fx + gy[c] * fy;
        for d in &discs {
            let r2 = (y as f64 - d.cy).powi(2) + (x as f64 - d.cx).powi(2);
            if r2 < d.radius * d.radius {
                v = 0.5 * v + 0.5 * d.color[c];
            }
        }
        for w in &waves {
            v += w.amp[c] * (TAU * (w.freq_x * x as f64 + w.freq_y * y as f64) + w.phase).sin();
        }
        v.clamp(0.0, 1.0) as f32
    })
}

/// `count` images of `size`×`size`, indices `0..count`.
pub fn synthetic_patches(count: usize, size: usize, seed: u64) -> Vec<ColorImage> {
    (0..count as u64).map(|i| synthetic_image(size, size, seed, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let a = synthetic_image(16, 20, 1, 3);
        assert_eq!(a, synthetic_image(16, 20, 1, 3));
        assert_ne!(a, synthetic_image(16, 20, 1, 4));
        assert!(a.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
