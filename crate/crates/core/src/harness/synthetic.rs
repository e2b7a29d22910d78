//! Procedural datasets with learnable structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::operators::LUMA_COEFFS;

/// Background and blob colors (RGB in `[0, 1]`) of the two blob classes.
const PALETTES: [([f64; 3], [f64; 3]); 2] = [
    ([0.15, 0.20, 0.55], [0.95, 0.75, 0.20]),
    ([0.70, 0.85, 0.65], [0.55, 0.10, 0.15]),
];

/// Chroma direction of the tinted dataset; orthogonal to the luma weights.
pub const TINT: [f64; 3] = [1.0, -(0.299 - 0.114) / 0.587, -1.0];

fn soft_disk(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    (1.0 / (1.0 + ((d - r) / 0.04).exp())).clamp(0.0, 1.0)
}

fn to_tensor(res: usize, mut pixel: impl FnMut(f64, f64) -> [f64; 3]) -> Tensor<f32> {
    let plane = res * res;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..res {
        for j in 0..res {
            let (y, x) = ((i as f64 + 0.5) / res as f64, (j as f64 + 0.5) / res as f64);
            let rgb = pixel(x, y);
            for c in 0..3 {
                data[c * plane + i * res + j] = (2.0 * rgb[c].clamp(0.0, 1.0) - 1.0) as f32;
            }
        }
    }
    Tensor::new([3, res, res], data).expect("consistent shape")
}

/// Two-tone images: one to three soft disks on a flat background, with
/// colors drawn around a per-class palette. Classes alternate.
pub fn two_tone_blobs(count: usize, resolution: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|n| {
            let (bg, fg) = PALETTES[n % 2];
            let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3]| c.map(|v| v + rng.random_range(-0.05..0.05));
            let bg = jitter(&mut rng, bg);
            let fg = jitter(&mut rng, fg);
            let disks: Vec<(f64, f64, f64)> = (0..rng.random_range(1..=3))
                .map(|_| {
                    (
                        rng.random_range(0.25..0.75),
                        rng.random_range(0.25..0.75),
                        rng.random_range(0.12..0.25),
                    )
                })
                .collect();
            to_tensor(resolution, |x, y| {
                let a = disks
                    .iter()
                    .map(|&(cx, cy, r)| soft_disk(x, y, cx, cy, r))
                    .fold(0.0, f64::max);
                [0, 1, 2].map(|c| bg[c] * (1.0 - a) + fg[c] * a)
            })
        })
        .collect()
}

/// Images whose chroma is a fixed function of luma: a smooth random luma
/// field `L ∈ [0.1, 0.9]` tinted as `L + L(1 − L)·TINT`.
pub fn tinted(count: usize, resolution: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(2..=4))
                .map(|_| {
                    (
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.0..1.0),
                        rng.random_range(0.1..0.3),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            to_tensor(resolution, |x, y| {
                let mut v = 0.5 * (gx * (x - 0.5) + gy * (y - 0.5));
                for &(cx, cy, w, a) in &bumps {
                    v += a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (w * w)).exp();
                }
                let l = 0.5 + 0.4 * v.tanh();
                TINT.map(|t| l + l * (1.0 - l) * t)
            })
        })
        .collect()
}

/// Per-pixel Euclidean distance between chroma vectors `rgb − Y·1` on the
/// `[0, 1]` scale, averaged over pixels.
pub fn chroma_error(estimate: &Tensor<f32>, truth: &Tensor<f32>) -> f64 {
    let chroma = |t: &Tensor<f32>, i: usize, plane: usize| {
        let rgb = [0, 1, 2].map(|c| 0.5 * (t.data()[c * plane + i] as f64 + 1.0));
        let y: f64 = rgb.iter().zip(LUMA_COEFFS).map(|(v, k)| v * k).sum();
        rgb.map(|v| v - y)
    };
    let plane = truth.len() / 3;
    let total: f64 = (0..plane)
        .map(|i| {
            let (a, b) = (chroma(estimate, i, plane), chroma(truth, i, plane));
            (0..3).map(|c| (a[c] - b[c]).powi(2)).sum::<f64>().sqrt()
        })
        .sum();
    total / plane as f64
}
