//! Seeded synthetic anomaly maps for tests, fixtures and the demo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::map_io::{AnomalyMap, BinaryMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub peak: f64,
}

/// A raw map, the blobs that produced it and their ground-truth disks.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub map: AnomalyMap,
    pub gt: BinaryMask,
    pub blobs: Vec<Blob>,
}

/// Background noise in `[0, noise)` plus radial bumps.
pub fn blob_map(width: usize, height: usize, blobs: &[Blob], noise: f64, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(width * height);
    let mut gt = BinaryMask::empty(width, height);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = if noise > 0.0 { rng.random_range(0.0..noise) } else { 0.0 };
            for b in blobs {
                let d = ((px - b.cx).powi(2) + (py - b.cy).powi(2)).sqrt();
                if d <= b.radius {
                    v = v.max(b.peak * (1.0 - 0.5 * d / b.radius));
                    gt.set(x, y, true);
                }
            }
            scores.push(v);
        }
    }
    let map = AnomalyMap::raw(width, height, scores).expect("finite synthetic scores");
    Fixture {
        map,
        gt,
        blobs: blobs.to_vec(),
    }
}

/// Up to `max_blobs` blobs at random positions with random radii.
pub fn random_fixture(width: usize, height: usize, max_blobs: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(0..=max_blobs);
    let short = width.min(height) as f64;
    let blobs: Vec<Blob> = (0..n)
        .map(|_| Blob {
            cx: rng.random_range(0.0..width as f64),
            cy: rng.random_range(0.0..height as f64),
            radius: rng.random_range(1.0..(short / 4.0).max(1.5)),
            peak: rng.random_range(0.5..1.0),
        })
        .collect();
    let noise = rng.random_range(0.05..0.4);
    blob_map(width, height, &blobs, noise, rng.random())
}

/// Independent uniform scores.
pub fn uniform_map(width: usize, height: usize, seed: u64) -> AnomalyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..width * height).map(|_| rng.random::<f64>()).collect();
    AnomalyMap::raw(width, height, scores).expect("finite synthetic scores")
}
