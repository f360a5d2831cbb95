//! Naive reference implementations shared by the integration tests. These
//! deliberately avoid the library's kernels: plain loops, two-pass softmax.

#![allow(dead_code)]

use fluxattn_core::cache::{KvSegment, SegmentedKvCache};
use fluxattn_core::tensor::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(r: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle free of the generator under test.
    let u1: f64 = r.random_range(1e-12..1.0);
    let u2: f64 = r.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| (gaussian(r) * scale) as f32).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f32> {
    (0..n).map(|_| (gaussian(r) * scale) as f32).collect()
}

/// Exact softmax attention over the listed rows.
pub fn naive_attention(q: &[f32], keys: &Matrix, values: &Matrix, rows: &[usize]) -> Vec<f64> {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = rows
        .iter()
        .map(|&i| {
            let mut s = 0.0;
            for j in 0..d {
                s += f64::from(q[j]) * f64::from(keys.row(i)[j]);
            }
            s * scale
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; d];
    for (wi, &i) in w.iter().zip(rows) {
        for j in 0..d {
            out[j] += wi / z * f64::from(values.row(i)[j]);
        }
    }
    out
}

pub fn naive_lse(q: &[f32], keys: &Matrix) -> f64 {
    let d = q.len();
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..keys.rows())
        .map(|i| (0..d).map(|j| f64::from(q[j]) * f64::from(keys.row(i)[j])).sum::<f64>() * scale)
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

pub fn l2(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Concatenation of every segment, sink first, generated tokens last.
pub fn stacked(cache: &SegmentedKvCache) -> (Matrix, Matrix) {
    let full = cache.full();
    (full.keys, full.values)
}

/// Row offset of the host-resident segment inside [`stacked`].
pub fn cpu_offset(cache: &SegmentedKvCache) -> usize {
    cache.len(fluxattn_core::cache::Segment::Sink)
}

pub fn random_cache(r: &mut ChaCha8Rng, lens: [usize; 4], dim: usize) -> SegmentedKvCache {
    let mut seg = |n: usize| KvSegment::new(random_matrix(r, n, dim, 1.0), random_matrix(r, n, dim, 1.0)).unwrap();
    let sink = seg(lens[0]);
    let cpu = seg(lens[1]);
    let local = seg(lens[2]);
    let new = seg(lens[3]);
    SegmentedKvCache::from_segments(sink, cpu, local, new).unwrap()
}
