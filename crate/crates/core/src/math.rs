//! Small numeric helpers shared by the attention and feature code.
//!
//! Dot products over `f32` storage accumulate in `f64`.

#[allow(unused_imports)]
use num_traits::Float;

/// `⟨a, b⟩` accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += f64::from(x[0]) * f64::from(y[0]);
        acc[1] += f64::from(x[1]) * f64::from(y[1]);
        acc[2] += f64::from(x[2]) * f64::from(y[2]);
        acc[3] += f64::from(x[3]) * f64::from(y[3]);
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += f64::from(*x) * f64::from(*y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm64(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖₂` for two `f64` vectors of equal length.
pub fn distance64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Numerically stable `log Σ exp(x_i)`; `−∞` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Population moments of a sample.
///
/// Kurtosis is excess kurtosis. A zero-variance sample reports skew and
/// kurtosis of 0; an empty sample reports all zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
    pub skew: f64,
    pub kurt: f64,
}

impl Moments {
    pub fn of<I>(values: I) -> Self
    where
        I: IntoIterator<Item = f64>,
        I::IntoIter: Clone,
    {
        let iter = values.into_iter();
        let mut n = 0usize;
        let mut sum = 0.0;
        for x in iter.clone() {
            n += 1;
            sum += x;
        }
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mean = sum / nf;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for x in iter {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let var = m2 / nf;
        // Relative floor so constant inputs with rounding noise stay degenerate.
        if var <= 1e-24 * (1.0 + mean * mean) {
            return Self {
                mean,
                var: 0.0,
                skew: 0.0,
                kurt: 0.0,
            };
        }
        let skew = (m3 / nf) / var.powf(1.5);
        let kurt = (m4 / nf) / (var * var) - 3.0;
        Self {
            mean,
            var,
            skew,
            kurt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        let a: Vec<f32> = (0..11).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..11).map(|i| (i * i) as f32 * 0.1).collect();
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn log_sum_exp_handles_empty_and_ln2() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[0.0, 0.0]) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + core::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn moments_of_constant_are_degenerate() {
        let m = Moments::of([3.0; 10]);
        assert_eq!(m.mean, 3.0);
        assert_eq!((m.var, m.skew, m.kurt), (0.0, 0.0, 0.0));
    }

    #[test]
    fn moments_of_two_point_distribution() {
        // ±1 with equal mass: var 1, skew 0, kurt 1 - 3 = -2.
        let m = Moments::of([-1.0, 1.0, -1.0, 1.0]);
        assert!(m.mean.abs() < 1e-15);
        assert!((m.var - 1.0).abs() < 1e-15);
        assert!(m.skew.abs() < 1e-15);
        assert!((m.kurt + 2.0).abs() < 1e-12);
    }
}
