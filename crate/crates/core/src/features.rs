//! The 41-dimensional per-head descriptor fed to the predictor.
//!
//! Everything that depends on the host-resident segment or on the anchor
//! query `q'` (the last prefill query) is computed once by
//! [`prefill_stats`]. [`decode_features`] then only touches accelerator
//! segments; the host-segment log-sum-exp for the current query comes from
//! the moment approximation in [`approx_lse_cpu`].
//!
//! Conventions: "norm of a segment" is the mean of its per-token row norms,
//! kurtosis is excess kurtosis, zero-variance samples have zero skew and
//! kurtosis, and the log-sum-exp of an empty segment is [`EMPTY_LSE`].
//! At decode time the local window includes tokens generated so far.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::attn::{self, PartialOutput};
use crate::cache::{KvSegment, KvSource, Segment, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::math::{self, Moments};

pub const FEATURE_DIM: usize = 41;

/// Stand-in for `log Σ exp` over an empty segment.
pub const EMPTY_LSE: f64 = -1.0e4;

/// Feature groups and their sizes, in vector order.
pub const FEATURE_GROUPS: [(&str, usize); 7] = [
    ("structural", 4),
    ("kv_distribution", 12),
    ("qk_interaction", 5),
    ("attention_contribution", 11),
    ("query_dynamics", 3),
    ("budget_estimation", 4),
    ("cross_head", 2),
];

pub const FEATURE_NAMES: [&str; FEATURE_DIM] = [
    "layer",
    "head",
    "l_cpu",
    "l_gpu",
    "k_sink_norm",
    "v_sink_norm",
    "mean_k_cpu_norm",
    "mean_v_cpu_norm",
    "k_cpu_norm_mean",
    "k_cpu_norm_var",
    "k_cpu_norm_skew",
    "k_cpu_norm_kurt",
    "v_cpu_norm_mean",
    "v_cpu_norm_var",
    "v_cpu_norm_skew",
    "v_cpu_norm_kurt",
    "qk_mean_q",
    "z_anchor_mean",
    "z_anchor_var",
    "z_anchor_skew",
    "z_anchor_kurt",
    "lse_sink_q",
    "lse_cpu_q_approx",
    "lse_local_q",
    "lse_sink_anchor",
    "lse_cpu_anchor",
    "lse_local_anchor",
    "out_sink_q",
    "out_local_q",
    "out_sink_anchor",
    "out_cpu_anchor",
    "out_local_anchor",
    "q_norm",
    "anchor_norm",
    "q_anchor_cos",
    "bgt_anchor_16",
    "bgt_anchor_32",
    "bgt_anchor_64",
    "bgt_anchor_128",
    "max_gpu_out_q",
    "max_gpu_out_anchor",
];

/// Named positions in a [`FeatureVector`].
pub mod idx {
    pub const LAYER: usize = 0;
    pub const HEAD: usize = 1;
    pub const L_CPU: usize = 2;
    pub const L_GPU: usize = 3;
    pub const K_SINK_NORM: usize = 4;
    pub const V_SINK_NORM: usize = 5;
    pub const MEAN_K_CPU_NORM: usize = 6;
    pub const MEAN_V_CPU_NORM: usize = 7;
    pub const K_CPU_NORMS: usize = 8;
    pub const V_CPU_NORMS: usize = 12;
    pub const QK_MEAN_Q: usize = 16;
    pub const Z_ANCHOR: usize = 17;
    pub const LSE_SINK_Q: usize = 21;
    pub const LSE_CPU_Q: usize = 22;
    pub const LSE_LOCAL_Q: usize = 23;
    pub const LSE_ANCHOR: usize = 24;
    pub const OUT_SINK_Q: usize = 27;
    pub const OUT_LOCAL_Q: usize = 28;
    pub const OUT_ANCHOR: usize = 29;
    pub const Q_NORM: usize = 32;
    pub const ANCHOR_NORM: usize = 33;
    pub const Q_ANCHOR_COS: usize = 34;
    pub const BGT_ANCHOR: usize = 35;
    pub const MAX_GPU_OUT_Q: usize = 39;
    pub const MAX_GPU_OUT_ANCHOR: usize = 40;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl Default for FeatureVector {
    fn default() -> Self {
        Self([0.0; FEATURE_DIM])
    }
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_DIM] = xs.try_into().map_err(|_| Error::Shape {
            what: "feature vector",
            expected: FEATURE_DIM,
            found: xs.len(),
        })?;
        Ok(Self(arr))
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Cached prefill-time statistics of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillStats {
    pub layer: usize,
    pub head: usize,
    pub dim: usize,
    pub anchor: Vec<f32>,
    pub anchor_norm: f64,
    pub cpu_len: usize,
    pub mean_k_cpu: Vec<f64>,
    pub mean_k_cpu_norm: f64,
    pub mean_v_cpu_norm: f64,
    pub k_sink_norm: f64,
    pub v_sink_norm: f64,
    pub k_cpu_norms: Moments,
    pub v_cpu_norms: Moments,
    /// Moments of `z_i(q') = ⟨q', k_i⟩ / (‖q'‖√D)` over host keys.
    pub z_anchor: Moments,
    /// Log-sum-exp at `q'` for sink, cpu, local.
    pub anchor_lse: [f64; 3],
    /// Output norm at `q'` for sink, cpu, local.
    pub anchor_out_norm: [f64; 3],
    /// Minimum budgets at `q'` for blk 16, 32, 64, 128.
    pub anchor_budgets: [f64; 4],
    /// Largest accelerator-only output norm across the layer's heads at `q'`.
    pub anchor_cross_head_max: f64,
    /// Set when nothing is offloaded; host statistics hold sentinels.
    pub cpu_empty: bool,
}

fn mean_row_norm(m: &crate::tensor::Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter_rows().map(math::norm).sum::<f64>() / m.rows() as f64
}

fn column_mean(m: &crate::tensor::Matrix) -> Vec<f64> {
    let mut mean = alloc::vec![0.0; m.cols()];
    for r in m.iter_rows() {
        for (a, x) in mean.iter_mut().zip(r) {
            *a += f64::from(*x);
        }
    }
    let n = m.rows().max(1) as f64;
    mean.iter_mut().for_each(|a| *a /= n);
    mean
}

fn lse_or_sentinel(p: &PartialOutput) -> f64 {
    if p.is_empty() {
        EMPTY_LSE
    } else {
        p.lse
    }
}

fn dot_mixed(q: &[f32], v: &[f64]) -> f64 {
    q.iter().zip(v).map(|(a, b)| f64::from(*a) * b).sum()
}

/// Local window plus generated tokens, as seen at decode time.
fn local_partial<C: KvSource + ?Sized>(q: &[f32], cache: &C) -> Result<PartialOutput> {
    let mut p = attn::kv_attention(q, cache.segment(Segment::Local))?;
    if cache.segment_len(Segment::New) > 0 {
        p.merge_in(&attn::kv_attention(q, cache.segment(Segment::New))?);
    }
    Ok(p)
}

/// Prefill-time statistics for one head.
///
/// `anchor_budgets` are the minimum budgets of this head at `q'` for
/// blk ∈ {16, 32, 64, 128}; `anchor_cross_head_max` is the largest
/// accelerator-only output norm across the layer at `q'`. Both need the whole
/// layer and are computed by the caller.
pub fn prefill_stats(
    layer: usize,
    head: usize,
    cache: &SegmentedKvCache,
    anchor: &[f32],
    anchor_budgets: [f64; 4],
    anchor_cross_head_max: f64,
) -> Result<PrefillStats> {
    let dim = cache.dim();
    if anchor.len() != dim {
        return Err(Error::Shape {
            what: "anchor width",
            expected: dim,
            found: anchor.len(),
        });
    }
    let sink = cache.segment(Segment::Sink);
    let cpu = cache.segment(Segment::Cpu);
    let cpu_len = cpu.len();
    let anchor_norm = math::norm(anchor);

    let mean_k_cpu = column_mean(&cpu.keys);
    let mean_v_cpu = column_mean(&cpu.values);
    let k_cpu_norms = Moments::of(cpu.keys.iter_rows().map(math::norm));
    let v_cpu_norms = Moments::of(cpu.values.iter_rows().map(math::norm));
    let z_anchor = if anchor_norm > 0.0 {
        let denom = anchor_norm * (dim as f64).sqrt();
        Moments::of(cpu.keys.iter_rows().map(|k| math::dot(anchor, k) / denom))
    } else {
        Moments::default()
    };

    let seg = |s: &KvSegment| attn::kv_attention(anchor, s);
    let p_sink = seg(sink)?;
    let p_cpu = seg(cpu)?;
    let p_local = local_partial(anchor, cache)?;
    let parts = [&p_sink, &p_cpu, &p_local];

    Ok(PrefillStats {
        layer,
        head,
        dim,
        anchor: anchor.to_vec(),
        anchor_norm,
        cpu_len,
        mean_k_cpu_norm: math::norm64(&mean_k_cpu),
        mean_k_cpu,
        mean_v_cpu_norm: math::norm64(&mean_v_cpu),
        k_sink_norm: mean_row_norm(&sink.keys),
        v_sink_norm: mean_row_norm(&sink.values),
        k_cpu_norms,
        v_cpu_norms,
        z_anchor,
        anchor_lse: parts.map(lse_or_sentinel),
        anchor_out_norm: parts.map(|p| math::norm64(&p.out)),
        anchor_budgets,
        anchor_cross_head_max,
        cpu_empty: cpu_len == 0,
    })
}

/// `log L_cpu + ‖q‖μ_q + ½‖q‖²σ²` with `μ_q = ⟨q, MEAN(K_cpu)⟩ / (‖q‖√D)` and
/// `σ² = VAR(z(q'))`. Uses cached statistics only.
pub fn approx_lse_cpu(q: &[f32], stats: &PrefillStats) -> f64 {
    if stats.cpu_len == 0 {
        return EMPTY_LSE;
    }
    let log_len = (stats.cpu_len as f64).ln();
    let qn = math::norm(q);
    if qn == 0.0 {
        return log_len;
    }
    let mu = dot_mixed(q, &stats.mean_k_cpu) / (qn * (stats.dim as f64).sqrt());
    log_len + qn * mu + 0.5 * qn * qn * stats.z_anchor.var
}

/// Norm of the accelerator-only attention output (sink, local, new).
pub fn gpu_output_norm<C: KvSource + ?Sized>(q: &[f32], cache: &C) -> Result<f64> {
    Ok(math::norm64(&attn::default_partial(q, cache)?.out))
}

/// Conditions hit while building a decode-time vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DecodeFlags {
    /// `‖q‖ = 0`: cosine and `μ_q` were set to 0.
    pub zero_query: bool,
    pub cpu_empty: bool,
}

/// Full 41-vector for the current query. Reads only accelerator segments of
/// `cache`; `cross_head_max` is the largest accelerator-only output norm
/// across the layer for the current step.
pub fn decode_features<C: KvSource + ?Sized>(
    q: &[f32],
    cache: &C,
    stats: &PrefillStats,
    cross_head_max: f64,
) -> Result<(FeatureVector, DecodeFlags)> {
    if q.len() != stats.dim || cache.dim() != stats.dim {
        return Err(Error::Shape {
            what: "query width",
            expected: stats.dim,
            found: q.len(),
        });
    }
    if !q.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut f = [0.0f64; FEATURE_DIM];
    let qn = math::norm(q);
    let sqrt_d = (stats.dim as f64).sqrt();
    let flags = DecodeFlags {
        zero_query: qn == 0.0,
        cpu_empty: stats.cpu_empty,
    };

    f[idx::LAYER] = stats.layer as f64;
    f[idx::HEAD] = stats.head as f64;
    f[idx::L_CPU] = cache.segment_len(Segment::Cpu) as f64;
    f[idx::L_GPU] = Segment::GPU.iter().map(|&s| cache.segment_len(s)).sum::<usize>() as f64;

    f[idx::K_SINK_NORM] = stats.k_sink_norm;
    f[idx::V_SINK_NORM] = stats.v_sink_norm;
    f[idx::MEAN_K_CPU_NORM] = stats.mean_k_cpu_norm;
    f[idx::MEAN_V_CPU_NORM] = stats.mean_v_cpu_norm;
    for (base, m) in [(idx::K_CPU_NORMS, stats.k_cpu_norms), (idx::V_CPU_NORMS, stats.v_cpu_norms)] {
        f[base..base + 4].copy_from_slice(&[m.mean, m.var, m.skew, m.kurt]);
    }

    f[idx::QK_MEAN_Q] = if qn > 0.0 {
        dot_mixed(q, &stats.mean_k_cpu) / (qn * sqrt_d)
    } else {
        0.0
    };
    let z = stats.z_anchor;
    f[idx::Z_ANCHOR..idx::Z_ANCHOR + 4].copy_from_slice(&[z.mean, z.var, z.skew, z.kurt]);

    let p_sink = attn::kv_attention(q, cache.segment(Segment::Sink))?;
    let p_local = local_partial(q, cache)?;
    f[idx::LSE_SINK_Q] = lse_or_sentinel(&p_sink);
    f[idx::LSE_CPU_Q] = approx_lse_cpu(q, stats);
    f[idx::LSE_LOCAL_Q] = lse_or_sentinel(&p_local);
    f[idx::LSE_ANCHOR..idx::LSE_ANCHOR + 3].copy_from_slice(&stats.anchor_lse);
    f[idx::OUT_SINK_Q] = math::norm64(&p_sink.out);
    f[idx::OUT_LOCAL_Q] = math::norm64(&p_local.out);
    f[idx::OUT_ANCHOR..idx::OUT_ANCHOR + 3].copy_from_slice(&stats.anchor_out_norm);

    f[idx::Q_NORM] = qn;
    f[idx::ANCHOR_NORM] = stats.anchor_norm;
    f[idx::Q_ANCHOR_COS] = if qn > 0.0 && stats.anchor_norm > 0.0 {
        math::dot(q, &stats.anchor) / (qn * stats.anchor_norm)
    } else {
        0.0
    };

    f[idx::BGT_ANCHOR..idx::BGT_ANCHOR + 4].copy_from_slice(&stats.anchor_budgets);
    f[idx::MAX_GPU_OUT_Q] = cross_head_max;
    f[idx::MAX_GPU_OUT_ANCHOR] = stats.anchor_cross_head_max;

    let fv = FeatureVector(f);
    if !fv.all_finite() {
        return Err(Error::NonFinite);
    }
    Ok((fv, flags))
}

/// Per-dimension standardization statistics from a training split.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FeatureNorms {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorms {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::BadNorms {
                expected: mean.len(),
                found: std.len(),
            });
        }
        Ok(Self { mean, std })
    }

    /// Mean 0, std 1 in every dimension.
    pub fn identity() -> Self {
        Self {
            mean: alloc::vec![0.0; FEATURE_DIM],
            std: alloc::vec![1.0; FEATURE_DIM],
        }
    }

    /// Population mean and standard deviation of each column.
    pub fn fit<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureVector>,
        I::IntoIter: Clone,
    {
        let rows = rows.into_iter();
        let mut mean = alloc::vec![0.0; FEATURE_DIM];
        let mut n = 0usize;
        for r in rows.clone() {
            n += 1;
            for (m, x) in mean.iter_mut().zip(r.0.iter()) {
                *m += x;
            }
        }
        if n == 0 {
            return Err(Error::NoData);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = alloc::vec![0.0; FEATURE_DIM];
        for r in rows {
            for ((v, x), m) in var.iter_mut().zip(r.0.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `(x − μ)/σ`; dimensions with `σ = 0` map to 0.
    pub fn normalize(&self, fv: &FeatureVector) -> Result<FeatureVector> {
        if self.mean.len() != FEATURE_DIM || self.std.len() != FEATURE_DIM {
            return Err(Error::BadNorms {
                expected: FEATURE_DIM,
                found: self.mean.len().min(self.std.len()),
            });
        }
        let mut out = [0.0; FEATURE_DIM];
        for (i, o) in out.iter_mut().enumerate() {
            let s = self.std[i];
            *o = if s > 0.0 { (fv.0[i] - self.mean[i]) / s } else { 0.0 };
        }
        Ok(FeatureVector(out))
    }
}

/// Free-function form of [`FeatureNorms::normalize`].
pub fn normalize(fv: &FeatureVector, norms: &FeatureNorms) -> Result<FeatureVector> {
    norms.normalize(fv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use alloc::vec;

    #[test]
    fn groups_sum_to_feature_dim() {
        assert_eq!(FEATURE_GROUPS.iter().map(|g| g.1).sum::<usize>(), FEATURE_DIM);
        assert_eq!(idx::MAX_GPU_OUT_ANCHOR, FEATURE_DIM - 1);
    }

    fn small_cache(cpu_rows: usize) -> SegmentedKvCache {
        let n = 4 + cpu_rows + 4;
        let keys = Matrix::new(n, 2, (0..2 * n).map(|x| ((x * 7 % 11) as f32) * 0.1).collect()).unwrap();
        let vals = Matrix::new(n, 2, (0..2 * n).map(|x| ((x * 5 % 13) as f32) * 0.2).collect()).unwrap();
        SegmentedKvCache::split(keys, vals, 4, 4).unwrap()
    }

    #[test]
    fn identity_and_orthogonal_queries() {
        let c = small_cache(20);
        let anchor = [1.0f32, 0.0];
        let st = prefill_stats(0, 0, &c, &anchor, [0.0; 4], 1.0).unwrap();
        let (f, _) = decode_features(&anchor, &c, &st, 1.0).unwrap();
        assert!((f.0[idx::Q_ANCHOR_COS] - 1.0).abs() < 1e-12);
        assert_eq!(f.0[idx::Q_NORM], f.0[idx::ANCHOR_NORM]);
        let (g, _) = decode_features(&[0.0, 2.0], &c, &st, 1.0).unwrap();
        assert_eq!(g.0[idx::Q_ANCHOR_COS], 0.0);
    }

    #[test]
    fn zero_query_is_flagged() {
        let c = small_cache(20);
        let st = prefill_stats(0, 0, &c, &[1.0, 1.0], [0.0; 4], 1.0).unwrap();
        let (f, flags) = decode_features(&[0.0, 0.0], &c, &st, 1.0).unwrap();
        assert!(flags.zero_query);
        assert_eq!(f.0[idx::Q_ANCHOR_COS], 0.0);
        assert_eq!(f.0[idx::LSE_CPU_Q], (20f64).ln());
    }

    #[test]
    fn empty_host_segment_uses_sentinels() {
        let c = small_cache(0);
        let st = prefill_stats(1, 2, &c, &[1.0, 1.0], [0.0; 4], 1.0).unwrap();
        assert!(st.cpu_empty);
        assert_eq!(st.anchor_lse[1], EMPTY_LSE);
        let (f, flags) = decode_features(&[0.5, 1.0], &c, &st, 1.0).unwrap();
        assert!(flags.cpu_empty && f.all_finite());
        assert_eq!(f.0[idx::LSE_CPU_Q], EMPTY_LSE);
    }

    #[test]
    fn constant_keys_are_degenerate() {
        let n = 40;
        let keys = Matrix::new(n, 2, vec![0.5; 2 * n]).unwrap();
        let vals = Matrix::new(n, 2, (0..2 * n).map(|x| x as f32).collect()).unwrap();
        let c = SegmentedKvCache::split(keys, vals, 4, 4).unwrap();
        let st = prefill_stats(0, 0, &c, &[0.3, -1.0], [0.0; 4], 1.0).unwrap();
        assert_eq!((st.z_anchor.var, st.z_anchor.skew, st.z_anchor.kurt), (0.0, 0.0, 0.0));
        // Point mass: the approximation is exact.
        let q = [2.0f32, 1.0];
        let exact = attn::kv_attention(&q, c.segment(Segment::Cpu)).unwrap().lse;
        assert!((approx_lse_cpu(&q, &st) - exact).abs() < 1e-9);
        assert_eq!(approx_lse_cpu(&[0.0, 0.0], &st), (32f64).ln());
    }

    struct Counting<'a> {
        inner: &'a SegmentedKvCache,
        cpu_reads: core::cell::Cell<usize>,
    }

    impl KvSource for Counting<'_> {
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn segment_len(&self, seg: Segment) -> usize {
            self.inner.len(seg)
        }
        fn segment(&self, seg: Segment) -> &KvSegment {
            if seg == Segment::Cpu {
                self.cpu_reads.set(self.cpu_reads.get() + 1);
            }
            self.inner.segment(seg)
        }
    }

    #[test]
    fn decode_never_reads_host_tensors() {
        let mut c = small_cache(50);
        c.push_new(&[0.1, 0.2], &[0.3, 0.4]).unwrap();
        let st = prefill_stats(0, 0, &c, &[1.0, -0.5], [0.1; 4], 2.0).unwrap();
        let w = Counting { inner: &c, cpu_reads: core::cell::Cell::new(0) };
        let cross = gpu_output_norm(&[0.4f32, 0.9], &w).unwrap();
        let (f, _) = decode_features(&[0.4, 0.9], &w, &st, cross).unwrap();
        assert_eq!(w.cpu_reads.get(), 0);
        assert_eq!(f.0[idx::L_CPU], 50.0);
        assert_eq!(f.0[idx::L_GPU], 9.0);
    }

    #[test]
    fn normalization_conventions() {
        let rows = [FeatureVector([1.0; FEATURE_DIM]), FeatureVector([3.0; FEATURE_DIM])];
        let mut norms = FeatureNorms::fit(rows.iter()).unwrap();
        assert!(norms.normalize(&FeatureVector([2.0; FEATURE_DIM])).unwrap().0.iter().all(|&x| x == 0.0));
        norms.std[5] = 0.0;
        assert_eq!(norms.normalize(&rows[1]).unwrap().0[5], 0.0);
        assert_eq!(norms.normalize(&rows[1]).unwrap().0[4], 1.0);
        let bad = FeatureNorms { mean: vec![0.0; 3], std: vec![1.0; 3] };
        assert!(matches!(bad.normalize(&rows[0]), Err(Error::BadNorms { .. })));
        assert_eq!(FeatureNorms::fit(core::iter::empty::<&FeatureVector>()), Err(Error::NoData));
    }
}
