//! Deterministic synthetic attention workloads with planted structure.
//!
//! Each GQA group owns one KV cache. Keys are Gaussian with query-aligned
//! components planted along orthonormal directions:
//!
//! * the first `sink_len` tokens carry a shared sink direction and have
//!   their values scaled down;
//! * the trailing local window carries a recency direction whose weight
//!   ramps up towards the end;
//! * retrieval heads own short needle spans in the offloaded region, each
//!   with its own direction.
//!
//! A query's component along a planted direction equals the score boost the
//! matching tokens receive, because planted key components have norm `√D`.
//! Heads differ only in their queries: streaming heads lean on the sink,
//! retrieval heads on their needles, diffuse heads spread mass widely.

use alloc::string::ToString;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[allow(unused_imports)]
use num_traits::Float;

use crate::cache::SegmentedKvCache;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Archetype {
    Streaming,
    Retrieval,
    Diffuse,
}

impl Archetype {
    pub fn code(self) -> u8 {
        match self {
            Archetype::Streaming => 0,
            Archetype::Retrieval => 1,
            Archetype::Diffuse => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Archetype::Streaming),
            1 => Some(Archetype::Retrieval),
            2 => Some(Archetype::Diffuse),
            _ => None,
        }
    }
}

/// Probability of each archetype per head.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchetypeMix {
    pub streaming: f64,
    pub retrieval: f64,
    pub diffuse: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct WorkloadSpec {
    pub seed: u64,
    pub samples: usize,
    pub layers: usize,
    pub heads: usize,
    pub group_size: usize,
    pub dim: usize,
    pub context_len: usize,
    pub sink_len: usize,
    pub local_len: usize,
    pub mix: ArchetypeMix,
    pub needles: usize,
    pub needle_len: usize,
    /// Score boost of a retrieval head's needle tokens.
    pub needle_strength: f64,
    /// Score boost of sink tokens for a streaming head; other archetypes
    /// use a fraction of it.
    pub sink_strength: f64,
    pub sink_value_scale: f64,
    /// Score boost of the newest local token.
    pub local_strength: f64,
    /// Norm of the shared value offset, in units of `√D`.
    pub value_bias: f64,
    /// Standard deviation of the unplanted key elements.
    pub key_scale: f64,
    /// Per-element standard deviation of the query noise.
    pub query_noise: f64,
    /// Per-element standard deviation of diffuse-head query noise.
    pub diffuse_noise: f64,
    /// Range of the per-head multiplier on `sink_strength`.
    pub sink_jitter: (f64, f64),
    pub rho: f64,
    pub decode_steps: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            samples: 8,
            layers: 2,
            heads: 8,
            group_size: 4,
            dim: 64,
            context_len: 4096,
            sink_len: 64,
            local_len: 256,
            mix: ArchetypeMix {
                streaming: 0.5,
                retrieval: 0.35,
                diffuse: 0.15,
            },
            needles: 2,
            needle_len: 8,
            needle_strength: 8.0,
            sink_strength: 9.0,
            sink_value_scale: 0.1,
            local_strength: 3.0,
            value_bias: 1.0,
            key_scale: 1.0,
            query_noise: 0.5,
            diffuse_noise: 1.5,
            sink_jitter: (0.9, 1.1),
            rho: 0.9,
            decode_steps: 4,
        }
    }
}

impl WorkloadSpec {
    /// Every head leans on the sink, with a sink share that varies between
    /// heads; the remaining mass is spread over the offloaded region.
    pub fn sink_planted() -> Self {
        Self {
            mix: ArchetypeMix {
                streaming: 1.0,
                retrieval: 0.0,
                diffuse: 0.0,
            },
            sink_jitter: (0.6, 0.9),
            ..Self::default()
        }
    }

    pub fn kv_groups(&self) -> usize {
        self.heads / self.group_size.max(1)
    }

    pub fn cpu_len(&self) -> usize {
        self.context_len.saturating_sub(self.sink_len + self.local_len)
    }

    /// Number of planted directions a group needs.
    fn directions(&self) -> usize {
        2 + self.group_size * self.needles
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InfeasibleSpec(m.to_string()));
        if self.context_len <= self.sink_len + self.local_len {
            return bad("context must exceed sink plus local window");
        }
        if self.samples == 0 || self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return bad("samples, layers, heads and dim must be positive");
        }
        if self.group_size == 0 || self.heads % self.group_size != 0 {
            return bad("heads must be a multiple of the group size");
        }
        let m = self.mix;
        let parts = [m.streaming, m.retrieval, m.diffuse];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("archetype mix must be non-negative and sum to 1");
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return bad("query drift must lie in [-1, 1]");
        }
        if self.directions() >= self.dim {
            return bad("dimension too small for the planted directions");
        }
        if m.retrieval > 0.0 && (self.needles == 0 || self.needle_len == 0) {
            return bad("retrieval heads need at least one non-empty needle");
        }
        if self.group_size * self.needles * self.needle_len * 2 > self.cpu_len() {
            return bad("needles do not fit in the offloaded region");
        }
        if !(self.sink_jitter.0 <= self.sink_jitter.1) {
            return bad("sink jitter range is reversed");
        }
        let reals = [
            self.needle_strength,
            self.sink_strength,
            self.sink_value_scale,
            self.local_strength,
            self.value_bias,
            self.key_scale,
            self.query_noise,
            self.diffuse_noise,
        ];
        if reals.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("strengths and scales must be finite and non-negative");
        }
        Ok(())
    }
}

/// A planted needle: `len` consecutive tokens starting at absolute position `start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NeedleSpan {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWorkload {
    /// Head index within the layer.
    pub head: usize,
    pub archetype: Archetype,
    pub needles: Vec<NeedleSpan>,
    /// Last prefill query.
    pub anchor: Vec<f32>,
    /// One query per decode step.
    pub queries: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupWorkload {
    /// Group index within the layer.
    pub group: usize,
    /// Prefill cache; the generated-token segment is empty.
    pub cache: SegmentedKvCache,
    /// Key and value generated at each decode step, appended before that
    /// step's attention.
    pub decode_kv: Vec<(Vec<f32>, Vec<f32>)>,
    pub heads: Vec<HeadWorkload>,
}

impl GroupWorkload {
    /// Cache as seen at decode step `step`.
    pub fn cache_at(&self, step: usize) -> Result<SegmentedKvCache> {
        let mut c = self.cache.clone();
        for (k, v) in self.decode_kv.iter().take(step + 1) {
            c.push_new(k, v)?;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWorkload {
    pub sample: usize,
    pub layer: usize,
    pub groups: Vec<GroupWorkload>,
}

/// splitmix64 finalizer.
fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of one `(sample, layer, group)` cell, independent of generation order.
pub fn group_seed(seed: u64, sample: usize, layer: usize, group: usize) -> u64 {
    mix64(mix64(mix64(seed) ^ sample as u64) ^ ((layer as u64) << 32 | group as u64))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// `count` orthonormal vectors in `R^dim` by Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn to_f32(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| v as f32).collect()
}

/// Planted query components of one head, fixed for the whole sample.
struct QueryShape {
    sink: f64,
    local: f64,
    needles: Vec<(usize, f64)>,
    noise: f64,
}

fn draw_query(rng: &mut ChaCha8Rng, dirs: &[Vec<f64>], shape: &QueryShape, dim: usize) -> Vec<f64> {
    let mut q = gaussian(rng, dim, shape.noise);
    axpy(&mut q, shape.sink, &dirs[0]);
    axpy(&mut q, shape.local, &dirs[1]);
    for &(d, a) in &shape.needles {
        axpy(&mut q, a, &dirs[d]);
    }
    q
}

/// Generates every group of one layer of one sample.
pub fn generate_layer(spec: &WorkloadSpec, sample: usize, layer: usize) -> Result<LayerWorkload> {
    spec.validate()?;
    let groups = (0..spec.kv_groups())
        .map(|g| generate_group(spec, sample, layer, g))
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerWorkload {
        sample,
        layer,
        groups,
    })
}

pub fn generate_group(spec: &WorkloadSpec, sample: usize, layer: usize, group: usize) -> Result<GroupWorkload> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(group_seed(spec.seed, sample, layer, group));
    let d = spec.dim;
    let l = spec.context_len;
    let sqrt_d = (d as f64).sqrt();
    let dirs = orthonormal(&mut rng, d, spec.directions());
    let value_dir = orthonormal(&mut rng, d, 1).pop().expect("one direction");
    let cpu_start = spec.sink_len;
    let cpu_end = l - spec.local_len;

    // Archetypes and needle placement.
    let mut archetypes = Vec::with_capacity(spec.group_size);
    for _ in 0..spec.group_size {
        let u: f64 = rng.random();
        let a = if u < spec.mix.streaming {
            Archetype::Streaming
        } else if u < spec.mix.streaming + spec.mix.retrieval {
            Archetype::Retrieval
        } else {
            Archetype::Diffuse
        };
        archetypes.push(a);
    }
    let mut taken: Vec<NeedleSpan> = Vec::new();
    let mut needle_of = alloc::vec![usize::MAX; l];
    let mut head_needles: Vec<Vec<(NeedleSpan, usize)>> = alloc::vec![Vec::new(); spec.group_size];
    for (h, a) in archetypes.iter().enumerate() {
        if *a != Archetype::Retrieval {
            continue;
        }
        for n in 0..spec.needles {
            let dir = 2 + h * spec.needles + n;
            let span = loop {
                let start = rng.random_range(cpu_start..=cpu_end - spec.needle_len);
                let s = NeedleSpan {
                    start,
                    len: spec.needle_len,
                };
                let clear = taken
                    .iter()
                    .all(|t| s.start >= t.start + t.len + 1 || t.start >= s.start + s.len + 1);
                if clear {
                    break s;
                }
            };
            taken.push(span);
            for p in span.start..span.start + span.len {
                needle_of[p] = dir;
            }
            head_needles[h].push((span, dir));
        }
    }

    // Keys and values.
    let mut keys = Vec::with_capacity(l * d);
    let mut values = Vec::with_capacity(l * d);
    let bias = spec.value_bias * sqrt_d;
    let make_value = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
        let mut v = gaussian(rng, d, 1.0);
        axpy(&mut v, bias, &value_dir);
        v.iter_mut().for_each(|x| *x *= scale);
        v
    };
    for i in 0..l {
        let mut k = gaussian(&mut rng, d, spec.key_scale);
        let mut vscale = 1.0;
        if i < spec.sink_len {
            axpy(&mut k, sqrt_d, &dirs[0]);
            vscale = spec.sink_value_scale;
        } else if i >= cpu_end {
            let ramp = (i - cpu_end + 1) as f64 / spec.local_len as f64;
            axpy(&mut k, sqrt_d * ramp, &dirs[1]);
        } else if needle_of[i] != usize::MAX {
            axpy(&mut k, sqrt_d, &dirs[needle_of[i]]);
        }
        keys.extend(k.iter().map(|&x| x as f32));
        values.extend(make_value(&mut rng, vscale).iter().map(|&x| x as f32));
    }
    let cache = SegmentedKvCache::split(
        Matrix::new(l, d, keys)?,
        Matrix::new(l, d, values)?,
        spec.sink_len,
        spec.local_len,
    )?;

    let decode_kv = (0..spec.decode_steps)
        .map(|_| {
            let mut k = gaussian(&mut rng, d, spec.key_scale);
            axpy(&mut k, sqrt_d, &dirs[1]);
            (to_f32(&k), to_f32(&make_value(&mut rng, 1.0)))
        })
        .collect();

    // Queries.
    let (jlo, jhi) = spec.sink_jitter;
    let mut heads = Vec::with_capacity(spec.group_size);
    for (h, &arch) in archetypes.iter().enumerate() {
        let jitter = if jhi > jlo { rng.random_range(jlo..=jhi) } else { jlo };
        let s = spec.sink_strength * jitter;
        let shape = match arch {
            Archetype::Streaming => QueryShape {
                sink: s,
                local: spec.local_strength,
                needles: Vec::new(),
                noise: spec.query_noise,
            },
            Archetype::Retrieval => QueryShape {
                sink: s * 0.55,
                local: spec.local_strength,
                needles: head_needles[h]
                    .iter()
                    .map(|&(_, dir)| (dir, spec.needle_strength * rng.random_range(0.9..1.1)))
                    .collect(),
                noise: spec.query_noise,
            },
            Archetype::Diffuse => QueryShape {
                sink: s * 0.35,
                local: spec.local_strength * 0.5,
                needles: Vec::new(),
                noise: spec.diffuse_noise,
            },
        };
        let anchor = draw_query(&mut rng, &dirs, &shape, d);
        let mut prev = anchor.clone();
        let mut queries = Vec::with_capacity(spec.decode_steps);
        let keep = (1.0 - spec.rho * spec.rho).max(0.0).sqrt();
        for _ in 0..spec.decode_steps {
            let fresh = draw_query(&mut rng, &dirs, &shape, d);
            let mut q: Vec<f64> = prev.iter().map(|x| spec.rho * x).collect();
            axpy(&mut q, keep, &fresh);
            let (nq, nf) = (norm(&q), norm(&fresh));
            if nq > 0.0 {
                q.iter_mut().for_each(|x| *x *= nf / nq);
            }
            queries.push(to_f32(&q));
            prev = q;
        }
        heads.push(HeadWorkload {
            head: group * spec.group_size + h,
            archetype: arch,
            needles: head_needles[h].iter().map(|&(s, _)| s).collect(),
            anchor: to_f32(&anchor),
            queries,
        });
    }

    Ok(GroupWorkload {
        group,
        cache,
        decode_kv,
        heads,
    })
}
