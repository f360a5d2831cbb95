//! Exact decode-time attention and log-sum-exp partials.
//!
//! Scores are `⟨q, k_i⟩ / √D`. Inputs are `f32`; every reduction runs in
//! `f64` and outputs are `f64`. A partial over a token subset carries its
//! normalized output and the log-sum-exp of its raw scores, which is all
//! that is needed to merge disjoint partials into the exact result.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::cache::{KvSegment, KvSource, Segment, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Matrix;

/// Attention over a subset of tokens, mergeable with other disjoint subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialOutput {
    /// Softmax-weighted value sum restricted to the subset.
    pub out: Vec<f64>,
    /// `log Σ exp(s_i)` over the subset; `−∞` when empty.
    pub lse: f64,
    /// Number of tokens covered.
    pub len: usize,
}

impl PartialOutput {
    /// The merge identity: no tokens, `lse = −∞`.
    pub fn empty(dim: usize) -> Self {
        Self {
            out: vec![0.0; dim],
            lse: f64::NEG_INFINITY,
            len: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.out.len()
    }

    /// Folds `other` into `self`. Both must cover disjoint token sets.
    pub fn merge_in(&mut self, other: &PartialOutput) {
        debug_assert_eq!(self.dim(), other.dim());
        if other.is_empty() {
            return;
        }
        if self.is_empty() {
            self.clone_from(other);
            return;
        }
        let hi = self.lse.max(other.lse);
        let wa = (self.lse - hi).exp();
        let wb = (other.lse - hi).exp();
        let total = wa + wb;
        let (wa, wb) = (wa / total, wb / total);
        for (o, x) in self.out.iter_mut().zip(&other.out) {
            *o = wa * *o + wb * x;
        }
        self.lse = hi + total.ln();
        self.len += other.len;
    }
}

#[inline]
pub(crate) fn scale(dim: usize) -> f64 {
    1.0 / (dim as f64).sqrt()
}

fn check_query(q: &[f32], keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.cols() != q.len() {
        return Err(Error::Shape {
            what: "key width",
            expected: q.len(),
            found: keys.cols(),
        });
    }
    if values.rows() != keys.rows() {
        return Err(Error::Shape {
            what: "value rows",
            expected: keys.rows(),
            found: values.rows(),
        });
    }
    if values.cols() != q.len() {
        return Err(Error::Shape {
            what: "value width",
            expected: q.len(),
            found: values.cols(),
        });
    }
    if q.is_empty() {
        return Err(Error::Shape {
            what: "head dimension",
            expected: 1,
            found: 0,
        });
    }
    if !q.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Attention restricted to the listed rows. The workhorse behind every
/// public entry point; an empty row set yields the identity partial.
fn attend<I>(q: &[f32], keys: &Matrix, values: &Matrix, rows: I) -> Result<PartialOutput>
where
    I: Iterator<Item = usize> + Clone,
{
    check_query(q, keys, values)?;
    let dim = q.len();
    let sc = scale(dim);
    let scores: Vec<f64> = rows.clone().map(|i| math::dot(q, keys.row(i)) * sc).collect();
    if scores.is_empty() {
        return Ok(PartialOutput::empty(dim));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut out = vec![0.0f64; dim];
    let mut sum = 0.0f64;
    for (s, i) in scores.iter().zip(rows) {
        let w = (s - max).exp();
        sum += w;
        for (o, v) in out.iter_mut().zip(values.row(i)) {
            *o += w * f64::from(*v);
        }
    }
    let inv = 1.0 / sum;
    for o in &mut out {
        *o *= inv;
    }
    if !sum.is_finite() || !out.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(PartialOutput {
        out,
        lse: max + sum.ln(),
        len: scores.len(),
    })
}

/// `softmax(q Kᵀ / √D) V` over every row of `keys`/`values`.
pub fn full_attention(q: &[f32], keys: &Matrix, values: &Matrix) -> Result<Vec<f64>> {
    if keys.is_empty() {
        return Err(Error::EmptyContext);
    }
    attend(q, keys, values, 0..keys.rows()).map(|p| p.out)
}

/// Partial attention over one segment. An empty segment is the identity.
pub fn segment_attention(q: &[f32], keys: &Matrix, values: &Matrix) -> Result<PartialOutput> {
    attend(q, keys, values, 0..keys.rows())
}

/// Partial attention over a subset of rows of one segment.
pub fn indexed_attention(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    rows: &[usize],
) -> Result<PartialOutput> {
    if let Some(&bad) = rows.iter().find(|&&i| i >= keys.rows()) {
        return Err(Error::BadBlock {
            block: bad,
            count: keys.rows(),
        });
    }
    attend(q, keys, values, rows.iter().copied())
}

/// Partial attention over a contiguous row range of one segment.
pub fn range_attention(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    range: core::ops::Range<usize>,
) -> Result<PartialOutput> {
    if range.end > keys.rows() {
        return Err(Error::BadBlock {
            block: range.end,
            count: keys.rows(),
        });
    }
    attend(q, keys, values, range)
}

pub fn kv_attention(q: &[f32], kv: &KvSegment) -> Result<PartialOutput> {
    segment_attention(q, &kv.keys, &kv.values)
}

/// Merges partials over disjoint token sets:
/// `o = Σ_S exp(lse_S − lse_tot)·o_S` with `lse_tot = log Σ_S exp(lse_S)`.
pub fn merge_partials(parts: &[PartialOutput]) -> Result<PartialOutput> {
    let dim = parts.first().map(PartialOutput::dim).ok_or(Error::EmptyContext)?;
    if let Some(p) = parts.iter().find(|p| p.dim() != dim) {
        return Err(Error::Shape {
            what: "partial width",
            expected: dim,
            found: p.dim(),
        });
    }
    let live: Vec<&PartialOutput> = parts.iter().filter(|p| !p.is_empty()).collect();
    if live.is_empty() {
        return Err(Error::EmptyContext);
    }
    let hi = live.iter().map(|p| p.lse).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = live.iter().map(|p| (p.lse - hi).exp()).sum();
    let lse = hi + total.ln();
    let mut out = vec![0.0; dim];
    for p in &live {
        let w = (p.lse - hi).exp() / total;
        for (o, x) in out.iter_mut().zip(&p.out) {
            *o += w * x;
        }
    }
    Ok(PartialOutput {
        out,
        lse,
        len: live.iter().map(|p| p.len).sum(),
    })
}

/// Merged partial over the accelerator-resident segments (sink, local, new).
pub fn default_partial<C: KvSource + ?Sized>(q: &[f32], cache: &C) -> Result<PartialOutput> {
    let mut acc = PartialOutput::empty(cache.dim());
    for seg in Segment::GPU {
        if cache.segment_len(seg) > 0 {
            acc.merge_in(&kv_attention(q, cache.segment(seg))?);
        }
    }
    Ok(acc)
}

/// Full attention over every segment of a cache, computed by merging the
/// four segment partials.
pub fn cache_attention(q: &[f32], cache: &SegmentedKvCache) -> Result<PartialOutput> {
    let mut acc = default_partial(q, cache)?;
    acc.merge_in(&kv_attention(q, cache.segment(Segment::Cpu))?);
    if acc.is_empty() {
        return Err(Error::EmptyContext);
    }
    Ok(acc)
}

/// One query head of a GQA group.
#[derive(Debug, Clone, Copy)]
pub struct GroupMember<'a> {
    pub head: usize,
    pub query: &'a [f32],
    pub cache: &'a SegmentedKvCache,
}

/// `G` query heads sharing one KV cache. MHA is the `G = 1` case.
#[derive(Debug, Clone)]
pub struct GqaGroup<'a> {
    cache: &'a SegmentedKvCache,
    heads: Vec<usize>,
    queries: Vec<&'a [f32]>,
}

/// Groups heads that share KV storage. Sharing is by identity, not value.
pub fn gqa_group_view<'a>(members: &[GroupMember<'a>]) -> Result<GqaGroup<'a>> {
    let first = members.first().ok_or(Error::EmptyGroup)?;
    if members.iter().any(|m| !core::ptr::eq(m.cache, first.cache)) {
        return Err(Error::MixedGroup);
    }
    Ok(GqaGroup {
        cache: first.cache,
        heads: members.iter().map(|m| m.head).collect(),
        queries: members.iter().map(|m| m.query).collect(),
    })
}

impl<'a> GqaGroup<'a> {
    pub fn size(&self) -> usize {
        self.heads.len()
    }

    pub fn cache(&self) -> &'a SegmentedKvCache {
        self.cache
    }

    pub fn heads(&self) -> &[usize] {
        &self.heads
    }

    pub fn query(&self, i: usize) -> &'a [f32] {
        self.queries[i]
    }

    /// Exact attention output of every head in the group.
    pub fn full_attention(&self) -> Result<Vec<Vec<f64>>> {
        self.queries
            .iter()
            .map(|q| cache_attention(q, self.cache).map(|p| p.out))
            .collect()
    }
}
