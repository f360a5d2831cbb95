//! Logical blocking of the host-resident segment and query-aware block
//! selection.
//!
//! Each block of `blk` consecutive tokens is summarized by the element-wise
//! minimum and maximum of its keys. For a query `q` the block score
//! `Σ_d max(q_d·min_d, q_d·max_d)` upper-bounds `⟨q, k_i⟩` for every token in
//! the block. Blocks are logical: re-blocking at another granularity is a
//! pure recomputation over the same key rows.

use alloc::vec::Vec;
use core::cmp::Ordering;
use core::ops::Range;

#[allow(unused_imports)]
use num_traits::Float;

use crate::attn::{self, PartialOutput};
use crate::cache::{Segment, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMetadata {
    blk: usize,
    dim: usize,
    len: usize,
    mins: Vec<f32>,
    maxs: Vec<f32>,
}

/// Builds min/max metadata over `keys` with `blk` tokens per block. The last
/// block may be partial; it is scored like any other block.
pub fn build_metadata(keys: &Matrix, blk: usize) -> Result<BlockMetadata> {
    if blk == 0 {
        return Err(Error::InvalidGranularity(blk));
    }
    let dim = keys.cols();
    let len = keys.rows();
    let count = len.div_ceil(blk);
    let mut mins = Vec::with_capacity(count * dim);
    let mut maxs = Vec::with_capacity(count * dim);
    for b in 0..count {
        let start = b * blk;
        let end = (start + blk).min(len);
        let first = keys.row(start);
        let mut lo = first.to_vec();
        let mut hi = first.to_vec();
        for i in start + 1..end {
            for ((l, h), &k) in lo.iter_mut().zip(hi.iter_mut()).zip(keys.row(i)) {
                *l = l.min(k);
                *h = h.max(k);
            }
        }
        mins.extend_from_slice(&lo);
        maxs.extend_from_slice(&hi);
    }
    Ok(BlockMetadata {
        blk,
        dim,
        len,
        mins,
        maxs,
    })
}

impl BlockMetadata {
    pub fn blk(&self) -> usize {
        self.blk
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tokens covered (`L_cpu`).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn block_count(&self) -> usize {
        self.len.div_ceil(self.blk)
    }

    pub fn block_range(&self, b: usize) -> Range<usize> {
        let start = b * self.blk;
        start..(start + self.blk).min(self.len)
    }

    pub fn min_vec(&self, b: usize) -> &[f32] {
        &self.mins[b * self.dim..(b + 1) * self.dim]
    }

    pub fn max_vec(&self, b: usize) -> &[f32] {
        &self.maxs[b * self.dim..(b + 1) * self.dim]
    }

    /// Upper-bound score of block `b` for query `q` (unscaled inner-product units).
    pub fn score(&self, q: &[f32], b: usize) -> Result<f64> {
        if b >= self.block_count() {
            return Err(Error::BadBlock {
                block: b,
                count: self.block_count(),
            });
        }
        if q.len() != self.dim {
            return Err(Error::Shape {
                what: "query width",
                expected: self.dim,
                found: q.len(),
            });
        }
        Ok(self.score_unchecked(q, b))
    }

    // Each term dominates q_d·k_d exactly (f32 products are exact in f64).
    // The sum itself rounds, so a slack of a few ulps of the magnitude sum is
    // added; that keeps the result above the real inner product and above any
    // f64 evaluation of it, whatever the summation order.
    fn score_unchecked(&self, q: &[f32], b: usize) -> f64 {
        let lo = self.min_vec(b);
        let hi = self.max_vec(b);
        let mut sum = 0.0f64;
        let mut mag = 0.0f64;
        for d in 0..self.dim {
            let qd = f64::from(q[d]);
            let (a, c) = (qd * f64::from(lo[d]), qd * f64::from(hi[d]));
            sum += a.max(c);
            mag += a.abs().max(c.abs());
        }
        sum + 2.0 * (self.dim as f64 + 1.0) * f64::EPSILON * mag
    }

    pub fn scores(&self, q: &[f32]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::Shape {
                what: "query width",
                expected: self.dim,
                found: q.len(),
            });
        }
        Ok((0..self.block_count()).map(|b| self.score_unchecked(q, b)).collect())
    }

    /// Block ids by descending score; ties go to the lower id.
    pub fn rank(&self, q: &[f32]) -> Result<Vec<usize>> {
        let scores = self.scores(q)?;
        Ok(rank_desc(&scores))
    }
}

/// Free-function form of [`BlockMetadata::score`].
pub fn block_score(q: &[f32], meta: &BlockMetadata, b: usize) -> Result<f64> {
    meta.score(q, b)
}

pub(crate) fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Outcome of top-k block selection over the host-resident segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub blk: usize,
    /// `L_cpu` of the segment the selection was built against.
    pub context_len: usize,
    /// Selected block ids, ascending.
    pub selected_blocks: Vec<usize>,
    /// Token rows of the selected blocks, ascending.
    pub token_indices: Vec<usize>,
    /// `|token_indices| / L_cpu`, 0 for an empty segment.
    pub budget_realized: f64,
    /// Set when more blocks were requested than exist.
    pub clamped: bool,
}

impl SelectionResult {
    pub fn empty(blk: usize, context_len: usize) -> Self {
        Self {
            blk,
            context_len,
            selected_blocks: Vec::new(),
            token_indices: Vec::new(),
            budget_realized: 0.0,
            clamped: false,
        }
    }

    fn from_blocks(meta: &BlockMetadata, mut blocks: Vec<usize>, clamped: bool) -> Self {
        blocks.sort_unstable();
        let token_indices: Vec<usize> = blocks.iter().flat_map(|&b| meta.block_range(b)).collect();
        let budget_realized = if meta.len == 0 {
            0.0
        } else {
            token_indices.len() as f64 / meta.len as f64
        };
        Self {
            blk: meta.blk,
            context_len: meta.len,
            selected_blocks: blocks,
            token_indices,
            budget_realized,
            clamped,
        }
    }
}

/// Selects the `k` highest-scoring blocks (ties to the lower id). Asking for
/// more than `block_count` selects everything and sets `clamped`.
pub fn topk_blocks(q: &[f32], meta: &BlockMetadata, k: usize) -> Result<SelectionResult> {
    let ranked = meta.rank(q)?;
    let clamped = k > ranked.len();
    let take = k.min(ranked.len());
    Ok(SelectionResult::from_blocks(meta, ranked[..take].to_vec(), clamped))
}

/// Selection from an explicit block list (e.g. an oracle ranking prefix).
pub fn select_blocks(meta: &BlockMetadata, blocks: &[usize]) -> Result<SelectionResult> {
    let count = meta.block_count();
    let mut seen = alloc::vec![false; count];
    for &b in blocks {
        if b >= count || seen[b] {
            return Err(Error::BadBlock { block: b, count });
        }
        seen[b] = true;
    }
    Ok(SelectionResult::from_blocks(meta, blocks.to_vec(), false))
}

/// Number of blocks for a token budget: `ceil(bgt · L_cpu / blk)`, capped at
/// the block count. The realized budget is never below the request.
pub fn blocks_for_budget(budget: f64, len: usize, blk: usize) -> usize {
    if len == 0 || blk == 0 || budget <= 0.0 {
        return 0;
    }
    let exact = budget.min(1.0) * len as f64 / blk as f64;
    // Budgets that are exact block multiples must not round up by one.
    let k = (exact - 1e-9).ceil().max(0.0) as usize;
    k.min(len.div_ceil(blk))
}

/// Top-k selection sized from a budget fraction.
pub fn select_budget(q: &[f32], meta: &BlockMetadata, budget: f64) -> Result<SelectionResult> {
    topk_blocks(q, meta, blocks_for_budget(budget, meta.len, meta.blk))
}

/// Partial attention over the selected host-resident tokens only.
pub fn sparse_attention(
    q: &[f32],
    cache: &SegmentedKvCache,
    sel: &SelectionResult,
) -> Result<PartialOutput> {
    let cpu = cache.segment(Segment::Cpu);
    if sel.context_len != cpu.len() {
        return Err(Error::StaleSelection {
            expected: sel.context_len,
            found: cpu.len(),
        });
    }
    attn::indexed_attention(q, &cpu.keys, &cpu.values, &sel.token_indices)
}
