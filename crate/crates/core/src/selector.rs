//! Per-group choice of block granularity and per-head budgets.
//!
//! For every candidate `blk` the group's data-access volume is
//! `V(blk) = 2·L_cpu/blk + 2·L_cpu·Σ_h bgt_h(blk)` in token-rows: the first
//! term reads min and max metadata, the second the selected keys and values.
//! The minimizer wins, ties going to the coarser granularity.

use alloc::vec::Vec;

use crate::budget::{HeadLabel, HeadProperties, SELECT_GRANULARITIES};
use crate::error::{Error, Result};

/// Anything that yields a per-granularity budget for one head.
pub trait HeadBudget {
    fn streaming(&self) -> bool;
    /// Budget at `blk`, already clamped to `[0, 1]`.
    fn budget(&self, blk: usize) -> f64;
}

impl HeadBudget for HeadProperties {
    fn streaming(&self) -> bool {
        self.streaming
    }

    fn budget(&self, blk: usize) -> f64 {
        self.budget_at(blk)
    }
}

/// Oracle labels: the measured budget where one exists, the fitted line elsewhere.
impl HeadBudget for HeadLabel {
    fn streaming(&self) -> bool {
        self.props.streaming
    }

    fn budget(&self, blk: usize) -> f64 {
        match HeadLabel::budget(self, blk) {
            Some(b) => b.clamp(0.0, 1.0),
            None => self.props.budget_at(blk),
        }
    }
}

impl<T: HeadBudget + ?Sized> HeadBudget for &T {
    fn streaming(&self) -> bool {
        (**self).streaming()
    }

    fn budget(&self, blk: usize) -> f64 {
        (**self).budget(blk)
    }
}

/// Data-access volume in token-rows. Budgets outside `[0, 1]` are clamped.
pub fn volume(blk: usize, cpu_len: usize, budgets: &[f64]) -> f64 {
    let l = cpu_len as f64;
    let sum: f64 = budgets.iter().map(|b| b.clamp(0.0, 1.0)).sum();
    2.0 * l / blk as f64 + 2.0 * l * sum
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupPlan {
    pub group: u64,
    /// Chosen granularity. For streaming groups this is the coarsest
    /// candidate and carries no meaning.
    pub blk: usize,
    /// Per-head budget at `blk`; 0 for streaming heads.
    pub budgets: Vec<f64>,
    /// `V(blk)`; 0 for streaming groups.
    pub volume: f64,
    /// `(blk, V(blk))` for every candidate evaluated.
    pub candidates: Vec<(usize, f64)>,
    pub streaming_group: bool,
    pub heads_streaming: Vec<bool>,
    pub cpu_len: usize,
}

impl GroupPlan {
    pub fn heads(&self) -> usize {
        self.budgets.len()
    }

    pub fn retrieval_heads(&self) -> usize {
        self.heads_streaming.iter().filter(|s| !**s).count()
    }
}

/// Plans a group over the standard candidates `{16, 32, 64, 128}`.
pub fn plan_group(group: u64, props: &[HeadProperties], cpu_len: usize) -> Result<GroupPlan> {
    plan_group_with(group, props, cpu_len, &SELECT_GRANULARITIES)
}

pub fn plan_group_with<B: HeadBudget>(
    group: u64,
    heads: &[B],
    cpu_len: usize,
    candidates: &[usize],
) -> Result<GroupPlan> {
    if heads.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let coarsest = candidates.iter().copied().max().ok_or(Error::InvalidGranularity(0))?;
    if let Some(&bad) = candidates.iter().find(|&&b| b == 0) {
        return Err(Error::InvalidGranularity(bad));
    }
    let heads_streaming: Vec<bool> = heads.iter().map(|h| h.streaming()).collect();
    if heads_streaming.iter().all(|&s| s) {
        return Ok(GroupPlan {
            group,
            blk: coarsest,
            budgets: alloc::vec![0.0; heads.len()],
            volume: 0.0,
            candidates: Vec::new(),
            streaming_group: true,
            heads_streaming,
            cpu_len,
        });
    }

    let budgets_at = |blk: usize| -> Vec<f64> {
        heads
            .iter()
            .map(|h| if h.streaming() { 0.0 } else { h.budget(blk).clamp(0.0, 1.0) })
            .collect()
    };
    let evaluated: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&blk| (blk, volume(blk, cpu_len, &budgets_at(blk))))
        .collect();
    let &(blk, v) = evaluated
        .iter()
        .reduce(|best, cur| {
            if cur.1 < best.1 || (cur.1 == best.1 && cur.0 > best.0) {
                cur
            } else {
                best
            }
        })
        .expect("candidate list is non-empty");

    Ok(GroupPlan {
        group,
        blk,
        budgets: budgets_at(blk),
        volume: v,
        candidates: evaluated,
        streaming_group: false,
        heads_streaming,
        cpu_len,
    })
}

/// Scheduling priority of a plan: its volume. Larger goes first.
pub fn priority(plan: &GroupPlan) -> Result<f64> {
    if plan.streaming_group {
        Err(Error::NotSchedulable)
    } else {
        Ok(plan.volume)
    }
}
