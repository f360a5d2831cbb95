//! Offline ground truth for head properties.
//!
//! For one head at one decode step, the sparse output keeps the
//! accelerator-resident tokens and adds the top-`j` host blocks. Its deviation
//! is `‖o_sparse − o_full‖₂ / max_h' ‖o_h'‖₂`, where the denominator is the
//! largest full-attention output norm among all heads of the layer at that
//! step. The minimum budget at a granularity is the smallest `j` (as a
//! fraction of `L_cpu`) whose deviation is within `τ`.
//!
//! Budgets count host-resident tokens only; the sink and local tokens are
//! always kept and never charged.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::attn::{self, PartialOutput};
use crate::block::{self, BlockMetadata, SelectionResult};
use crate::cache::{Segment, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::math;

/// Granularities scanned when labeling: `blk = 1` anchors the intercept.
pub const LABEL_GRANULARITIES: [usize; 5] = [1, 16, 32, 64, 128];
/// Granularities the online selector chooses from.
pub const SELECT_GRANULARITIES: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_TAU: f64 = 0.10;
pub const DEFAULT_SINK_LEN: usize = 64;
pub const DEFAULT_LOCAL_LEN: usize = 256;

/// Denominator of the deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Normalization {
    /// Largest output norm across the layer's heads (relative head contribution).
    #[default]
    MaxHead,
    /// The head's own output norm; the plain per-head "Output(τ)" criterion.
    OwnHead,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ErrorBudgetConfig {
    pub tau: f64,
    /// Granularities labeled; must contain 1 and at least two others.
    pub granularities: Vec<usize>,
    pub sink_len: usize,
    pub local_len: usize,
    pub normalization: Normalization,
}

impl Default for ErrorBudgetConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            granularities: LABEL_GRANULARITIES.to_vec(),
            sink_len: DEFAULT_SINK_LEN,
            local_len: DEFAULT_LOCAL_LEN,
            normalization: Normalization::MaxHead,
        }
    }
}

impl ErrorBudgetConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self {
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(alloc::format!("tau must be positive, got {}", self.tau)));
        }
        if self.granularities.windows(2).any(|w| w[0] >= w[1]) || self.granularities.first() != Some(&1) {
            return Err(Error::InvalidConfig(
                "granularities must start at 1 and increase strictly".into(),
            ));
        }
        Ok(())
    }
}

/// `(bgt₀, k, s)`: intercept at `blk = 1`, slope per `log2(blk)`, streaming flag.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HeadProperties {
    pub bgt0: f64,
    pub slope: f64,
    pub streaming: bool,
}

impl HeadProperties {
    /// `bgt(blk) = bgt₀ + k·log2(blk)`, with negative slopes treated as 0 and
    /// the result clamped to `[0, 1]`.
    pub fn budget_at(&self, blk: usize) -> f64 {
        let k = self.slope.max(0.0);
        let b = self.bgt0 + k * (blk as f64).log2();
        if b.is_nan() {
            return 1.0;
        }
        b.clamp(0.0, 1.0)
    }
}

/// Largest output norm among a layer's heads.
pub fn output_normalizer(outputs: &[Vec<f64>]) -> Result<f64> {
    let max = outputs.iter().map(|o| math::norm64(o)).fold(0.0, f64::max);
    if max > 0.0 && max.is_finite() {
        Ok(max)
    } else {
        Err(Error::DegenerateNormalizer)
    }
}

/// Everything needed to evaluate sparse configurations of one head at one
/// decode step.
#[derive(Debug, Clone)]
pub struct HeadContext<'a> {
    pub query: &'a [f32],
    pub cache: &'a SegmentedKvCache,
    /// Exact attention output of this head.
    pub full: Vec<f64>,
    /// Deviation denominator.
    pub normalizer: f64,
    defaults: PartialOutput,
}

impl<'a> HeadContext<'a> {
    /// `full` is this head's exact output, `normalizer` the layer-wide
    /// denominator (see [`output_normalizer`]).
    pub fn new(
        query: &'a [f32],
        cache: &'a SegmentedKvCache,
        full: Vec<f64>,
        normalizer: f64,
    ) -> Result<Self> {
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(Error::DegenerateNormalizer);
        }
        let defaults = attn::default_partial(query, cache)?;
        Ok(Self {
            query,
            cache,
            full,
            normalizer,
            defaults,
        })
    }

    /// Builds a context that normalizes by the head's own output norm.
    pub fn own_normalized(query: &'a [f32], cache: &'a SegmentedKvCache) -> Result<Self> {
        let full = attn::cache_attention(query, cache)?.out;
        let n = math::norm64(&full);
        Self::new(query, cache, full, n)
    }

    pub fn cpu_len(&self) -> usize {
        self.cache.cpu_len()
    }

    /// Merged partial of the always-retained tokens.
    pub fn defaults(&self) -> &PartialOutput {
        &self.defaults
    }

    fn deviation_of(&self, approx: &PartialOutput) -> f64 {
        if approx.is_empty() {
            // Nothing retained at all: the output is undefined; count it as lost.
            return math::norm64(&self.full) / self.normalizer;
        }
        math::distance64(&approx.out, &self.full) / self.normalizer
    }

    /// Deviation of defaults + the selected host tokens from the exact output.
    pub fn output_deviation(&self, sel: &SelectionResult) -> Result<f64> {
        let sparse = block::sparse_attention(self.query, self.cache, sel)?;
        let mut merged = self.defaults.clone();
        merged.merge_in(&sparse);
        Ok(self.deviation_of(&merged))
    }

    /// Deviation after adding the top-`j` blocks, for `j = 0..=block_count`,
    /// in block-score rank order. Built incrementally from per-block partials.
    pub fn deviation_curve(&self, meta: &BlockMetadata) -> Result<Vec<f64>> {
        let cpu = self.cache.segment(Segment::Cpu);
        if meta.len() != cpu.len() {
            return Err(Error::StaleSelection {
                expected: meta.len(),
                found: cpu.len(),
            });
        }
        let ranked = meta.rank(self.query)?;
        let mut acc = self.defaults.clone();
        let mut curve = Vec::with_capacity(ranked.len() + 1);
        curve.push(self.deviation_of(&acc));
        for b in ranked {
            let part = attn::range_attention(self.query, &cpu.keys, &cpu.values, meta.block_range(b))?;
            acc.merge_in(&part);
            curve.push(self.deviation_of(&acc));
        }
        Ok(curve)
    }

    /// Smallest block-multiple budget at granularity `blk` meeting `tau`.
    pub fn min_budget(&self, blk: usize, tau: f64) -> Result<MinBudget> {
        let meta = block::build_metadata(&self.cache.segment(Segment::Cpu).keys, blk)?;
        self.min_budget_with(&meta, tau)
    }

    pub fn min_budget_with(&self, meta: &BlockMetadata, tau: f64) -> Result<MinBudget> {
        let curve = self.deviation_curve(meta)?;
        Ok(MinBudget::from_curve(meta, &curve, tau))
    }

    /// True when the retained tokens alone meet `tau`.
    pub fn is_streaming(&self, tau: f64) -> bool {
        self.cpu_len() == 0 || self.deviation_of(&self.defaults) <= tau
    }

    /// Full label: minimum budgets at every configured granularity, the fitted
    /// slope, and the streaming flag.
    pub fn label(&self, cfg: &ErrorBudgetConfig) -> Result<HeadLabel> {
        cfg.validate()?;
        self.curves(&cfg.granularities)?.label(cfg.tau)
    }

    /// Deviation curves at each granularity in `blks`.
    pub fn curves(&self, blks: &[usize]) -> Result<DeviationCurves> {
        let keys = &self.cache.segment(Segment::Cpu).keys;
        let curves = blks
            .iter()
            .map(|&b| Ok((b, self.deviation_curve(&block::build_metadata(keys, b)?)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DeviationCurves {
            cpu_len: self.cpu_len(),
            curves,
        })
    }

    /// Minimum host budget whose selected blocks, together with the retained
    /// tokens, hold at least `coverage` of the total attention mass. Blocks
    /// are taken by true attention mass, heaviest first.
    pub fn score_coverage_budget(&self, blk: usize, coverage: f64) -> Result<f64> {
        Ok(self.coverage_selection(blk, coverage)?.budget_realized)
    }

    /// The blocks behind [`score_coverage_budget`](Self::score_coverage_budget).
    pub fn coverage_selection(&self, blk: usize, coverage: f64) -> Result<SelectionResult> {
        let cpu = self.cache.segment(Segment::Cpu);
        let meta = block::build_metadata(&cpu.keys, blk)?;
        if cpu.is_empty() {
            return Ok(SelectionResult::empty(blk, 0));
        }
        if coverage >= 1.0 {
            let all: Vec<usize> = (0..meta.block_count()).collect();
            return block::select_blocks(&meta, &all);
        }
        let mut lses = Vec::with_capacity(meta.block_count());
        for b in 0..meta.block_count() {
            lses.push(attn::range_attention(self.query, &cpu.keys, &cpu.values, meta.block_range(b))?.lse);
        }
        let total_lse = {
            let mut all = lses.clone();
            all.push(self.defaults.lse);
            math::log_sum_exp(&all)
        };
        let mut covered = (self.defaults.lse - total_lse).exp();
        let mut chosen = Vec::new();
        for b in block::rank_desc(&lses) {
            if covered >= coverage {
                break;
            }
            covered += (lses[b] - total_lse).exp();
            chosen.push(b);
        }
        block::select_blocks(&meta, &chosen)
    }
}

/// Result of a minimum-budget scan at one granularity.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MinBudget {
    pub blk: usize,
    /// Fraction of `L_cpu` in the selected blocks.
    pub budget: f64,
    pub blocks: usize,
    /// Deviation at the chosen budget.
    pub deviation: f64,
    /// Even the full host segment misses `tau`; `budget` is then 1.
    pub saturated: bool,
}

impl MinBudget {
    fn from_curve(meta: &BlockMetadata, curve: &[f64], tau: f64) -> Self {
        Self::from_parts(meta.blk(), meta.len(), meta.block_count(), curve, tau)
    }

    fn from_parts(blk: usize, len: usize, block_count: usize, curve: &[f64], tau: f64) -> Self {
        let frac = |j: usize| {
            if len == 0 {
                0.0
            } else {
                (j * blk).min(len) as f64 / len as f64
            }
        };
        match curve.iter().position(|&d| d <= tau) {
            Some(j) => Self {
                blk,
                budget: frac(j),
                blocks: j,
                deviation: curve[j],
                saturated: false,
            },
            None => Self {
                blk,
                budget: if len == 0 { 0.0 } else { 1.0 },
                blocks: block_count,
                deviation: *curve.last().unwrap_or(&0.0),
                saturated: true,
            },
        }
    }
}

/// Deviation curves of one head at several granularities. Thresholds can be
/// applied afterwards without touching the cache again.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationCurves {
    pub cpu_len: usize,
    /// `(blk, curve)`; `curve[j]` is the deviation with the top `j` blocks.
    pub curves: Vec<(usize, Vec<f64>)>,
}

impl DeviationCurves {
    /// Deviation with only the retained tokens.
    pub fn default_deviation(&self) -> f64 {
        self.curves.first().and_then(|(_, c)| c.first()).copied().unwrap_or(0.0)
    }

    pub fn is_streaming(&self, tau: f64) -> bool {
        self.cpu_len == 0 || self.default_deviation() <= tau
    }

    pub fn min_budget(&self, blk: usize, tau: f64) -> Option<MinBudget> {
        self.curves.iter().find(|(b, _)| *b == blk).map(|(b, c)| {
            MinBudget::from_parts(*b, self.cpu_len, self.cpu_len.div_ceil(*b), c, tau)
        })
    }

    pub fn label(&self, tau: f64) -> Result<HeadLabel> {
        let budgets = self
            .curves
            .iter()
            .map(|(b, c)| (*b, MinBudget::from_parts(*b, self.cpu_len, self.cpu_len.div_ceil(*b), c, tau)))
            .collect();
        HeadLabel::from_budgets(budgets, self.is_streaming(tau))
    }
}

/// Least-squares line `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
}

/// Fits budget against `log2(blk)` by ordinary least squares.
pub fn fit_curve(points: &[(usize, f64)]) -> Result<LineFit> {
    let mut distinct: Vec<usize> = points.iter().map(|p| p.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 || distinct[0] == 0 {
        return Err(Error::Underdetermined);
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).log2()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, p) in xs.iter().zip(points) {
        sxy += (x - mx) * (p.1 - my);
        sxx += (x - mx) * (x - mx);
    }
    let slope = sxy / sxx;
    Ok(LineFit {
        intercept: my - slope * mx,
        slope,
    })
}

/// Label of one head at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadLabel {
    pub props: HeadProperties,
    /// Minimum budget per labeled granularity, ascending `blk`.
    pub budgets: Vec<(usize, MinBudget)>,
    /// Intercept of the free fit over `blk > 1`; kept for reporting only.
    pub fit_intercept: f64,
}

impl HeadLabel {
    /// `bgt₀` comes from the `blk = 1` scan; the slope from a free-intercept
    /// fit over the remaining granularities.
    pub fn from_budgets(budgets: Vec<(usize, MinBudget)>, streaming: bool) -> Result<Self> {
        let bgt0 = budgets
            .iter()
            .find(|(blk, _)| *blk == 1)
            .map(|(_, m)| m.budget)
            .ok_or(Error::Underdetermined)?;
        let points: Vec<(usize, f64)> = budgets
            .iter()
            .filter(|(blk, _)| *blk > 1)
            .map(|(blk, m)| (*blk, m.budget))
            .collect();
        let fit = fit_curve(&points)?;
        Ok(Self {
            props: HeadProperties {
                bgt0,
                slope: fit.slope,
                streaming,
            },
            budgets,
            fit_intercept: fit.intercept,
        })
    }

    pub fn budget(&self, blk: usize) -> Option<f64> {
        self.budgets.iter().find(|(b, _)| *b == blk).map(|(_, m)| m.budget)
    }

    pub fn saturated(&self) -> bool {
        self.budgets.iter().any(|(_, m)| m.saturated)
    }

    /// Gap between the anchored line and the free fit at `blk = 1`.
    pub fn intercept_discrepancy(&self) -> f64 {
        self.props.bgt0 - self.fit_intercept
    }
}

/// Contexts for every head of a layer at one step, sharing one normalizer.
pub fn layer_contexts<'a>(
    heads: &[(&'a [f32], &'a SegmentedKvCache)],
    normalization: Normalization,
) -> Result<Vec<HeadContext<'a>>> {
    let fulls: Vec<Vec<f64>> = heads
        .iter()
        .map(|(q, c)| attn::cache_attention(q, c).map(|p| p.out))
        .collect::<Result<_>>()?;
    let shared = match normalization {
        Normalization::MaxHead => Some(output_normalizer(&fulls)?),
        Normalization::OwnHead => None,
    };
    heads
        .iter()
        .zip(fulls)
        .map(|((q, c), full)| {
            let n = shared.unwrap_or_else(|| math::norm64(&full));
            HeadContext::new(q, c, full, n)
        })
        .collect()
}

/// Deviation with the host segment fully dropped, per head. Zero for heads
/// with nothing offloaded.
pub fn default_only_deviation(ctx: &HeadContext<'_>) -> f64 {
    ctx.deviation_of(&ctx.defaults)
}

/// Minimum budgets for several granularities from one context.
pub fn min_budgets(ctx: &HeadContext<'_>, blks: &[usize], tau: f64) -> Result<Vec<MinBudget>> {
    blks.iter().map(|&b| ctx.min_budget(b, tau)).collect()
}
