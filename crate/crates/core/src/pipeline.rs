//! Per-layer drivers: oracle labeling of generated workloads and decode-time
//! evaluation of budgeting policies.
//!
//! Everything here works on one `(sample, layer)` at a time so callers can
//! parallelize across cells and keep memory bounded.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::attn::GroupMember;
use crate::block::{self, BlockMetadata, SelectionResult};
use crate::budget::{
    layer_contexts, HeadContext, HeadLabel, Normalization, DEFAULT_TAU, LABEL_GRANULARITIES,
    SELECT_GRANULARITIES,
};
use crate::cache::{Segment, SegmentedKvCache};
use crate::error::{Error, Result};
use crate::features::{decode_features, gpu_output_norm, prefill_stats, FeatureVector, PrefillStats};
use crate::predictor::{HeadPredictor, LabeledRow, Labels};
use crate::schedule::{simulate_policy, CostModel, Policy, ScheduleReport, SparseTask, TaskCost, WorkerProfile};
use crate::selector::{plan_group, plan_group_with, GroupPlan};
use crate::workload::{Archetype, LayerWorkload, WorkloadSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct LabelConfig {
    /// Thresholds to label at; curves are computed once and reused.
    pub taus: Vec<f64>,
    /// Threshold of the anchor-budget features.
    pub feature_tau: f64,
    pub normalization: Normalization,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            taus: alloc::vec![DEFAULT_TAU],
            feature_tau: DEFAULT_TAU,
            normalization: Normalization::MaxHead,
        }
    }
}

/// One head at one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub sample: usize,
    pub layer: usize,
    pub group: usize,
    pub head: usize,
    pub step: usize,
    pub archetype: Archetype,
    pub cpu_len: usize,
    pub features: FeatureVector,
    /// One label per configured threshold, same order.
    pub labels: Vec<HeadLabel>,
}

impl HeadRecord {
    pub fn row(&self, tau_index: usize) -> LabeledRow {
        let p = self.labels[tau_index].props;
        LabeledRow {
            sample: self.sample as u32,
            layer: self.layer as u32,
            head: self.head as u32,
            step: self.step as u32,
            features: self.features,
            labels: Labels {
                bgt0: p.bgt0,
                slope: p.slope,
                streaming: p.streaming,
            },
        }
    }
}

/// Flat `(group index, head index within group)` order of a layer.
fn head_slots(lw: &LayerWorkload) -> Vec<(usize, usize)> {
    lw.groups
        .iter()
        .enumerate()
        .flat_map(|(g, gw)| (0..gw.heads.len()).map(move |h| (g, h)))
        .collect()
}

/// Prefill statistics for every head of a layer, in flat head order.
pub fn prefill_layer(lw: &LayerWorkload, feature_tau: f64, normalization: Normalization) -> Result<Vec<PrefillStats>> {
    let slots = head_slots(lw);
    let inputs: Vec<(&[f32], &SegmentedKvCache)> = slots
        .iter()
        .map(|&(g, h)| (lw.groups[g].heads[h].anchor.as_slice(), &lw.groups[g].cache))
        .collect();
    let contexts = layer_contexts(&inputs, normalization)?;
    let cross = inputs
        .iter()
        .map(|(q, c)| gpu_output_norm(q, *c))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let metas = group_metadata(lw.groups.iter().map(|g| &g.cache), &SELECT_GRANULARITIES)?;
    slots
        .iter()
        .zip(&contexts)
        .map(|(&(g, h), ctx)| {
            let mut budgets = [0.0; 4];
            for (i, meta) in metas[g].iter().enumerate() {
                budgets[i] = ctx.min_budget_with(meta, feature_tau)?.budget;
            }
            let head = &lw.groups[g].heads[h];
            prefill_stats(lw.layer, head.head, &lw.groups[g].cache, &head.anchor, budgets, cross)
        })
        .collect()
}

/// Block metadata of each group's host segment at each granularity.
fn group_metadata<'a>(
    caches: impl Iterator<Item = &'a SegmentedKvCache>,
    blks: &[usize],
) -> Result<Vec<Vec<BlockMetadata>>> {
    caches
        .map(|c| {
            blks.iter()
                .map(|&b| block::build_metadata(&c.segment(Segment::Cpu).keys, b))
                .collect()
        })
        .collect()
}

/// Per-step state shared by labeling and evaluation.
struct StepState {
    caches: Vec<SegmentedKvCache>,
}

impl StepState {
    fn new(lw: &LayerWorkload, step: usize) -> Result<Self> {
        Ok(Self {
            caches: lw.groups.iter().map(|g| g.cache_at(step)).collect::<Result<_>>()?,
        })
    }

    fn inputs<'a>(&'a self, lw: &'a LayerWorkload, step: usize) -> Vec<(&'a [f32], &'a SegmentedKvCache)> {
        head_slots(lw)
            .into_iter()
            .map(|(g, h)| (lw.groups[g].heads[h].queries[step].as_slice(), &self.caches[g]))
            .collect()
    }

    fn features(
        &self,
        inputs: &[(&[f32], &SegmentedKvCache)],
        stats: &[PrefillStats],
    ) -> Result<Vec<FeatureVector>> {
        let cross = inputs
            .iter()
            .map(|(q, c)| gpu_output_norm(q, *c))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        inputs
            .iter()
            .zip(stats)
            .map(|((q, c), st)| decode_features(q, *c, st, cross).map(|(f, _)| f))
            .collect()
    }
}

/// Oracle labels and features of every head at every decode step.
pub fn label_layer(lw: &LayerWorkload, cfg: &LabelConfig) -> Result<Vec<HeadRecord>> {
    if cfg.taus.is_empty() {
        return Err(Error::InvalidConfig("at least one threshold is required".into()));
    }
    let stats = prefill_layer(lw, cfg.feature_tau, cfg.normalization)?;
    let slots = head_slots(lw);
    let steps = lw.groups.first().map_or(0, |g| g.heads.first().map_or(0, |h| h.queries.len()));
    let mut out = Vec::with_capacity(steps * slots.len());
    for step in 0..steps {
        let state = StepState::new(lw, step)?;
        let inputs = state.inputs(lw, step);
        let features = state.features(&inputs, &stats)?;
        let contexts = layer_contexts(&inputs, cfg.normalization)?;
        for ((&(g, h), ctx), fv) in slots.iter().zip(&contexts).zip(features) {
            let curves = ctx.curves(&LABEL_GRANULARITIES)?;
            let labels = cfg.taus.iter().map(|&t| curves.label(t)).collect::<Result<Vec<_>>>()?;
            let head = &lw.groups[g].heads[h];
            out.push(HeadRecord {
                sample: lw.sample,
                layer: lw.layer,
                group: g,
                head: head.head,
                step,
                archetype: head.archetype,
                cpu_len: ctx.cpu_len(),
                features: fv,
                labels,
            });
        }
    }
    Ok(out)
}

/// How per-head budgets are chosen at decode time.
#[derive(Clone, Copy)]
pub enum BudgetPolicy<'a> {
    /// Every host token, no selection.
    Full,
    /// The same `(blk, bgt)` for every head, no streaming bypass.
    Fixed { blk: usize, budget: f64 },
    /// Minimum budgets measured at this step for threshold `tau`.
    Oracle { tau: f64 },
    /// Learned head properties, planned per group.
    Adaptive {
        predictor: &'a (dyn HeadPredictor + Sync),
        feature_tau: f64,
    },
    /// Blocks covering `coverage` of the attention mass, ranked by true mass.
    ScoreCoverage { blk: usize, coverage: f64 },
}

impl core::fmt::Debug for BudgetPolicy<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            BudgetPolicy::Full => write!(f, "Full"),
            BudgetPolicy::Fixed { blk, budget } => write!(f, "Fixed({blk}, {budget})"),
            BudgetPolicy::Oracle { tau } => write!(f, "Oracle({tau})"),
            BudgetPolicy::Adaptive { feature_tau, .. } => write!(f, "Adaptive({feature_tau})"),
            BudgetPolicy::ScoreCoverage { blk, coverage } => write!(f, "ScoreCoverage({blk}, {coverage})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutcome {
    pub sample: usize,
    pub layer: usize,
    pub group: usize,
    pub head: usize,
    pub step: usize,
    pub archetype: Archetype,
    /// Skipped host retrieval entirely.
    pub bypassed: bool,
    pub blk: usize,
    /// Requested budget.
    pub budget: f64,
    /// Fraction of host tokens actually attended.
    pub realized: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub sample: usize,
    pub layer: usize,
    pub group: usize,
    pub step: usize,
    pub plan: GroupPlan,
    /// `None` for groups that need no host work.
    pub task: Option<SparseTask>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerOutcome {
    pub heads: Vec<HeadOutcome>,
    pub groups: Vec<GroupOutcome>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub normalization: Normalization,
    pub cost: CostModel,
}

impl EvalConfig {
    pub fn for_spec(spec: &WorkloadSpec) -> Self {
        Self {
            normalization: Normalization::MaxHead,
            cost: CostModel {
                dim: spec.dim,
                ..CostModel::default()
            },
        }
    }
}

/// Task id of a group, unique within one `(layer, step)` batch across samples.
pub fn task_id(spec: &WorkloadSpec, sample: usize, group: usize) -> u64 {
    (sample * spec.kv_groups() + group) as u64
}

fn full_plan(id: u64, heads: usize, cpu_len: usize) -> GroupPlan {
    GroupPlan {
        group: id,
        blk: 1,
        budgets: alloc::vec![1.0; heads],
        volume: 2.0 * cpu_len as f64 * heads as f64,
        candidates: Vec::new(),
        streaming_group: false,
        heads_streaming: alloc::vec![false; heads],
        cpu_len,
    }
}

fn fixed_plan(id: u64, heads: usize, cpu_len: usize, blk: usize, budget: f64) -> GroupPlan {
    let budgets = alloc::vec![budget.clamp(0.0, 1.0); heads];
    GroupPlan {
        group: id,
        blk,
        volume: crate::selector::volume(blk, cpu_len, &budgets),
        candidates: alloc::vec![(blk, crate::selector::volume(blk, cpu_len, &budgets))],
        budgets,
        streaming_group: false,
        heads_streaming: alloc::vec![false; heads],
        cpu_len,
    }
}

/// Runs one budgeting policy over every decode step of a layer and measures
/// each head's deviation from exact attention.
pub fn evaluate_layer(
    spec: &WorkloadSpec,
    lw: &LayerWorkload,
    policy: BudgetPolicy<'_>,
    cfg: &EvalConfig,
) -> Result<LayerOutcome> {
    let stats = match policy {
        BudgetPolicy::Adaptive { feature_tau, .. } => Some(prefill_layer(lw, feature_tau, cfg.normalization)?),
        _ => None,
    };
    let metas = group_metadata(lw.groups.iter().map(|g| &g.cache), &SELECT_GRANULARITIES)?;
    let meta_for = |g: usize, blk: usize| -> Result<BlockMetadata> {
        match SELECT_GRANULARITIES.iter().position(|&b| b == blk) {
            Some(i) => Ok(metas[g][i].clone()),
            None => block::build_metadata(&lw.groups[g].cache.segment(Segment::Cpu).keys, blk),
        }
    };
    let steps = lw.groups.first().map_or(0, |g| g.heads.first().map_or(0, |h| h.queries.len()));
    let mut out = LayerOutcome::default();

    for step in 0..steps {
        let state = StepState::new(lw, step)?;
        let inputs = state.inputs(lw, step);
        let contexts = layer_contexts(&inputs, cfg.normalization)?;
        let features = match &stats {
            Some(st) => Some(state.features(&inputs, st)?),
            None => None,
        };

        let mut first = 0;
        for (g, gw) in lw.groups.iter().enumerate() {
            let n = gw.heads.len();
            let ctxs = &contexts[first..first + n];
            let id = task_id(spec, lw.sample, g);
            let cpu_len = gw.cache.cpu_len();
            // Shared-KV sanity: every head of the group reads one cache.
            let members: Vec<GroupMember<'_>> = ctxs
                .iter()
                .zip(&gw.heads)
                .map(|(c, h)| GroupMember {
                    head: h.head,
                    query: c.query,
                    cache: c.cache,
                })
                .collect();
            crate::attn::gqa_group_view(&members)?;

            let mut selections: Vec<SelectionResult> = Vec::with_capacity(n);
            let plan = match policy {
                BudgetPolicy::Full => {
                    let meta = meta_for(g, 128)?;
                    let all: Vec<usize> = (0..meta.block_count()).collect();
                    for _ in 0..n {
                        selections.push(block::select_blocks(&meta, &all)?);
                    }
                    full_plan(id, n, cpu_len)
                }
                BudgetPolicy::Fixed { blk, budget } => {
                    let meta = meta_for(g, blk)?;
                    for c in ctxs {
                        selections.push(block::select_budget(c.query, &meta, budget)?);
                    }
                    fixed_plan(id, n, cpu_len, blk, budget)
                }
                BudgetPolicy::ScoreCoverage { blk, coverage } => {
                    let mut budgets = Vec::with_capacity(n);
                    for c in ctxs {
                        let sel = c.coverage_selection(blk, coverage)?;
                        budgets.push(sel.budget_realized);
                        selections.push(sel);
                    }
                    let mut p = fixed_plan(id, n, cpu_len, blk, 0.0);
                    p.volume = crate::selector::volume(blk, cpu_len, &budgets);
                    p.candidates = alloc::vec![(blk, p.volume)];
                    p.budgets = budgets;
                    p
                }
                BudgetPolicy::Oracle { tau } => {
                    let labels = ctxs
                        .iter()
                        .map(|c| c.curves(&LABEL_GRANULARITIES)?.label(tau))
                        .collect::<Result<Vec<_>>>()?;
                    let plan = plan_group_with(id, &labels, cpu_len, &SELECT_GRANULARITIES)?;
                    select_for_plan(ctxs, &plan, &meta_for(g, plan.blk)?, &mut selections)?;
                    plan
                }
                BudgetPolicy::Adaptive { predictor, .. } => {
                    let fvs = &features.as_ref().expect("features computed for adaptive")[first..first + n];
                    let props = fvs
                        .iter()
                        .map(|f| predictor.predict(f).map(|p| p.properties()))
                        .collect::<Result<Vec<_>>>()?;
                    let plan = plan_group(id, &props, cpu_len)?;
                    select_for_plan(ctxs, &plan, &meta_for(g, plan.blk)?, &mut selections)?;
                    plan
                }
            };

            for ((c, h), sel) in ctxs.iter().zip(&gw.heads).zip(&selections) {
                let idx = h.head - gw.heads[0].head;
                let bypassed = plan.streaming_group || plan.heads_streaming[idx];
                out.heads.push(HeadOutcome {
                    sample: lw.sample,
                    layer: lw.layer,
                    group: g,
                    head: h.head,
                    step,
                    archetype: h.archetype,
                    bypassed,
                    blk: plan.blk,
                    budget: plan.budgets[idx],
                    realized: sel.budget_realized,
                    deviation: c.output_deviation(sel)?,
                });
            }
            let task = if plan.streaming_group || cpu_len == 0 {
                None
            } else if matches!(policy, BudgetPolicy::Full) {
                Some(SparseTask {
                    group: id,
                    priority: plan.volume,
                    cost: TaskCost {
                        bytes: plan.volume * cfg.cost.dim as f64 * cfg.cost.elem_bytes,
                        flops: 4.0 * cfg.cost.dim as f64 * cpu_len as f64 * n as f64,
                    },
                    heads: n,
                    cpu_len,
                })
            } else {
                Some(SparseTask::from_plan(&plan, &cfg.cost)?)
            };
            out.groups.push(GroupOutcome {
                sample: lw.sample,
                layer: lw.layer,
                group: g,
                step,
                plan,
                task,
            });
            first += n;
        }
    }
    Ok(out)
}

/// Tasks of each decode batch: one batch per `(layer, step)`, holding every
/// sample's groups that need host work.
pub fn decode_batches<'a>(outcomes: impl IntoIterator<Item = &'a LayerOutcome>) -> BTreeMap<(usize, usize), Vec<SparseTask>> {
    let mut batches: BTreeMap<(usize, usize), Vec<SparseTask>> = BTreeMap::new();
    for o in outcomes {
        for g in &o.groups {
            let entry = batches.entry((g.layer, g.step)).or_default();
            if let Some(t) = &g.task {
                entry.push(t.clone());
            }
        }
    }
    batches
}

/// Simulated attention time over all decode batches.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    pub policy: Policy,
    /// Sum of per-batch makespans.
    pub total_time: f64,
    pub tasks: usize,
    /// Accelerator idle time summed over batches, over `total_time`.
    pub accelerator_idle_ratio: f64,
    pub reports: Vec<((usize, usize), ScheduleReport)>,
}

pub fn schedule_batches(
    batches: &BTreeMap<(usize, usize), Vec<SparseTask>>,
    workers: &[WorkerProfile],
    policy: Policy,
) -> Result<BatchSchedule> {
    let mut total = 0.0;
    let mut idle = 0.0;
    let mut tasks = 0;
    let mut reports = Vec::with_capacity(batches.len());
    for (key, batch) in batches {
        let r = simulate_policy(batch, workers, policy)?;
        total += r.makespan;
        idle += r
            .workers
            .iter()
            .find(|w| w.kind == crate::schedule::WorkerKind::Accelerator)
            .map_or(0.0, |w| w.idle);
        tasks += batch.len();
        reports.push((*key, r));
    }
    Ok(BatchSchedule {
        policy,
        total_time: total,
        tasks,
        accelerator_idle_ratio: if total > 0.0 { idle / total } else { 0.0 },
        reports,
    })
}

fn select_for_plan(
    ctxs: &[HeadContext<'_>],
    plan: &GroupPlan,
    meta: &BlockMetadata,
    out: &mut Vec<SelectionResult>,
) -> Result<()> {
    for (i, c) in ctxs.iter().enumerate() {
        let sel = if plan.streaming_group || plan.heads_streaming[i] {
            SelectionResult::empty(meta.blk(), meta.len())
        } else {
            block::select_budget(c.query, meta, plan.budgets[i])?
        };
        out.push(sel);
    }
    Ok(())
}
