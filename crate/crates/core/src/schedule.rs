//! Cost model, shared priority queue and discrete-event simulation of
//! sparse-attention tasks on heterogeneous workers.
//!
//! A task is the top-k selection plus sparse attention of one retrieval
//! group at one decode step. Workers pull from a single queue and fetch the
//! next task only after finishing the current one. The simulation advances
//! the earliest-free worker (lower index on ties), which reproduces that
//! pull discipline deterministically.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::block::blocks_for_budget;
use crate::error::{Error, Result};
use crate::selector::{priority, GroupPlan};

/// Work of one task: bytes read or moved and arithmetic operations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskCost {
    pub bytes: f64,
    pub flops: f64,
}

/// Converts a plan into bytes and flops.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CostModel {
    pub dim: usize,
    /// Bytes per stored element (2 for 16-bit caches).
    pub elem_bytes: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { dim: 128, elem_bytes: 2.0 }
    }
}

impl CostModel {
    /// Bytes: every token-row of `V(blk)` is `D` elements. Flops: block
    /// scoring reads both metadata rows per block once per head; attention
    /// costs a dot product and an axpy per selected token.
    pub fn plan_cost(&self, plan: &GroupPlan) -> TaskCost {
        let d = self.dim as f64;
        let bytes = plan.volume * d * self.elem_bytes;
        let n_blocks = plan.cpu_len.div_ceil(plan.blk.max(1)) as f64;
        let mut flops = 0.0;
        for (&b, &streaming) in plan.budgets.iter().zip(&plan.heads_streaming) {
            if streaming {
                continue;
            }
            let tokens = (blocks_for_budget(b, plan.cpu_len, plan.blk) * plan.blk).min(plan.cpu_len);
            flops += 4.0 * d * n_blocks + 4.0 * d * tokens as f64;
        }
        TaskCost { bytes, flops }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum WorkerKind {
    Host,
    Accelerator,
}

/// Analytic service-time model of one worker.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum WorkerProfile {
    /// The host pool acting as one worker: memory-bound reads plus compute
    /// spread over all cores.
    Host {
        bandwidth: f64,
        cores: usize,
        flops_per_core: f64,
    },
    /// Modeled accelerator that pulls selected KV and metadata over the
    /// interconnect for every task.
    Accelerator {
        transfer_bandwidth: f64,
        flops: f64,
        launch: f64,
    },
}

pub const DEFAULT_HOST_BANDWIDTH: f64 = 57e9;
pub const DEFAULT_TRANSFER_BANDWIDTH: f64 = 32e9;
pub const DEFAULT_HOST_CORES: usize = 20;

impl WorkerProfile {
    pub fn default_host() -> Self {
        WorkerProfile::Host {
            bandwidth: DEFAULT_HOST_BANDWIDTH,
            cores: DEFAULT_HOST_CORES,
            flops_per_core: 16e9,
        }
    }

    pub fn default_accelerator() -> Self {
        WorkerProfile::Accelerator {
            transfer_bandwidth: DEFAULT_TRANSFER_BANDWIDTH,
            flops: 100e12,
            launch: 10e-6,
        }
    }

    /// Host first, then the accelerator.
    pub fn default_pair() -> [WorkerProfile; 2] {
        [Self::default_host(), Self::default_accelerator()]
    }

    pub fn kind(&self) -> WorkerKind {
        match self {
            WorkerProfile::Host { .. } => WorkerKind::Host,
            WorkerProfile::Accelerator { .. } => WorkerKind::Accelerator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WorkerProfile::Host { bandwidth, cores, flops_per_core } => {
                bandwidth > 0.0 && cores > 0 && flops_per_core > 0.0
            }
            WorkerProfile::Accelerator { transfer_bandwidth, flops, launch } => {
                transfer_bandwidth > 0.0 && flops > 0.0 && launch >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("worker rates must be positive".into()))
        }
    }

    /// Seconds to run a task on this worker.
    pub fn service_time(&self, cost: &TaskCost) -> f64 {
        match *self {
            WorkerProfile::Host { bandwidth, cores, flops_per_core } => {
                cost.bytes / bandwidth + cost.flops / (cores as f64 * flops_per_core)
            }
            WorkerProfile::Accelerator { transfer_bandwidth, flops, launch } => {
                launch + cost.bytes / transfer_bandwidth + cost.flops / flops
            }
        }
    }
}

/// One schedulable unit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SparseTask {
    pub group: u64,
    pub priority: f64,
    pub cost: TaskCost,
    pub heads: usize,
    pub cpu_len: usize,
}

impl SparseTask {
    pub fn from_plan(plan: &GroupPlan, model: &CostModel) -> Result<Self> {
        Ok(Self {
            group: plan.group,
            priority: priority(plan)?,
            cost: model.plan_cost(plan),
            heads: plan.retrieval_heads(),
            cpu_len: plan.cpu_len,
        })
    }
}

#[derive(Debug, Clone)]
struct Entry(SparseTask);

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // Max-heap: higher priority first, then lower group id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .priority
            .total_cmp(&other.0.priority)
            .then_with(|| other.0.group.cmp(&self.0.group))
    }
}

/// Shared queue ordered by descending priority, ties by ascending group id.
#[derive(Debug, Clone, Default)]
pub struct TaskQueue {
    heap: BinaryHeap<Entry>,
}

impl TaskQueue {
    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn pop(&mut self) -> Option<SparseTask> {
        self.heap.pop().map(|e| e.0)
    }

    pub fn peek(&self) -> Option<&SparseTask> {
        self.heap.peek().map(|e| &e.0)
    }

    /// Drains in pop order.
    pub fn into_sorted(mut self) -> Vec<SparseTask> {
        let mut out = Vec::with_capacity(self.len());
        while let Some(t) = self.pop() {
            out.push(t);
        }
        out
    }
}

/// Builds the queue for one decode batch.
pub fn enqueue_batch(tasks: Vec<SparseTask>) -> Result<TaskQueue> {
    let mut ids: Vec<u64> = tasks.iter().map(|t| t.group).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateTask(w[0]));
    }
    if tasks.iter().any(|t| !t.priority.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(TaskQueue {
        heap: tasks.into_iter().map(Entry).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum RunMode {
    Simulated,
    Executed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Policy {
    Priority,
    NoParallel,
    Uniform,
    LengthBased,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TaskRecord {
    pub group: u64,
    pub worker: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WorkerStats {
    pub kind: WorkerKind,
    pub busy: f64,
    pub idle: f64,
    pub tasks: usize,
}

impl WorkerStats {
    pub fn idle_ratio(&self) -> f64 {
        let span = self.busy + self.idle;
        if span > 0.0 {
            (self.idle / span).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScheduleReport {
    pub mode: RunMode,
    pub policy: Policy,
    pub makespan: f64,
    pub workers: Vec<WorkerStats>,
    /// In completion-record order (dispatch order for simulated runs).
    pub records: Vec<TaskRecord>,
    /// Group ids whose execution failed.
    pub failed: Vec<u64>,
}

impl ScheduleReport {
    /// Idle ratio of the first accelerator worker, if any.
    pub fn accelerator_idle_ratio(&self) -> Option<f64> {
        self.workers
            .iter()
            .find(|w| w.kind == WorkerKind::Accelerator)
            .map(WorkerStats::idle_ratio)
    }

    /// Builds per-worker totals from task records.
    pub fn from_records(
        mode: RunMode,
        policy: Policy,
        workers: &[WorkerProfile],
        records: Vec<TaskRecord>,
        failed: Vec<u64>,
    ) -> Self {
        let makespan = records.iter().map(|r| r.end).fold(0.0, f64::max);
        let mut stats: Vec<WorkerStats> = workers
            .iter()
            .map(|w| WorkerStats {
                kind: w.kind(),
                busy: 0.0,
                idle: 0.0,
                tasks: 0,
            })
            .collect();
        for r in &records {
            stats[r.worker].busy += r.end - r.start;
            stats[r.worker].tasks += 1;
        }
        for s in &mut stats {
            s.idle = (makespan - s.busy).max(0.0);
        }
        Self {
            mode,
            policy,
            makespan,
            workers: stats,
            records,
            failed,
        }
    }
}

/// `max(longest task on its fastest worker, Σ fastest times / workers)`.
pub fn makespan_lower_bound(tasks: &[SparseTask], workers: &[WorkerProfile]) -> f64 {
    if workers.is_empty() {
        return 0.0;
    }
    let best: Vec<f64> = tasks
        .iter()
        .map(|t| workers.iter().map(|w| w.service_time(&t.cost)).fold(f64::INFINITY, f64::min))
        .collect();
    let longest = best.iter().copied().fold(0.0, f64::max);
    let total: f64 = best.iter().sum();
    longest.max(total / workers.len() as f64)
}

fn check_workers(workers: &[WorkerProfile]) -> Result<()> {
    if workers.is_empty() {
        return Err(Error::InvalidConfig("at least one worker is required".into()));
    }
    workers.iter().try_for_each(WorkerProfile::validate)
}

/// Dynamic pull from the shared queue, simulated.
pub fn simulate(queue: TaskQueue, workers: &[WorkerProfile]) -> Result<ScheduleReport> {
    check_workers(workers)?;
    let mut free_at = alloc::vec![0.0f64; workers.len()];
    let mut records = Vec::with_capacity(queue.len());
    let mut queue = queue;
    while let Some(task) = queue.pop() {
        let (w, &start) = free_at
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
            .expect("workers checked non-empty");
        let end = start + workers[w].service_time(&task.cost);
        free_at[w] = end;
        records.push(TaskRecord {
            group: task.group,
            worker: w,
            start,
            end,
        });
    }
    Ok(ScheduleReport::from_records(
        RunMode::Simulated,
        Policy::Priority,
        workers,
        records,
        Vec::new(),
    ))
}

/// Static assignment for a baseline policy: `assignment[i]` lists the tasks
/// of worker `i` in execution order. Tasks are taken in group-id order.
pub fn baseline_assignment(
    tasks: &[SparseTask],
    workers: &[WorkerProfile],
    policy: Policy,
) -> Result<Vec<Vec<SparseTask>>> {
    check_workers(workers)?;
    let mut ordered: Vec<&SparseTask> = tasks.iter().collect();
    ordered.sort_by_key(|t| t.group);
    let mut out: Vec<Vec<SparseTask>> = alloc::vec![Vec::new(); workers.len()];
    match policy {
        Policy::Priority => {
            return Err(Error::InvalidConfig("priority is not a static policy".into()));
        }
        Policy::NoParallel => {
            let host = workers
                .iter()
                .position(|w| w.kind() == WorkerKind::Host)
                .unwrap_or(0);
            out[host] = ordered.into_iter().cloned().collect();
        }
        Policy::Uniform => {
            // Balance head counts, ignoring how long each head takes.
            let mut heads = alloc::vec![0usize; workers.len()];
            for t in ordered {
                let w = (0..workers.len()).min_by_key(|&i| (heads[i], i)).expect("non-empty");
                heads[w] += t.heads.max(1);
                out[w].push(t.clone());
            }
        }
        Policy::LengthBased => {
            // Proxy cost L_cpu·heads, weighted by each worker's speed on a
            // reference task; blind to per-head budgets.
            let reference = TaskCost { bytes: 1e6, flops: 1e6 };
            let speed: Vec<f64> = workers.iter().map(|w| 1.0 / w.service_time(&reference)).collect();
            let mut load = alloc::vec![0.0f64; workers.len()];
            let proxy = |t: &SparseTask| (t.cpu_len * t.heads.max(1)) as f64;
            let mut by_len = ordered;
            by_len.sort_by(|a, b| proxy(b).total_cmp(&proxy(a)).then(a.group.cmp(&b.group)));
            for t in by_len {
                let c = proxy(t);
                let w = (0..workers.len())
                    .min_by(|&a, &b| {
                        ((load[a] + c) / speed[a])
                            .total_cmp(&((load[b] + c) / speed[b]))
                            .then(a.cmp(&b))
                    })
                    .expect("non-empty");
                load[w] += c;
                out[w].push(t.clone());
            }
        }
    }
    Ok(out)
}

/// Simulates a static baseline: each worker runs its share back to back.
pub fn simulate_baseline(
    tasks: &[SparseTask],
    workers: &[WorkerProfile],
    policy: Policy,
) -> Result<ScheduleReport> {
    let plan = baseline_assignment(tasks, workers, policy)?;
    let mut records = Vec::with_capacity(tasks.len());
    for (w, list) in plan.iter().enumerate() {
        let mut t = 0.0;
        for task in list {
            let end = t + workers[w].service_time(&task.cost);
            records.push(TaskRecord {
                group: task.group,
                worker: w,
                start: t,
                end,
            });
            t = end;
        }
    }
    Ok(ScheduleReport::from_records(
        RunMode::Simulated,
        policy,
        workers,
        records,
        Vec::new(),
    ))
}

/// Runs any policy in simulation over the same task set.
pub fn simulate_policy(
    tasks: &[SparseTask],
    workers: &[WorkerProfile],
    policy: Policy,
) -> Result<ScheduleReport> {
    match policy {
        Policy::Priority => simulate(enqueue_batch(tasks.to_vec())?, workers),
        other => simulate_baseline(tasks, workers, other),
    }
}
