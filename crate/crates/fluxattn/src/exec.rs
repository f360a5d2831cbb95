//! Executed mode: real threads pulling real attention work from one queue.
//!
//! Host threads and one accelerator-model thread share a `Mutex<TaskQueue>`
//! and each pops a new task only after finishing the previous one. Results
//! land in per-task `OnceLock` slots, so no aggregation state is shared. The
//! accelerator thread computes on the host CPU and additionally books the
//! analytic service time of its profile. Scope exit is the end-of-step
//! barrier.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use fluxattn_core::attn::PartialOutput;
use fluxattn_core::block::{build_metadata, select_budget, sparse_attention, BlockMetadata};
use fluxattn_core::cache::{SegmentedKvCache, Segment};
use fluxattn_core::pipeline::LayerOutcome;
use fluxattn_core::schedule::{
    enqueue_batch, Policy, RunMode, ScheduleReport, SparseTask, TaskRecord, WorkerKind, WorkerProfile,
};
use fluxattn_core::selector::GroupPlan;
use fluxattn_core::workload::LayerWorkload;
use fluxattn_core::{Error, Result};

pub const THREADS_ENV: &str = "FLUXATTN_THREADS";

/// Everything one group needs to run top-k selection and sparse attention.
#[derive(Debug, Clone)]
pub struct ExecTask {
    pub task: SparseTask,
    pub plan: GroupPlan,
    pub cache: SegmentedKvCache,
    pub meta: BlockMetadata,
    /// One query per head of the group.
    pub queries: Vec<Vec<f32>>,
}

/// Per-head sparse partials of one task. Bypassed heads yield the empty partial.
pub type TaskOutput = Vec<PartialOutput>;

pub fn compute_task(t: &ExecTask) -> Result<TaskOutput> {
    let dim = t.cache.dim();
    t.queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            if t.plan.streaming_group || t.plan.heads_streaming[i] {
                Ok(PartialOutput::empty(dim))
            } else {
                let sel = select_budget(q, &t.meta, t.plan.budgets[i])?;
                sparse_attention(q, &t.cache, &sel)
            }
        })
        .collect()
}

/// Single-threaded reference in input order.
pub fn serial_reference(tasks: &[ExecTask]) -> Result<Vec<TaskOutput>> {
    tasks.iter().map(compute_task).collect()
}

/// Host worker threads: `FLUXATTN_THREADS` (default: available cores) minus
/// one core kept for the accelerator-model thread, at least one.
pub fn host_threads() -> usize {
    let total = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(2, |n| n.get()));
    total.saturating_sub(1).max(1)
}

#[derive(Debug, Clone)]
pub struct ExecOutcome {
    /// Wall-clock report; worker `i` is thread `i` (hosts first).
    pub report: ScheduleReport,
    /// Results in input order; `None` for failed or never-run tasks.
    pub results: Vec<Option<TaskOutput>>,
    /// How many times each task was started.
    pub executions: Vec<usize>,
    /// Analytic busy time booked by each thread.
    pub modeled_busy: Vec<f64>,
}

impl ExecOutcome {
    pub fn exactly_once(&self) -> bool {
        self.executions.iter().all(|&n| n == 1)
    }
}

/// Thread roster: `host_threads` copies of the first host profile, then
/// every accelerator profile.
pub fn thread_profiles(workers: &[WorkerProfile], host_threads: usize) -> Result<Vec<WorkerProfile>> {
    workers.iter().try_for_each(WorkerProfile::validate)?;
    let host = workers.iter().find(|w| w.kind() == WorkerKind::Host);
    let mut out: Vec<WorkerProfile> = match host {
        Some(h) => vec![*h; host_threads.max(1)],
        None => Vec::new(),
    };
    out.extend(workers.iter().filter(|w| w.kind() == WorkerKind::Accelerator).copied());
    if out.is_empty() {
        return Err(Error::InvalidConfig("at least one worker is required".into()));
    }
    Ok(out)
}

pub fn run_executed(tasks: &[ExecTask], workers: &[WorkerProfile], host_threads: usize) -> Result<ExecOutcome> {
    run_executed_with(tasks, workers, host_threads, compute_task)
}

/// Executed run with a caller-supplied kernel; a panicking or failing task is
/// marked failed and stops further dispatch.
pub fn run_executed_with<F>(
    tasks: &[ExecTask],
    workers: &[WorkerProfile],
    host_threads: usize,
    kernel: F,
) -> Result<ExecOutcome>
where
    F: Fn(&ExecTask) -> Result<TaskOutput> + Sync,
{
    let roster = thread_profiles(workers, host_threads)?;
    let queue = Mutex::new(enqueue_batch(tasks.iter().map(|t| t.task.clone()).collect())?);
    let index: HashMap<u64, usize> = tasks.iter().enumerate().map(|(i, t)| (t.task.group, i)).collect();
    let slots: Vec<OnceLock<TaskOutput>> = tasks.iter().map(|_| OnceLock::new()).collect();
    let counts: Vec<AtomicUsize> = tasks.iter().map(|_| AtomicUsize::new(0)).collect();
    let abort = AtomicBool::new(false);
    let failed = Mutex::new(Vec::new());
    let t0 = Instant::now();

    let per_thread: Vec<(Vec<TaskRecord>, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = roster
            .iter()
            .enumerate()
            .map(|(w, profile)| {
                let (queue, index, slots, counts, abort, failed, kernel) =
                    (&queue, &index, &slots, &counts, &abort, &failed, &kernel);
                s.spawn(move || {
                    let mut records = Vec::new();
                    let mut modeled = 0.0;
                    while !abort.load(Ordering::Acquire) {
                        let next = queue.lock().unwrap_or_else(|e| e.into_inner()).pop();
                        let Some(task) = next else { break };
                        let i = index[&task.group];
                        counts[i].fetch_add(1, Ordering::AcqRel);
                        let start = t0.elapsed().as_secs_f64();
                        let result = catch_unwind(AssertUnwindSafe(|| kernel(&tasks[i])));
                        let end = t0.elapsed().as_secs_f64();
                        match result {
                            Ok(Ok(out)) => {
                                // A second write would mean a double execution; the
                                // counters report that, so the value is kept as is.
                                let _ = slots[i].set(out);
                            }
                            _ => {
                                abort.store(true, Ordering::Release);
                                failed.lock().unwrap_or_else(|e| e.into_inner()).push(task.group);
                            }
                        }
                        modeled += profile.service_time(&task.cost);
                        records.push(TaskRecord {
                            group: task.group,
                            worker: w,
                            start,
                            end,
                        });
                    }
                    (records, modeled)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker loop catches kernel panics"))
            .collect()
    });

    let mut records: Vec<TaskRecord> = Vec::with_capacity(tasks.len());
    let mut modeled_busy = Vec::with_capacity(roster.len());
    for (r, m) in per_thread {
        records.extend(r);
        modeled_busy.push(m);
    }
    records.sort_by(|a, b| a.end.total_cmp(&b.end).then(a.group.cmp(&b.group)));
    let mut failed = failed.into_inner().unwrap_or_else(|e| e.into_inner());
    failed.sort_unstable();
    let report = ScheduleReport::from_records(RunMode::Executed, Policy::Priority, &roster, records, failed);
    Ok(ExecOutcome {
        report,
        results: slots.into_iter().map(OnceLock::into_inner).collect(),
        executions: counts.into_iter().map(AtomicUsize::into_inner).collect(),
        modeled_busy,
    })
}

/// Executable tasks for one decode step of one layer, across samples.
/// `outcomes[i]` must be the evaluation of `layers[i]`.
pub fn prepare_step(layers: &[LayerWorkload], outcomes: &[LayerOutcome], step: usize) -> Result<Vec<ExecTask>> {
    let mut out = Vec::new();
    for (lw, o) in layers.iter().zip(outcomes) {
        for g in o.groups.iter().filter(|g| g.step == step) {
            let Some(task) = &g.task else { continue };
            let gw = &lw.groups[g.group];
            let cache = gw.cache_at(step)?;
            let meta = build_metadata(&cache.segment(Segment::Cpu).keys, g.plan.blk)?;
            out.push(ExecTask {
                task: task.clone(),
                plan: g.plan.clone(),
                cache,
                meta,
                queries: gw.heads.iter().map(|h| h.queries[step].clone()).collect(),
            });
        }
    }
    Ok(out)
}

/// Largest absolute difference between two result sets (∞ on shape mismatch).
pub fn max_abs_diff(a: &[TaskOutput], b: &[TaskOutput]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return f64::INFINITY;
        }
        for (p, q) in x.iter().zip(y) {
            if p.len != q.len || p.out.len() != q.out.len() {
                return f64::INFINITY;
            }
            if p.len > 0 {
                worst = worst.max((p.lse - q.lse).abs());
            }
            for (u, v) in p.out.iter().zip(&q.out) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    worst
}
