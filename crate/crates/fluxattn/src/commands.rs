//! The pipeline commands behind the `fluxattn` binary.
//!
//! Each command reads its inputs, writes its outputs plus `manifest.json`
//! into `--out`, and returns a summary that is also written as JSON.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use fluxattn_core::budget::{fit_curve, Normalization, DEFAULT_TAU, LABEL_GRANULARITIES};
use fluxattn_core::pipeline::{
    decode_batches, evaluate_layer, label_layer, schedule_batches, BudgetPolicy, EvalConfig, HeadOutcome,
    LabelConfig, LayerOutcome,
};
use fluxattn_core::predictor::{evaluate, split_by_sample, train, MeanPredictor, Metrics, PredictorModel, TrainConfig};
use fluxattn_core::schedule::{Policy, SparseTask, WorkerProfile};
use fluxattn_core::workload::{Archetype, LayerWorkload, WorkloadSpec};

use crate::exec::{host_threads, prepare_step, run_executed, serial_reference, max_abs_diff};
use crate::labels::{LabelFile, StoredRow};
use crate::manifest::{sha256_file, Manifest};
use crate::model_io::{load_model, save_model};
use crate::report::{archetype_name, event_rows, write_csv, write_json, DeviationSummary, EventRow, HeadRow};
use crate::trace::{export_trace, TraceHeader, TraceReader};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "trace.fxt";
pub const LABEL_FILE: &str = "labels.fxl";
pub const MODEL_FILE: &str = "model.fxp";
pub const TAU_SWEEP: [f64; 5] = [0.02, 0.05, 0.10, 0.15, 0.20];
/// Attention-mass coverage of the score-based ablation.
pub const SCORE_COVERAGE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArg {
    Priority,
    #[value(name = "no_parallel")]
    NoParallel,
    Uniform,
    Length,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Priority => Policy::Priority,
            PolicyArg::NoParallel => Policy::NoParallel,
            PolicyArg::Uniform => Policy::Uniform,
            PolicyArg::Length => Policy::LengthBased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Sim,
    Exec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Default,
    SinkPlanted,
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn hex32(h: &[u8; 32]) -> String {
    hex::encode(h)
}

/// Workload dimensions recovered from a trace header; generation-only knobs
/// keep their defaults and are not used downstream.
pub fn spec_from_header(h: &TraceHeader) -> WorkloadSpec {
    WorkloadSpec {
        samples: h.samples as usize,
        layers: h.layers as usize,
        heads: h.heads as usize,
        group_size: h.group_size as usize,
        dim: h.dim as usize,
        context_len: h.context_len as usize,
        sink_len: h.sink_len as usize,
        local_len: h.local_len as usize,
        decode_steps: h.decode_steps as usize,
        needles: h.needles as usize,
        ..WorkloadSpec::default()
    }
}

fn read_all_layers(trace: &Path) -> anyhow::Result<(WorkloadSpec, Vec<LayerWorkload>)> {
    let mut r = TraceReader::open(trace)?;
    let h = *r.header();
    let mut layers = Vec::new();
    for s in 0..h.samples {
        for l in 0..h.layers {
            layers.push(r.read_layer(s, l)?);
        }
    }
    Ok((spec_from_header(&h), layers))
}

// ---------------------------------------------------------------- gen

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenArgs {
    /// Workload spec as JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlantedRow {
    pub sample: usize,
    pub layer: usize,
    pub group: usize,
    pub head: usize,
    pub archetype: &'static str,
    /// `start:len` pairs separated by `;`.
    pub needles: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenSummary {
    pub schema: u32,
    pub trace_sha256: String,
    pub trace_bytes: u64,
    pub heads_by_archetype: BTreeMap<&'static str, usize>,
}

pub fn load_spec(path: Option<&Path>, preset: Preset) -> anyhow::Result<WorkloadSpec> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => anyhow::Error::from(crate::error::IoError::MissingArtifact(p.into())),
                _ => e.into(),
            })?;
            Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => Ok(match preset {
            Preset::Default => WorkloadSpec::default(),
            Preset::SinkPlanted => WorkloadSpec::sink_planted(),
        }),
    }
}

pub fn cmd_gen(a: &GenArgs) -> anyhow::Result<GenSummary> {
    let mut spec = load_spec(a.spec.as_deref(), a.preset)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    prepare_out(&a.out)?;
    let trace = a.out.join(TRACE_FILE);
    let header = export_trace(&spec, &trace)?;
    write_json(&a.out.join("spec.json"), &spec)?;

    let mut reader = TraceReader::open(&trace)?;
    let mut planted = Vec::new();
    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for s in 0..header.samples {
        for l in 0..header.layers {
            let lw = reader.read_layer(s, l)?;
            for g in &lw.groups {
                for h in &g.heads {
                    *counts.entry(archetype_name(h.archetype)).or_default() += 1;
                    let needles: Vec<String> = h.needles.iter().map(|n| format!("{}:{}", n.start, n.len)).collect();
                    planted.push(PlantedRow {
                        sample: lw.sample,
                        layer: lw.layer,
                        group: g.group,
                        head: h.head,
                        archetype: archetype_name(h.archetype),
                        needles: needles.join(";"),
                    });
                }
            }
        }
    }
    write_csv(&a.out.join("planted.csv"), &planted)?;
    let summary = GenSummary {
        schema: SCHEMA_VERSION,
        trace_sha256: hex32(&sha256_file(&trace)?),
        trace_bytes: header.total_bytes(),
        heads_by_archetype: counts,
    };
    write_json(&a.out.join("gen.json"), &summary)?;
    let mut m = Manifest::new("gen", Some(spec.seed), serde_json::to_value(a)?);
    if let Some(p) = &a.spec {
        m.input(p)?;
    }
    m.finish(&a.out, &[TRACE_FILE, "spec.json", "planted.csv", "gen.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- label

#[derive(Debug, Clone, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelCsvRow {
    pub sample: u32,
    pub layer: u32,
    pub head: u32,
    pub step: u32,
    pub archetype: &'static str,
    pub bgt0: f32,
    pub slope: f32,
    pub streaming: bool,
    pub b1: f32,
    pub b16: f32,
    pub b32: f32,
    pub b64: f32,
    pub b128: f32,
}

impl From<&StoredRow> for LabelCsvRow {
    fn from(r: &StoredRow) -> Self {
        let b = r.budgets;
        Self {
            sample: r.sample,
            layer: r.layer,
            head: r.head,
            step: r.step,
            archetype: archetype_name(r.archetype),
            bgt0: r.bgt0,
            slope: r.slope,
            streaming: r.streaming,
            b1: b[0],
            b16: b[1],
            b32: b[2],
            b64: b[3],
            b128: b[4],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LabelSummary {
    pub schema: u32,
    pub tau: f64,
    pub rows: usize,
    pub trace_sha256: String,
    pub streaming_rate_by_archetype: BTreeMap<&'static str, f64>,
}

fn by_archetype<T>(items: &[T], key: impl Fn(&T) -> Archetype, val: impl Fn(&T) -> f64) -> BTreeMap<&'static str, f64> {
    let mut acc: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
    for it in items {
        let e = acc.entry(archetype_name(key(it))).or_default();
        e.0 += val(it);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

pub fn cmd_label(a: &LabelArgs) -> anyhow::Result<LabelSummary> {
    if !(a.tau > 0.0) {
        bail!("invalid-config: tau must be positive");
    }
    let trace_hash = sha256_file(&a.trace)?;
    let header = *TraceReader::open(&a.trace)?.header();
    prepare_out(&a.out)?;
    let cfg = LabelConfig {
        taus: vec![a.tau],
        feature_tau: DEFAULT_TAU,
        normalization: Normalization::MaxHead,
    };
    let cells: Vec<(u32, u32)> = (0..header.samples)
        .flat_map(|s| (0..header.layers).map(move |l| (s, l)))
        .collect();
    let per_cell: Vec<Vec<StoredRow>> = cells
        .par_iter()
        .map(|&(s, l)| -> anyhow::Result<Vec<StoredRow>> {
            let lw = TraceReader::open(&a.trace)?.read_layer(s, l)?;
            Ok(label_layer(&lw, &cfg)?.iter().map(|r| StoredRow::from_record(r, 0)).collect())
        })
        .collect::<anyhow::Result<_>>()?;
    let rows: Vec<StoredRow> = per_cell.into_iter().flatten().collect();

    let file = LabelFile {
        tau: a.tau,
        input_hash: trace_hash,
        rows,
    };
    file.write(&a.out.join(LABEL_FILE))?;
    let csv_rows: Vec<LabelCsvRow> = file.rows.iter().map(LabelCsvRow::from).collect();
    write_csv(&a.out.join("labels.csv"), &csv_rows)?;
    let summary = LabelSummary {
        schema: SCHEMA_VERSION,
        tau: a.tau,
        rows: file.rows.len(),
        trace_sha256: hex32(&trace_hash),
        streaming_rate_by_archetype: by_archetype(&file.rows, |r| r.archetype, |r| f64::from(u8::from(r.streaming))),
    };
    write_json(&a.out.join("label.json"), &summary)?;
    let mut m = Manifest::new("label", None, serde_json::to_value(a)?);
    m.input(&a.trace)?;
    m.finish(&a.out, &[LABEL_FILE, "labels.csv", "label.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitCsvRow {
    pub archetype: &'static str,
    pub blk: usize,
    pub rows: usize,
    pub mean_budget: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArchetypeFit {
    pub rows: usize,
    pub streaming_rate: f64,
    /// Among non-streaming rows: fraction whose refitted slope is ≥ 0.
    pub nonnegative_slope_rate: f64,
    pub mean_slope: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub schema: u32,
    pub labels_sha256: String,
    pub tau: f64,
    /// Largest gap between the refitted and stored slope (stored as f32).
    pub max_slope_gap: f64,
    pub by_archetype: BTreeMap<&'static str, ArchetypeFit>,
}

pub fn cmd_fit(a: &FitArgs) -> anyhow::Result<FitSummary> {
    let hash = sha256_file(&a.labels)?;
    let file = LabelFile::read(&a.labels)?;
    prepare_out(&a.out)?;
    let mut gap: f64 = 0.0;
    let mut sums: BTreeMap<(&'static str, usize), (f64, usize)> = BTreeMap::new();
    let mut arch: BTreeMap<&'static str, (usize, usize, usize, usize, f64)> = BTreeMap::new();
    for r in &file.rows {
        let name = archetype_name(r.archetype);
        let points: Vec<(usize, f64)> = LABEL_GRANULARITIES
            .iter()
            .zip(r.budgets)
            .filter(|(blk, b)| **blk > 1 && b.is_finite())
            .map(|(blk, b)| (*blk, f64::from(b)))
            .collect();
        let fit = fit_curve(&points)?;
        gap = gap.max((fit.slope - f64::from(r.slope)).abs());
        for (blk, b) in LABEL_GRANULARITIES.iter().zip(r.budgets) {
            if b.is_finite() {
                let e = sums.entry((name, *blk)).or_default();
                e.0 += f64::from(b);
                e.1 += 1;
            }
        }
        let e = arch.entry(name).or_default();
        e.0 += 1;
        if r.streaming {
            e.1 += 1;
        } else {
            e.2 += 1;
            e.3 += usize::from(fit.slope >= 0.0);
            e.4 += fit.slope;
        }
    }
    let rows: Vec<FitCsvRow> = sums
        .into_iter()
        .map(|((archetype, blk), (s, n))| FitCsvRow {
            archetype,
            blk,
            rows: n,
            mean_budget: s / n as f64,
        })
        .collect();
    write_csv(&a.out.join("fit.csv"), &rows)?;
    let summary = FitSummary {
        schema: SCHEMA_VERSION,
        labels_sha256: hex32(&hash),
        tau: file.tau,
        max_slope_gap: gap,
        by_archetype: arch
            .into_iter()
            .map(|(k, (n, s, ns, pos, ksum))| {
                let nsf = ns.max(1) as f64;
                (
                    k,
                    ArchetypeFit {
                        rows: n,
                        streaming_rate: s as f64 / n as f64,
                        nonnegative_slope_rate: if ns == 0 { 1.0 } else { pos as f64 / nsf },
                        mean_slope: ksum / nsf,
                    },
                )
            })
            .collect(),
    };
    write_json(&a.out.join("fit.json"), &summary)?;
    let mut m = Manifest::new("fit", None, serde_json::to_value(a)?);
    m.input(&a.labels)?;
    m.finish(&a.out, &["fit.csv", "fit.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1500)]
    pub steps: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.05)]
    pub lr_final_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_bgt: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_k: f64,
    #[arg(long, default_value_t = 1.0)]
    pub w_s: f64,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            loss_weights: [self.w_bgt, self.w_k, self.w_s],
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            lr_final_fraction: self.lr_final_fraction,
            seed: self.seed,
            val_fraction: self.val_fraction,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub schema: u32,
    pub labels_sha256: String,
    pub model_sha256: String,
    pub params: usize,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub train_samples: Vec<u32>,
    pub val_samples: Vec<u32>,
    pub model: Metrics,
    pub mean_baseline: Metrics,
}

#[derive(Debug, Clone, Serialize)]
struct CurveRow {
    step: usize,
    loss: f64,
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<TrainSummary> {
    let hash = sha256_file(&a.labels)?;
    let file = LabelFile::read(&a.labels)?;
    prepare_out(&a.out)?;
    let rows = file.labeled_rows();
    let cfg = a.config();
    let (model, report) = train(&rows, &cfg)?;
    let split = split_by_sample(&rows, cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
    let (train_rows, mut val_rows) = (pick(&split.train), pick(&split.validation));
    if val_rows.is_empty() {
        val_rows = train_rows.clone();
    }
    let baseline = MeanPredictor::fit(&train_rows)?;

    let model_path = a.out.join(MODEL_FILE);
    save_model(&model, &hash, &model_path)?;
    let curve: Vec<CurveRow> = report
        .train_curve
        .iter()
        .map(|&(step, loss)| CurveRow { step, loss })
        .collect();
    write_csv(&a.out.join("train_curve.csv"), &curve)?;
    let summary = TrainSummary {
        schema: SCHEMA_VERSION,
        labels_sha256: hex32(&hash),
        model_sha256: hex32(&sha256_file(&model_path)?),
        params: model.param_count(),
        initial_val_loss: report.initial_val_loss,
        final_val_loss: report.final_val_loss,
        train_samples: report.train_samples,
        val_samples: report.val_samples,
        model: evaluate(&model, &val_rows)?,
        mean_baseline: evaluate(&baseline, &val_rows)?,
    };
    write_json(&a.out.join("train.json"), &summary)?;
    let mut m = Manifest::new("train", Some(a.seed), serde_json::to_value(a)?);
    m.input(&a.labels)?;
    m.finish(&a.out, &[MODEL_FILE, "train_curve.csv", "train.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- decode

#[derive(Debug, Clone, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Learned predictor; without it budgets come from the oracle at `--tau`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Deviation threshold; `inf` makes every head streaming.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Fixed granularity; together with `--budget` selects the fixed baseline.
    #[arg(long)]
    pub blk: Option<usize>,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, value_enum, default_value = "priority")]
    pub policy: PolicyArg,
    #[arg(long, value_enum, default_value = "sim")]
    pub mode: ModeArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExecCheck {
    pub host_threads: usize,
    pub tasks: usize,
    pub exactly_once: bool,
    pub max_abs_diff_vs_serial: f64,
    pub wall_makespan: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeSummary {
    pub schema: u32,
    pub config: String,
    pub trace_sha256: String,
    pub model_sha256: Option<String>,
    pub tau: f64,
    pub policy: PolicyArg,
    pub mode: ModeArg,
    pub deviation: DeviationSummary,
    pub tasks: usize,
    pub total_time: f64,
    pub accelerator_idle_ratio: f64,
    pub exec: Option<ExecCheck>,
}

/// Labelled budgeting configuration.
pub enum Budgeting {
    Full,
    Fixed { blk: usize, budget: f64 },
    Oracle { tau: f64 },
    Score { blk: usize },
    Adaptive(PredictorModel),
}

impl Budgeting {
    pub fn name(&self) -> String {
        match self {
            Budgeting::Full => "full".into(),
            Budgeting::Fixed { blk, budget } => format!("fixed({blk},{budget})"),
            Budgeting::Oracle { tau } => format!("output({tau})"),
            Budgeting::Score { blk } => format!("score({}%,blk={blk})", SCORE_COVERAGE * 100.0),
            Budgeting::Adaptive(_) => "adaptive".into(),
        }
    }

    fn policy(&self) -> BudgetPolicy<'_> {
        match self {
            Budgeting::Full => BudgetPolicy::Full,
            Budgeting::Fixed { blk, budget } => BudgetPolicy::Fixed {
                blk: *blk,
                budget: *budget,
            },
            Budgeting::Oracle { tau } => BudgetPolicy::Oracle { tau: *tau },
            Budgeting::Score { blk } => BudgetPolicy::ScoreCoverage {
                blk: *blk,
                coverage: SCORE_COVERAGE,
            },
            Budgeting::Adaptive(m) => BudgetPolicy::Adaptive {
                predictor: m,
                feature_tau: DEFAULT_TAU,
            },
        }
    }
}

/// Evaluates every layer in parallel; results keep the input order.
pub fn evaluate_all(spec: &WorkloadSpec, layers: &[LayerWorkload], b: &Budgeting) -> anyhow::Result<Vec<LayerOutcome>> {
    let cfg = EvalConfig::for_spec(spec);
    let policy = b.policy();
    Ok(layers
        .par_iter()
        .map(|lw| evaluate_layer(spec, lw, policy, &cfg))
        .collect::<fluxattn_core::Result<Vec<_>>>()?)
}

fn all_heads(outcomes: &[LayerOutcome]) -> Vec<HeadOutcome> {
    outcomes.iter().flat_map(|o| o.heads.iter().cloned()).collect()
}

pub fn cmd_decode(a: &DecodeArgs) -> anyhow::Result<DecodeSummary> {
    if a.tau.is_nan() || a.tau <= 0.0 {
        bail!("invalid-config: tau must be positive");
    }
    let trace_hash = sha256_file(&a.trace)?;
    let (model, model_hash) = match &a.model {
        Some(p) => {
            let (m, _) = load_model(p)?;
            (Some(m), Some(hex32(&sha256_file(p)?)))
        }
        None => (None, None),
    };
    let budgeting = match (a.blk, a.budget, model) {
        (Some(blk), Some(budget), _) => Budgeting::Fixed { blk, budget },
        (Some(_), None, _) | (None, Some(_), _) => bail!("invalid-config: --blk and --budget go together"),
        (None, None, Some(m)) => Budgeting::Adaptive(m),
        (None, None, None) => Budgeting::Oracle { tau: a.tau },
    };
    if a.mode == ModeArg::Exec && a.policy != PolicyArg::Priority {
        bail!("invalid-config: executed mode runs the priority queue only");
    }
    let (spec, layers) = read_all_layers(&a.trace)?;
    prepare_out(&a.out)?;
    let outcomes = evaluate_all(&spec, &layers, &budgeting)?;
    let heads = all_heads(&outcomes);
    let batches = decode_batches(&outcomes);
    let workers = WorkerProfile::default_pair();
    let sched = schedule_batches(&batches, &workers, a.policy.into())?;
    let mut events: Vec<EventRow> = Vec::new();

    let exec = if a.mode == ModeArg::Exec {
        let threads = host_threads();
        let (mut total, mut wall, mut ok, mut diff) = (0usize, 0.0, true, 0.0f64);
        for &(layer, step) in batches.keys() {
            let idx: Vec<usize> = (0..layers.len()).filter(|&i| layers[i].layer == layer).collect();
            let lws: Vec<LayerWorkload> = idx.iter().map(|&i| layers[i].clone()).collect();
            let outs: Vec<LayerOutcome> = idx.iter().map(|&i| outcomes[i].clone()).collect();
            let tasks = prepare_step(&lws, &outs, step)?;
            let reference = serial_reference(&tasks)?;
            let run = run_executed(&tasks, &workers, threads)?;
            if !run.report.failed.is_empty() {
                bail!("worker failure on tasks {:?}", run.report.failed);
            }
            ok &= run.exactly_once();
            let got: Vec<_> = run.results.into_iter().map(|r| r.expect("no failures")).collect();
            diff = diff.max(max_abs_diff(&got, &reference));
            total += tasks.len();
            wall += run.report.makespan;
            events.extend(event_rows(layer, step, &run.report));
        }
        Some(ExecCheck {
            host_threads: threads,
            tasks: total,
            exactly_once: ok,
            max_abs_diff_vs_serial: diff,
            wall_makespan: wall,
        })
    } else {
        for ((layer, step), r) in &sched.reports {
            events.extend(event_rows(*layer, *step, r));
        }
        None
    };

    let name = budgeting.name();
    let rows: Vec<HeadRow> = heads.iter().map(|h| HeadRow::new(&name, h)).collect();
    write_csv(&a.out.join("heads.csv"), &rows)?;
    write_csv(&a.out.join("events.csv"), &events)?;
    let summary = DecodeSummary {
        schema: SCHEMA_VERSION,
        config: name,
        trace_sha256: hex32(&trace_hash),
        model_sha256: model_hash,
        tau: a.tau,
        policy: a.policy,
        mode: a.mode,
        deviation: DeviationSummary::of(&heads, a.tau),
        tasks: sched.tasks,
        total_time: sched.total_time,
        accelerator_idle_ratio: sched.accelerator_idle_ratio,
        exec,
    };
    write_json(&a.out.join("decode.json"), &summary)?;
    let mut m = Manifest::new("decode", None, serde_json::to_value(a)?);
    m.input(&a.trace)?;
    if let Some(p) = &a.model {
        m.input(p)?;
    }
    m.finish(&a.out, &["heads.csv", "events.csv", "decode.json"])?;
    Ok(summary)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Learned predictor for the adaptive configuration.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Granularity of the fixed baseline.
    #[arg(long, default_value_t = 16)]
    pub blk: usize,
    /// Budget of the fixed baseline.
    #[arg(long, default_value_t = 0.05)]
    pub budget: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigRow {
    pub config: String,
    pub heads: usize,
    pub mean_deviation: f64,
    pub p90_deviation: f64,
    pub max_deviation: f64,
    pub within_tau: f64,
    pub delta: f64,
    pub mean_budget: f64,
    pub mean_realized: f64,
    pub bypassed: f64,
    pub tasks: usize,
    pub total_time: f64,
    pub accelerator_idle_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SchedulerRow {
    pub policy: Policy,
    pub total_time: f64,
    pub accelerator_idle_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TauRow {
    pub tau: f64,
    pub mean_budget: f64,
    pub mean_realized: f64,
    pub within_tau: f64,
    pub total_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub schema: u32,
    pub trace_sha256: String,
    pub model_sha256: String,
    pub tau: f64,
    pub configs: Vec<ConfigRow>,
    pub schedulers: Vec<SchedulerRow>,
    pub tau_sweep: Vec<TauRow>,
}

impl CompareSummary {
    pub fn config(&self, prefix: &str) -> Option<&ConfigRow> {
        self.configs.iter().find(|c| c.config.starts_with(prefix))
    }
}

fn batches_of(outcomes: &[LayerOutcome]) -> BTreeMap<(usize, usize), Vec<SparseTask>> {
    decode_batches(outcomes)
}

pub fn cmd_compare(a: &CompareArgs) -> anyhow::Result<CompareSummary> {
    if !(a.tau > 0.0) {
        bail!("invalid-config: tau must be positive");
    }
    if a.blk == 0 {
        bail!("invalid-config: block size must be positive");
    }
    let trace_hash = sha256_file(&a.trace)?;
    let model_hash = sha256_file(&a.model)?;
    let (model, _) = load_model(&a.model)?;
    let (spec, layers) = read_all_layers(&a.trace)?;
    prepare_out(&a.out)?;
    let workers = WorkerProfile::default_pair();

    let configs = [
        Budgeting::Full,
        Budgeting::Fixed {
            blk: a.blk,
            budget: a.budget,
        },
        Budgeting::Score { blk: a.blk },
        Budgeting::Oracle { tau: a.tau },
        Budgeting::Adaptive(model),
    ];
    let mut rows = Vec::new();
    let mut head_rows = Vec::new();
    let mut schedulers = Vec::new();
    for b in &configs {
        let outcomes = evaluate_all(&spec, &layers, b)?;
        let heads = all_heads(&outcomes);
        let batches = batches_of(&outcomes);
        let sched = schedule_batches(&batches, &workers, Policy::Priority)?;
        let name = b.name();
        head_rows.extend(heads.iter().map(|h| HeadRow::new(&name, h)));
        if let Budgeting::Adaptive(_) = b {
            for p in [Policy::Priority, Policy::NoParallel, Policy::Uniform, Policy::LengthBased] {
                let s = schedule_batches(&batches, &workers, p)?;
                schedulers.push(SchedulerRow {
                    policy: p,
                    total_time: s.total_time,
                    accelerator_idle_ratio: s.accelerator_idle_ratio,
                });
            }
        }
        let d = DeviationSummary::of(&heads, a.tau);
        rows.push(ConfigRow {
            config: name,
            heads: d.heads,
            mean_deviation: d.mean_deviation,
            p90_deviation: d.p90_deviation,
            max_deviation: d.max_deviation,
            within_tau: d.within_tau,
            delta: d.delta,
            mean_budget: d.mean_budget,
            mean_realized: d.mean_realized,
            bypassed: d.bypassed,
            tasks: sched.tasks,
            total_time: sched.total_time,
            accelerator_idle_ratio: sched.accelerator_idle_ratio,
        });
    }

    let mut sweep = Vec::new();
    for tau in TAU_SWEEP {
        let outcomes = evaluate_all(&spec, &layers, &Budgeting::Oracle { tau })?;
        let heads = all_heads(&outcomes);
        let d = DeviationSummary::of(&heads, tau);
        let sched = schedule_batches(&batches_of(&outcomes), &workers, Policy::Priority)?;
        sweep.push(TauRow {
            tau,
            mean_budget: d.mean_budget,
            mean_realized: d.mean_realized,
            within_tau: d.within_tau,
            total_time: sched.total_time,
        });
    }

    write_csv(&a.out.join("configs.csv"), &rows)?;
    write_csv(&a.out.join("schedulers.csv"), &schedulers)?;
    write_csv(&a.out.join("tau_sweep.csv"), &sweep)?;
    write_csv(&a.out.join("heads.csv"), &head_rows)?;
    let summary = CompareSummary {
        schema: SCHEMA_VERSION,
        trace_sha256: hex32(&trace_hash),
        model_sha256: hex32(&model_hash),
        tau: a.tau,
        configs: rows,
        schedulers,
        tau_sweep: sweep,
    };
    write_json(&a.out.join("compare.json"), &summary)?;
    let mut m = Manifest::new("compare", None, serde_json::to_value(a)?);
    m.input(&a.trace)?;
    m.input(&a.model)?;
    m.finish(
        &a.out,
        &["configs.csv", "schedulers.csv", "tau_sweep.csv", "heads.csv", "compare.json"],
    )?;
    Ok(summary)
}
