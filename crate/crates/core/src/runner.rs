//! Experiment orchestration: initialization, training, evaluation after every
//! task and saving, plus multi-seed suites and memory sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::algorithms::{build_learner, check_method, Hook, LifecycleGuard, TaskInfo};
use crate::batch::Batch;
use crate::config::{validate_config, ExperimentConfig, Scenario};
use crate::datastream::{
    catalog_summary, catalogs_for_pool, compose, iterate_stream, load_pool, DataPool, StreamBatch, TaskSequence,
    TaskSpec,
};
use crate::error::{Error, Result};
use crate::memorybudget::{
    compute_budget, ledger_from_run, plan_sweep, Budget, Knob, PlannedPoint, PricingRules, StorageLedger,
};
use crate::metrics::{AccuracyMatrix, MetricsSummary};
use crate::model::{save_checkpoint, Backbone, Model};
use crate::util::{mean, median, sample_std};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything needed to rebuild the comparison tables without retraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub digest: String,
    pub matrix: AccuracyMatrix,
    pub metrics: Option<MetricsSummary>,
    pub ledger: StorageLedger,
    pub budget: Option<Budget>,
    pub task_wall_times: Vec<f64>,
    pub completed: bool,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Write the output files under `output_dir`.
    pub write_outputs: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { write_outputs: true }
    }
}

/// A finished run with the trained learner still attached.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub learner: LifecycleGuard,
    pub pool: DataPool,
    pub sequence: TaskSequence,
}

impl RunArtifacts {
    pub fn trace(&self) -> &[(usize, Hook)] {
        self.learner.trace()
    }
}

/// JSON-lines event sink; a no-op when outputs are disabled.
struct Events {
    file: Option<fs::File>,
}

impl Events {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                let p = d.join("events.log");
                Some(fs::File::create(&p).map_err(|e| Error::io(p.display().to_string(), e))?)
            }
            None => None,
        };
        Ok(Self { file })
    }

    fn emit(&mut self, v: serde_json::Value) {
        if let Some(f) = &mut self.file {
            if let Err(e) = writeln!(f, "{v}") {
                warn!("event log write failed: {e}");
            }
        }
    }
}

/// Pool, catalogs and task sequence for a config.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(ExperimentConfig, DataPool, TaskSequence)> {
    let pool = load_pool(cfg)?;
    let cfg = validate_config(cfg.clone(), &catalog_summary(&pool))?;
    let catalogs = catalogs_for_pool(&pool, cfg.seed)?;
    let seq = compose(&catalogs, &cfg)?;
    Ok((cfg, pool, seq))
}

/// Recomputes the task-sequence digest a record should carry.
pub fn sequence_digest(cfg: &ExperimentConfig) -> Result<String> {
    Ok(prepare(cfg)?.2.digest())
}

fn materialize(pool: &DataPool, b: &StreamBatch) -> Batch {
    Batch::new(pool.gather(&b.refs), b.labels.clone(), b.task_index)
}

fn task_train_data(pool: &DataPool, task: &TaskSpec) -> Batch {
    let refs: Vec<_> = task.train_refs.iter().map(|r| r.sample).collect();
    Batch::new(pool.gather(&refs), task.train_refs.iter().map(|r| r.label).collect(), task.task_index)
}

/// Test accuracy of `task` with predictions restricted to `classes`.
pub fn evaluate_task(learner: &LifecycleGuard, pool: &DataPool, task: &TaskSpec, classes: &[usize]) -> Result<f64> {
    if task.test_refs.is_empty() {
        return Err(Error::Dataset(format!("task {} has no test samples", task.task_index)));
    }
    let mut hits = 0usize;
    for chunk in task.test_refs.chunks(512) {
        let refs: Vec<_> = chunk.iter().map(|r| r.sample).collect();
        let pred = learner.inference(&pool.gather(&refs), classes)?;
        hits += pred.iter().zip(chunk).filter(|(p, r)| **p == r.label).count();
    }
    Ok(hits as f64 / task.test_refs.len() as f64)
}

/// Accuracy on tasks `0..=t`: the global head over every seen class when task
/// agnostic, the task's own classes when task aware.
pub fn evaluate_upto(
    learner: &LifecycleGuard,
    pool: &DataPool,
    seq: &TaskSequence,
    t: usize,
    scenario: Scenario,
) -> Result<Vec<f64>> {
    let mut seen: Vec<usize> = seq.tasks[..=t].iter().flat_map(|k| k.class_ids.iter().copied()).collect();
    seen.sort_unstable();
    seq.tasks[..=t]
        .iter()
        .map(|task| match scenario {
            Scenario::TaskAgnostic => evaluate_task(learner, pool, task, &seen),
            Scenario::TaskAware => evaluate_task(learner, pool, task, &task.sorted_classes()),
        })
        .collect()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, contents).map_err(|e| Error::io(p.display().to_string(), e))
}

fn save_record(dir: &Path, record: &RunRecord) -> Result<()> {
    write_file(dir, "record.json", &serde_json::to_string_pretty(record)?)?;
    write_file(dir, "matrix.csv", &record.matrix.to_csv())?;
    let metrics = json!({ "metrics": record.metrics, "budget": record.budget, "completed": record.completed });
    write_file(dir, "metrics.json", &serde_json::to_string_pretty(&metrics)?)?;
    write_file(dir, "ledger.json", &record.ledger.to_json()?)
}

/// Runs one experiment end to end and writes its outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    Ok(execute(cfg, RunOptions::default())?.record)
}

/// As [`run_experiment`], returning the trained learner and data as well.
pub fn execute(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunArtifacts> {
    // Initialization stage.
    check_method(&cfg.method)?;
    let (cfg, pool, seq) = prepare(cfg)?;
    let dir = opts.write_outputs.then(|| cfg.output_dir.clone());
    if let Some(d) = &dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d.display().to_string(), e))?;
        write_file(d, "config.resolved.yaml", &cfg.to_yaml())?;
    }
    let mut events = Events::open(dir.as_deref())?;
    events.emit(json!({ "event": "stage", "stage": "initialization", "digest": seq.digest() }));
    let mut learner = LifecycleGuard::new(build_learner(&cfg, pool.input_shape())?);

    let mut record = RunRecord {
        version: VERSION.to_string(),
        config: cfg.clone(),
        seed: cfg.seed,
        digest: seq.digest(),
        matrix: AccuracyMatrix::new(seq.len()),
        metrics: None,
        ledger: StorageLedger::default(),
        budget: None,
        task_wall_times: Vec::new(),
        completed: false,
        error: None,
    };

    let outcome = train_and_evaluate(&cfg, &pool, &seq, &mut learner, &mut record, &mut events);
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
        events.emit(json!({ "event": "failure", "message": e.to_string() }));
        if let Some(d) = &dir {
            save_record(d, &record)?;
        }
        return Err(match e {
            Error::Training(_) => e,
            other => Error::Training(other.to_string()),
        });
    }

    // Saving stage.
    events.emit(json!({ "event": "stage", "stage": "saving" }));
    let l = learner.learner();
    record.ledger = ledger_from_run(l.buffer_manifest().as_ref(), &l.census(), &l.state_descriptors())?;
    record.budget = Some(compute_budget(&record.ledger)?);
    record.metrics = record.matrix.summary().ok();
    record.completed = true;
    if let Some(d) = &dir {
        save_record(d, &record)?;
        save_checkpoint(l.model(), d)?;
    }
    Ok(RunArtifacts { record, learner, pool, sequence: seq })
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    pool: &DataPool,
    seq: &TaskSequence,
    learner: &mut LifecycleGuard,
    record: &mut RunRecord,
    events: &mut Events,
) -> Result<()> {
    let mut seen: Vec<usize> = Vec::new();
    for task in &seq.tasks {
        let start = Instant::now();
        let t = task.task_index;
        events.emit(json!({ "event": "stage", "stage": "training", "task": t }));
        seen.extend(&task.class_ids);
        seen.sort_unstable();
        let info = TaskInfo { task_index: t, classes: task.sorted_classes(), seen_classes: seen.clone() };
        learner.before_task(&info)?;
        events.emit(json!({ "event": "hook", "hook": "before_task", "task": t }));
        for sb in iterate_stream(task, seq.stream_mode, cfg.batch_size, cfg.seed)? {
            let out = learner.observe(&materialize(pool, &sb))?;
            events.emit(json!({
                "event": "batch", "task": t, "batch": sb.batch_index, "loss": out.loss, "acc": out.accuracy
            }));
        }
        learner.after_task(&task_train_data(pool, task))?;
        events.emit(json!({ "event": "hook", "hook": "after_task", "task": t }));
        record.task_wall_times.push(start.elapsed().as_secs_f64());

        events.emit(json!({ "event": "stage", "stage": "evaluation", "task": t }));
        let row = evaluate_upto(learner, pool, seq, t, cfg.scenario)?;
        info!("{} task {t}: {:?}", cfg.method, row);
        events.emit(json!({ "event": "eval", "task": t, "row": row }));
        record.matrix.push_row(row)?;
    }
    Ok(())
}

/// One suite row: a config across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub last_acc: Vec<f64>,
    pub avg_acc: Vec<f64>,
    pub last_mean: f64,
    pub last_std: f64,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    /// Plain-text comparison table, accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:<10} {:>18} {:>18} {:>6}\n", "config", "method", "last acc", "avg acc", "fails");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:<10} {:>9.2} ± {:<6.2} {:>9.2} ± {:<6.2} {:>6}\n",
                r.name,
                r.method,
                100.0 * r.last_mean,
                100.0 * r.last_std,
                100.0 * r.avg_mean,
                100.0 * r.avg_std,
                r.failures.len()
            ));
        }
        s
    }
}

/// Label for a config in suite output: the last component of its output dir.
fn config_name(cfg: &ExperimentConfig) -> String {
    cfg.output_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| cfg.method.clone())
}

fn with_seed(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = seed;
    c.output_dir = cfg.output_dir.join(format!("seed_{seed}"));
    c
}

/// Every config under every seed. Failed runs are recorded and skipped; runs
/// execute in parallel when `parallel` is set.
pub fn run_suite(configs: &[ExperimentConfig], seeds: &[u64], parallel: bool) -> Result<SuiteReport> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidArgument("a suite needs at least one config and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let run = |&(i, s): &(usize, u64)| (i, s, run_experiment(&with_seed(&configs[i], s)));
    let results: Vec<_> = if parallel { jobs.par_iter().map(run).collect() } else { jobs.iter().map(run).collect() };
    let mut rows = Vec::new();
    for (i, cfg) in configs.iter().enumerate() {
        let mut row = SuiteRow {
            name: config_name(cfg),
            method: cfg.method.clone(),
            seeds: Vec::new(),
            last_acc: Vec::new(),
            avg_acc: Vec::new(),
            last_mean: f64::NAN,
            last_std: f64::NAN,
            avg_mean: f64::NAN,
            avg_std: f64::NAN,
            failures: Vec::new(),
        };
        for (_, s, r) in results.iter().filter(|(j, _, _)| *j == i) {
            match r.as_ref().map(|rec| rec.matrix.summary()) {
                Ok(Ok(m)) => {
                    row.seeds.push(*s);
                    row.last_acc.push(m.last_acc);
                    row.avg_acc.push(m.avg_acc);
                }
                Ok(Err(e)) => row.failures.push((*s, e.to_string())),
                Err(e) => row.failures.push((*s, e.to_string())),
            }
        }
        if !row.last_acc.is_empty() {
            row.last_mean = mean(&row.last_acc);
            row.avg_mean = mean(&row.avg_acc);
            row.last_std = if row.last_acc.len() > 1 { sample_std(&row.last_acc) } else { 0.0 };
            row.avg_std = if row.avg_acc.len() > 1 { sample_std(&row.avg_acc) } else { 0.0 };
        }
        rows.push(row);
    }
    Ok(SuiteReport { rows })
}

/// Pricing for the sweep knob of `cfg.method` on the configured data.
pub fn pricing_for(cfg: &ExperimentConfig, pool: &DataPool) -> Result<PricingRules> {
    let mut model = Model::new(
        Backbone::build(cfg.backbone.arch, pool.input_shape(), &cfg.backbone.hidden, cfg.backbone.feature_dim, cfg.seed)?,
        cfg.seed,
    );
    let classes = cfg.requested_classes();
    model.expand_head(classes.max(1))?;
    let snapshot = matches!(cfg.method.as_str(), "icarl" | "lwf");
    Ok(PricingRules {
        values_per_exemplar: pool.input_dim() as u64,
        fixed_units: if snapshot { model.num_params() as u64 * crate::memorybudget::NUMERIC_UNIT } else { 0 },
        layer_widths: model.param_groups().iter().map(|w| w.ncols()).collect(),
        num_classes: classes,
    })
}

fn apply_knob(cfg: &mut ExperimentConfig, knob: Knob, value: usize) {
    match knob {
        Knob::BufferCapacity => {
            cfg.buffer.capacity = Some(value);
            cfg.buffer.budget_bytes = None;
        }
        Knob::BasisCap => {
            cfg.method_params.insert("max_basis_cols".into(), serde_yaml::Value::from(value as u64));
        }
        Knob::ProjectionDim => {
            cfg.method_params.insert("proj_dim".into(), serde_yaml::Value::from(value as u64));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    /// `None` for a fixed-footprint method.
    pub target_mb: Option<f64>,
    pub knob: Option<String>,
    pub value: Option<usize>,
    pub achieved_units: u64,
    /// Medians over the seeds that completed.
    pub last_acc: f64,
    pub avg_acc: f64,
    pub seeds_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "target_mb", "knob", "value", "achieved_units", "last_acc", "avg_acc"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.method.clone(),
                r.target_mb.map(|v| v.to_string()).unwrap_or_default(),
                r.knob.clone().unwrap_or_default(),
                r.value.map(|v| v.to_string()).unwrap_or_default(),
                r.achieved_units.to_string(),
                format!("{:.6}", r.last_acc),
                format!("{:.6}", r.avg_acc),
            ])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// One run per feasible target and seed; writes `sweep.csv` under the base
/// output dir. Fixed-footprint methods yield a single row.
pub fn sweep_memory(method: &str, targets_mb: &[f64], base: &ExperimentConfig, seeds: &[u64]) -> Result<SweepReport> {
    let mut base = base.clone();
    base.method = method.to_string();
    check_method(method)?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let pool = load_pool(&base)?;
    let pricing = pricing_for(&base, &pool)?;
    let plans: Vec<PlannedPoint> = plan_sweep(method, targets_mb, &pricing)
        .into_iter()
        .zip(targets_mb.iter().map(Some).chain(std::iter::repeat(None)))
        .filter_map(|(p, t)| match p {
            Ok(p) => Some(p),
            Err(e) => {
                warn!("target {t:?} MB skipped: {e}");
                None
            }
        })
        .collect();
    if plans.is_empty() {
        return Err(Error::Infeasible(format!("no feasible target for {method} among {targets_mb:?} MB")));
    }
    let jobs: Vec<(usize, u64)> = (0..plans.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let results: Vec<(usize, Result<RunRecord>)> = jobs
        .par_iter()
        .map(|&(i, s)| {
            let mut cfg = base.clone();
            let tag = match &plans[i] {
                PlannedPoint::Scaled { knob, value, target_mb, .. } => {
                    apply_knob(&mut cfg, *knob, *value);
                    format!("{target_mb}mb")
                }
                PlannedPoint::Fixed => "fixed".to_string(),
            };
            cfg.seed = s;
            cfg.output_dir = base.output_dir.join(format!("{method}_{tag}")).join(format!("seed_{s}"));
            (i, run_experiment(&cfg))
        })
        .collect();
    let mut rows = Vec::new();
    for (i, plan) in plans.iter().enumerate() {
        let mut last = Vec::new();
        let mut avg = Vec::new();
        let mut ledger_units = 0;
        for (_, r) in results.iter().filter(|(j, _)| *j == i) {
            match r {
                Ok(rec) => {
                    if let Some(m) = rec.metrics {
                        last.push(m.last_acc);
                        avg.push(m.avg_acc);
                    }
                    ledger_units = ledger_units.max(rec.budget.map_or(0, |b| b.total_units));
                }
                Err(e) => warn!("sweep run failed: {e}"),
            }
        }
        if last.is_empty() {
            continue;
        }
        let (target_mb, knob, value, achieved) = match plan {
            PlannedPoint::Scaled { target_mb, knob, value, achieved_units } => {
                (Some(*target_mb), Some(knob.config_key().to_string()), Some(*value), *achieved_units)
            }
            PlannedPoint::Fixed => (None, None, None, ledger_units),
        };
        rows.push(SweepRow {
            method: method.to_string(),
            target_mb,
            knob,
            value,
            achieved_units: achieved,
            last_acc: median(&last),
            avg_acc: median(&avg),
            seeds_completed: last.len(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Training(format!("every sweep run of {method} failed")));
    }
    let report = SweepReport { rows };
    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(base.output_dir.display().to_string(), e))?;
    write_file(&base.output_dir, "sweep.csv", &report.to_csv()?)?;
    Ok(report)
}

/// Output directory of a run for a given seed inside a suite.
pub fn suite_run_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    with_seed(cfg, seed).output_dir
}
