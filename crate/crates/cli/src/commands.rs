use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mtlab::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use mtlab::diagnostics::{
    concentration_experiment, consecutive_trace, load_trace, loglog_slope, pairwise_matrix, save_trace, TraceMode,
};
use mtlab::metrics::{panoptic_quality, rolling_mean};
use mtlab::tasks::{load_mask, save_dataset, TaskDataset, TaskSpec};
use mtlab::trainer::{build_model, evaluate, EvalResult, MultiTaskModel, Session, TrainLog};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.mtlc";
pub const TRACE_FILE: &str = "trace.mtlg";
pub const RESULTS_FILE: &str = "results.csv";
pub const SMOOTHED_FILE: &str = "loss_smoothed.csv";
pub const CONSECUTIVE_FILE: &str = "cosine_consecutive.csv";
pub const MATRIX_FILE: &str = "cosine_matrix.csv";
pub const CONCENTRATION_FILE: &str = "concentration.csv";

/// Written to stdout; the timestamp header is the only non-deterministic line.
pub struct Console<'a> {
    pub out: &'a mut dyn Write,
    pub timestamp: bool,
}

impl Console<'_> {
    fn header(&mut self, command: &str) -> Result<(), CliError> {
        if self.timestamp {
            let now = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            self.line(format!("# mtlab {command} {now}"))?;
        }
        Ok(())
    }

    fn line(&mut self, text: impl AsRef<str>) -> Result<(), CliError> {
        writeln!(self.out, "{}", text.as_ref()).map_err(|e| CliError::io("stdout", e))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("cannot create {}", dir.display()), e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::io(format!("cannot write {}", path.display()), e))
}

fn file_stem(index: usize, name: &str) -> String {
    let clean: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("{index:02}_{clean}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub name: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub spec: TaskSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub tasks: Vec<ManifestEntry>,
}

/// Writes one dataset file per task under `out/datasets` and a manifest.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path, console: &mut Console) -> Result<Manifest, CliError> {
    cfg.validate()?;
    let datasets = cfg.datasets()?;
    console.header("generate")?;
    let dir = out.join("datasets");
    create_dir(&dir)?;
    let mut tasks = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        let rel = PathBuf::from("datasets").join(format!("{}.mtld", file_stem(i, &ds.spec.name)));
        save_dataset(&out.join(&rel), ds).map_err(|e| CliError::io(rel.display(), e))?;
        console.line(format!("{}\t{}\t{} examples", rel.display(), ds.spec.name, ds.examples().len()))?;
        tasks.push(ManifestEntry { index: i, name: ds.spec.name.clone(), path: rel, spec: ds.spec.clone() });
    }
    let manifest = Manifest { seed: cfg.seed, tasks };
    write_file(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("manifest serialises"))?;
    Ok(manifest)
}

/// Stored as checkpoint metadata so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskSpec>,
}

impl RunMetadata {
    fn parse(ck: &Checkpoint) -> Result<Self, CliError> {
        serde_json::from_str(&ck.metadata).map_err(|e| CliError::data("checkpoint metadata", e))
    }
}

fn check_specs(expected: &[TaskSpec], datasets: &[TaskDataset]) -> Result<(), CliError> {
    if expected.len() != datasets.len() {
        return Err(CliError::Data(format!(
            "checkpoint was trained on {} tasks, {} datasets given",
            expected.len(),
            datasets.len()
        )));
    }
    for (i, (e, ds)) in expected.iter().zip(datasets).enumerate() {
        if *e != ds.spec {
            return Err(CliError::Data(format!("task {i}: dataset spec '{}' differs from the checkpoint's '{}'", ds.spec.name, e.name)));
        }
    }
    Ok(())
}

fn model_for(cfg: &ExperimentConfig, datasets: &[TaskDataset]) -> Result<MultiTaskModel, CliError> {
    let specs: Vec<TaskSpec> = datasets.iter().map(|d| d.spec.clone()).collect();
    build_model(&specs, &cfg.arch, cfg.seed).map_err(|e| CliError::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub first_iter: u64,
    pub iterations: u64,
    pub checkpoint: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct LogRow {
    t: u64,
    task_id: usize,
    loss: f64,
}

/// Trains per the config, optionally continuing from a checkpoint. Writes
/// the resolved config, the iteration log, the gradient trace (unless
/// disabled) and the final checkpoint into `out`. A resumed run logs only
/// the iterations it executes.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    console: &mut Console,
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let datasets = cfg.datasets()?;
    let sampler = cfg.sampler()?;
    let model = model_for(cfg, &datasets)?;
    let specs: Vec<TaskSpec> = datasets.iter().map(|d| d.spec.clone()).collect();
    let mut session = match resume {
        None => Session::new(model, cfg.adam, cfg.seed)?,
        Some(path) => {
            let ck = load_checkpoint(path).map_err(|e| CliError::data(path.display(), e))?;
            check_specs(&RunMetadata::parse(&ck)?.tasks, &datasets)?;
            ck.restore(model).map_err(|e| CliError::data(path.display(), e))?
        }
    };
    if session.next_iter > cfg.iterations {
        return Err(CliError::Config(format!(
            "checkpoint is at iteration {}, past the configured {}",
            session.next_iter, cfg.iterations
        )));
    }
    let metadata = serde_json::to_string(&RunMetadata { config: cfg.clone(), tasks: specs }).expect("metadata serialises");

    console.header("train")?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_FILE), cfg.to_json())?;
    let ck_dir = out.join("checkpoints");
    if cfg.checkpoint_every.is_some() {
        create_dir(&ck_dir)?;
    }

    let first_iter = session.next_iter;
    let mut log = TrainLog::new(cfg.trace);
    let mut io_error = None;
    let mut window_loss = 0.0;
    let result = session.run_until(&datasets, &sampler, cfg.batch_size, cfg.iterations, &mut log, |s, rec| {
        window_loss += rec.loss;
        if s.next_iter % cfg.log_every == 0 {
            eprintln!("iteration {:>6}  mean loss {:.6}", s.next_iter, window_loss / cfg.log_every as f64);
            window_loss = 0.0;
        }
        if cfg.checkpoint_every.is_some_and(|every| s.next_iter % every == 0) {
            let path = ck_dir.join(format!("checkpoint_{:06}.mtlc", s.next_iter));
            if let Err(e) = save_checkpoint(&path, &Checkpoint::of(s, metadata.clone())) {
                io_error = Some(CliError::io(path.display(), e));
                return Err(mtlab::TrainError::Config("checkpoint write failed".into()));
            }
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e);
    }

    // The log is written even when a step fails, up to the failing iteration.
    let mut w = csv_writer(&out.join(TRAIN_LOG_FILE))?;
    if log.records.is_empty() {
        w.write_record(["t", "task_id", "loss"])?;
    }
    for r in &log.records {
        w.serialize(LogRow { t: r.t, task_id: r.task, loss: r.loss })?;
    }
    w.flush().map_err(|e| CliError::io(TRAIN_LOG_FILE, e))?;
    if let Some(trace) = &log.trace {
        save_trace(&out.join(TRACE_FILE), trace).map_err(|e| CliError::io(TRACE_FILE, e))?;
    }
    result?;

    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &Checkpoint::of(&session, metadata)).map_err(|e| CliError::io(checkpoint.display(), e))?;
    let n = log.records.len() as u64;
    console.line(format!("iterations {first_iter}..{}", session.next_iter))?;
    if n > 0 {
        let tail = log.records.iter().rev().take(100).map(|r| r.loss).sum::<f64>() / n.min(100) as f64;
        console.line(format!("mean loss over the last {} iterations: {tail:.6}", n.min(100)))?;
    }
    console.line(format!("checkpoint {}", checkpoint.display()))?;
    Ok(TrainSummary { first_iter, iterations: n, checkpoint })
}

#[derive(Serialize)]
struct ResultRow<'a> {
    task: &'a str,
    metric: &'a str,
    value: f64,
}

/// Evaluates every task's decoder on its eval split. The config defaults to
/// the one stored in the checkpoint.
pub fn cmd_eval(
    checkpoint: &Path,
    cfg: Option<&ExperimentConfig>,
    out: &Path,
    console: &mut Console,
) -> Result<Vec<EvalResult>, CliError> {
    let ck = load_checkpoint(checkpoint).map_err(|e| CliError::data(checkpoint.display(), e))?;
    let meta = RunMetadata::parse(&ck)?;
    let cfg = cfg.unwrap_or(&meta.config);
    cfg.validate()?;
    let datasets = cfg.datasets()?;
    check_specs(&meta.tasks, &datasets)?;
    let model = model_for(cfg, &datasets)?;
    let session = ck.restore(model).map_err(|e| CliError::data(checkpoint.display(), e))?;
    let results = (0..datasets.len())
        .map(|i| evaluate(&session.model, i, &datasets[i]))
        .collect::<Result<Vec<_>, _>>()?;

    console.header("eval")?;
    create_dir(out)?;
    let mut w = csv_writer(&out.join(RESULTS_FILE))?;
    console.line("task,metric,value")?;
    for r in &results {
        w.serialize(ResultRow { task: &r.name, metric: r.metric.name(), value: r.value })?;
        console.line(format!("{},{},{}", r.name, r.metric.name(), r.value))?;
    }
    w.flush().map_err(|e| CliError::io(RESULTS_FILE, e))?;
    Ok(results)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseSummary {
    pub smoothed_len: usize,
    pub consecutive_len: usize,
    pub skipped: usize,
    pub present_cells: usize,
    pub k: usize,
}

#[derive(Serialize)]
struct SmoothedRow {
    t: u64,
    task_id: usize,
    loss: f64,
    smoothed_loss: f64,
}

#[derive(Serialize)]
struct ConsecutiveRow {
    t: u64,
    task_prev: usize,
    task_curr: usize,
    cos_similarity: f64,
    cos_distance: f64,
}

/// Reads a training run directory and writes the smoothed loss, the
/// consecutive-gradient cosine series and the k×k matrix of rolling-mean
/// cosine distances. `matrix_window = None` averages all pairs per cell.
pub fn cmd_diagnose(
    run: &Path,
    window: usize,
    matrix_window: Option<usize>,
    out: &Path,
    console: &mut Console,
) -> Result<DiagnoseSummary, CliError> {
    if window == 0 || matrix_window == Some(0) {
        return Err(CliError::Config("windows must be at least 1".into()));
    }
    let cfg = ExperimentConfig::load(&run.join(CONFIG_FILE))
        .map_err(|e| CliError::Data(format!("run directory {}: {e}", run.display())))?;
    if cfg.trace == TraceMode::Off {
        return Err(CliError::Data(format!(
            "run {} was trained with the gradient trace disabled (trace mode off)",
            run.display()
        )));
    }
    let log_path = run.join(TRAIN_LOG_FILE);
    let mut reader = csv::Reader::from_path(&log_path).map_err(|e| CliError::data(log_path.display(), e))?;
    let rows: Vec<LogRow> =
        reader.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::data(log_path.display(), e))?;
    let trace_path = run.join(TRACE_FILE);
    let trace = load_trace(&trace_path).map_err(|e| CliError::data(trace_path.display(), e))?;
    let k = cfg.num_tasks();
    if let Some(e) = trace.entries().iter().find(|e| e.task >= k) {
        return Err(CliError::Data(format!("trace names task {} of a {k}-task run", e.task)));
    }

    let losses: Vec<f64> = rows.iter().map(|r| r.loss).collect();
    let smoothed = rolling_mean(&losses, window).expect("window checked");
    let series = consecutive_trace(&trace);
    let matrix = pairwise_matrix(&trace, k, matrix_window).map_err(|e| CliError::Data(e.to_string()))?;

    console.header("diagnose")?;
    create_dir(out)?;
    let mut w = csv_writer(&out.join(SMOOTHED_FILE))?;
    if rows.is_empty() {
        w.write_record(["t", "task_id", "loss", "smoothed_loss"])?;
    }
    for (r, s) in rows.iter().zip(&smoothed) {
        w.serialize(SmoothedRow { t: r.t, task_id: r.task_id, loss: r.loss, smoothed_loss: *s })?;
    }
    w.flush().map_err(|e| CliError::io(SMOOTHED_FILE, e))?;

    let mut w = csv_writer(&out.join(CONSECUTIVE_FILE))?;
    if series.points.is_empty() {
        w.write_record(["t", "task_prev", "task_curr", "cos_similarity", "cos_distance"])?;
    }
    for p in &series.points {
        w.serialize(ConsecutiveRow {
            t: p.t,
            task_prev: p.task_prev,
            task_curr: p.task_curr,
            cos_similarity: p.similarity,
            cos_distance: p.distance,
        })?;
    }
    w.flush().map_err(|e| CliError::io(CONSECUTIVE_FILE, e))?;

    // Row i holds the cells (i, j); absent cells are empty.
    let mut w = csv_writer(&out.join(MATRIX_FILE))?;
    let mut header = vec!["task_prev".to_string()];
    header.extend((0..k).map(|j| format!("distance_{j}")));
    header.extend((0..k).map(|j| format!("count_{j}")));
    w.write_record(&header)?;
    for i in 0..k {
        let mut row = vec![i.to_string()];
        row.extend((0..k).map(|j| matrix.get(i, j).map(|v| v.to_string()).unwrap_or_default()));
        row.extend((0..k).map(|j| matrix.count(i, j).to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(MATRIX_FILE, e))?;

    let summary = DiagnoseSummary {
        smoothed_len: smoothed.len(),
        consecutive_len: series.points.len(),
        skipped: series.skipped.len(),
        present_cells: matrix.cells.iter().flatten().count(),
        k,
    };
    console.line(format!("smoothed loss: {} points (window {window})", summary.smoothed_len))?;
    console.line(format!("consecutive cosine: {} points, {} skipped", summary.consecutive_len, summary.skipped))?;
    console.line(format!("matrix: {} of {} cells present", summary.present_cells, k * k))?;
    Ok(summary)
}

/// Panoptic quality of one predicted mask file against a ground-truth file.
pub fn cmd_pq(pred: &Path, gt: &Path, class_aware: bool, console: &mut Console) -> Result<(), CliError> {
    let p = load_mask(pred).map_err(|e| CliError::data(pred.display(), e))?;
    let g = load_mask(gt).map_err(|e| CliError::data(gt.display(), e))?;
    let r = panoptic_quality(&p, &g, class_aware).map_err(|e| CliError::Data(e.to_string()))?;
    console.header("pq")?;
    console.line("pq,sq,rq,tp,fp,fn")?;
    console.line(format!("{},{},{},{},{},{}", r.pq, r.sq, r.rq, r.stats.tp, r.stats.fp, r.stats.fn_))?;
    Ok(())
}

#[derive(Serialize)]
struct ConcentrationRow {
    dim: usize,
    mean: f64,
    std: f64,
    p05: f64,
    p95: f64,
}

/// Returns the fitted log-log slope of std against dimension.
pub fn cmd_concentration(
    dims: &[usize],
    n_pairs: usize,
    seed: u64,
    out: &Path,
    console: &mut Console,
) -> Result<f64, CliError> {
    let stats = concentration_experiment(dims, n_pairs, seed).map_err(|e| CliError::Config(e.to_string()))?;
    console.header("concentration")?;
    create_dir(out)?;
    let mut w = csv_writer(&out.join(CONCENTRATION_FILE))?;
    console.line("dim,mean,std,p05,p95")?;
    for s in &stats {
        w.serialize(ConcentrationRow { dim: s.dim, mean: s.mean, std: s.std, p05: s.p05, p95: s.p95 })?;
        console.line(format!("{},{},{},{},{}", s.dim, s.mean, s.std, s.p05, s.p95))?;
    }
    w.flush().map_err(|e| CliError::io(CONCENTRATION_FILE, e))?;
    let slope = if stats.len() >= 2 { loglog_slope(&stats) } else { f64::NAN };
    console.line(format!("# log-log slope {slope}"))?;
    Ok(slope)
}
