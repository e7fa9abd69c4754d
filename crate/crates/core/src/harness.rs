//! Experiment orchestration: config files, single runs, sweeps, curve
//! export and the gradient-check report.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Model, ModelConfig, Variant};
use crate::rng::substream;
use crate::tasks::{TaskConfig, TaskInstance};
use crate::tensor::{relative_error, Fault, Tape, Tensor, Var};
use crate::train::{self, objective, Batch, RunRecord, TrainConfig, TrainOutcome};

/// Everything needed to reproduce a run or a sweep.
///
/// The file format is TOML; nested tables may be written with dotted keys
/// (`model.slots = 16`). Unknown keys are rejected with their line number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Repetition seeds; each run's `train.seed` is replaced by one of these.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Concurrent sweep cells.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "SweepSpec::is_empty")]
    pub sweep: SweepSpec,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub capacities: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<Variant>,
}

impl SweepSpec {
    fn is_empty(&self) -> bool {
        self.capacities.is_empty() && self.variants.is_empty()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out_dir(),
            seeds: default_seeds(),
            workers: default_workers(),
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

fn ensure_distinct<T: std::hash::Hash + Eq + std::fmt::Debug>(
    what: &str,
    values: &[T],
) -> Result<()> {
    let mut seen = HashSet::new();
    for v in values {
        if !seen.insert(v) {
            return Err(Error::Config(format!("{what} lists {v:?} more than once")));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates a config document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        ensure_distinct("seeds", &self.seeds)?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        ensure_distinct("sweep.capacities", &self.sweep.capacities)?;
        ensure_distinct("sweep.variants", &self.sweep.variants)?;
        if self.sweep.capacities.contains(&0) {
            return Err(Error::Config("sweep.capacities must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate(self.model.vocab_size)
    }

    /// The configuration of one run.
    fn cell(&self, seed: u64) -> (ModelConfig, TrainConfig) {
        let train = TrainConfig {
            seed,
            ..self.train.clone()
        };
        (self.model.clone(), train)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row of a metric table.
#[derive(Clone, Debug, PartialEq, Serialize)]
struct MetricRow<'a> {
    task: &'a str,
    variant: &'a str,
    slots: usize,
    seed: u64,
    steps: usize,
    acc: f64,
    bleu1: f64,
    rouge_l: f64,
    em: f64,
    token_f1: f64,
    consistency: String,
    gw_mean: String,
    gf_mean: String,
}

impl<'a> MetricRow<'a> {
    fn new(
        task: &'a TaskConfig,
        model: &'a ModelConfig,
        seed: u64,
        steps: usize,
        r: &MetricReport,
    ) -> Self {
        Self {
            task: task.name.name(),
            variant: model.variant.name(),
            slots: model.slots,
            seed,
            steps,
            acc: r.acc,
            bleu1: r.bleu1,
            rouge_l: r.rouge_l,
            em: r.em,
            token_f1: r.token_f1,
            consistency: fmt_opt(r.consistency),
            gw_mean: fmt_opt(r.gw_mean),
            gf_mean: fmt_opt(r.gf_mean),
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Trains one model, streaming its records to `records_path` and saving
/// the final parameters to `checkpoint_path`.
fn run_one(
    model: &ModelConfig,
    task: &TaskConfig,
    train_cfg: &TrainConfig,
    records_path: &Path,
    checkpoint_path: &Path,
) -> Result<TrainOutcome> {
    let mut sink = create_file(records_path)?;
    let outcome = train::train(model, task, train_cfg, Some(&mut sink))?;
    checkpoint::save(&outcome.model, checkpoint_path)?;
    Ok(outcome)
}

/// What [`run_experiment`] produced.
pub struct ExperimentSummary {
    pub out_dir: PathBuf,
    /// One final report per seed, in seed-list order.
    pub reports: Vec<(u64, MetricReport)>,
}

pub fn records_file(seed: u64) -> String {
    format!("records-seed{seed}.jsonl")
}

pub fn checkpoint_file(seed: u64) -> String {
    format!("checkpoint-seed{seed}.txt")
}

/// Trains one model per seed. Writes `config.toml` (the resolved config),
/// `records-seed<S>.jsonl`, `checkpoint-seed<S>.txt` and `metrics.csv`
/// (one row per seed) under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

    let metrics_path = dir.join("metrics.csv");
    let mut table = csv::Writer::from_writer(create_file(&metrics_path)?);
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        let (model, train_cfg) = cfg.cell(seed);
        let outcome = run_one(
            &model,
            &cfg.task,
            &train_cfg,
            &dir.join(records_file(seed)),
            &dir.join(checkpoint_file(seed)),
        )?;
        let steps = outcome.records.last().map_or(0, |r| r.step);
        table
            .serialize(MetricRow::new(
                &cfg.task,
                &model,
                seed,
                steps,
                &outcome.report,
            ))
            .map_err(|e| csv_error(&metrics_path, e))?;
        reports.push((seed, outcome.report));
    }
    table.flush().map_err(|e| Error::io(&metrics_path, e))?;
    Ok(ExperimentSummary {
        out_dir: dir.clone(),
        reports,
    })
}

/// Evaluates a saved model on the held-out set of `cfg` for `seed`.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    model: &Model,
    seed: u64,
) -> Result<MetricReport> {
    let set = train::eval_set(
        &cfg.task,
        model.config.vocab_size,
        seed,
        cfg.train.eval_size,
    )?;
    train::evaluate(model, &set)
}

/// Writes `count` instances of the configured task as JSON lines.
pub fn dump_tasks(
    task: &TaskConfig,
    vocab: usize,
    seed: u64,
    count: usize,
    out: &mut dyn Write,
) -> Result<()> {
    let mut rng = substream(seed, "data");
    for _ in 0..count {
        let inst: TaskInstance = task.generate(rng.next_u64(), vocab)?;
        let line = serde_json::to_string(&inst)?;
        writeln!(out, "{line}").map_err(|e| Error::io("<task dump>", e))?;
    }
    Ok(())
}

/// The quantity a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Capacity,
    Variant,
}

impl SweepAxis {
    fn column(self) -> &'static str {
        match self {
            SweepAxis::Capacity => "n",
            SweepAxis::Variant => "variant",
        }
    }

    fn file(self) -> &'static str {
        match self {
            SweepAxis::Capacity => "capacity",
            SweepAxis::Variant => "ablation",
        }
    }
}

/// Result of one (axis value, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub steps: usize,
    /// The final report, or the error that stopped the run.
    pub outcome: std::result::Result<MetricReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub cells: Vec<SweepCell>,
    /// Per-metric median over the successful cells.
    pub median: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Median accuracy for one axis value.
    pub fn median_acc(&self, value: &str) -> Option<f64> {
        self.row(value)?.median.as_ref().map(|m| m.acc)
    }

    /// Per-cell table: axis value, seed, acc, f1, em, steps, status.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{},seed,acc,f1,em,steps,status\n", self.axis.column());
        for row in &self.rows {
            for c in &row.cells {
                match &c.outcome {
                    Ok(r) => out.push_str(&format!(
                        "{},{},{},{},{},{},ok\n",
                        row.value, c.seed, r.acc, r.token_f1, r.em, c.steps
                    )),
                    Err(_) => {
                        out.push_str(&format!("{},{},,,,{},failed\n", row.value, c.seed, c.steps))
                    }
                }
            }
        }
        out
    }

    /// Median table: one row per axis value.
    pub fn median_csv(&self) -> String {
        let mut out = format!(
            "{},acc,bleu1,rouge_l,em,token_f1,consistency,gw_mean,gf_mean,ok_cells\n",
            self.axis.column()
        );
        for row in &self.rows {
            let ok = row.cells.iter().filter(|c| c.outcome.is_ok()).count();
            match &row.median {
                Some(m) => out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{ok}\n",
                    row.value,
                    m.acc,
                    m.bleu1,
                    m.rouge_l,
                    m.em,
                    m.token_f1,
                    fmt_opt(m.consistency),
                    fmt_opt(m.gw_mean),
                    fmt_opt(m.gf_mean)
                )),
                None => out.push_str(&format!("{},,,,,,,,,0\n", row.value)),
            }
        }
        out
    }
}

/// Median of a non-empty list (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

fn median_opt(values: Vec<Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    (!present.is_empty()).then(|| median(&present))
}

/// Takes the median of every metric independently.
pub fn median_report(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let col = |f: fn(&MetricReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    Some(MetricReport {
        instances: reports[0].instances,
        acc: col(|r| r.acc),
        bleu1: col(|r| r.bleu1),
        rouge_l: col(|r| r.rouge_l),
        em: col(|r| r.em),
        token_f1: col(|r| r.token_f1),
        consistency: median_opt(reports.iter().map(|r| r.consistency).collect()),
        gw_mean: median_opt(reports.iter().map(|r| r.gw_mean).collect()),
        gf_mean: median_opt(reports.iter().map(|r| r.gf_mean).collect()),
    })
}

struct CellJob {
    row: usize,
    value: String,
    model: ModelConfig,
    train: TrainConfig,
}

fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: Vec<(String, ModelConfig)>,
) -> Result<SweepResult> {
    if values.len() < 2 {
        return Err(Error::Config(
            "a sweep needs at least two axis values".into(),
        ));
    }
    ensure_distinct(
        axis.column(),
        &values.iter().map(|(v, _)| v.clone()).collect::<Vec<_>>(),
    )?;
    cfg.validate()?;
    for (_, model) in &values {
        model.validate()?;
        cfg.task.validate(model.vocab_size)?;
    }
    let dir = &cfg.out_dir;
    let cells_dir = dir.join(format!("{}-cells", axis.file()));
    create_dir(&cells_dir)?;
    let snapshot = dir.join("config.toml");
    fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;

    let jobs: Vec<CellJob> = values
        .iter()
        .enumerate()
        .flat_map(|(row, (value, model))| {
            cfg.seeds.iter().map(move |&seed| {
                let (_, train) = cfg.cell(seed);
                CellJob {
                    row,
                    value: value.clone(),
                    model: model.clone(),
                    train,
                }
            })
        })
        .collect();

    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(job) = jobs.get(i) else { break };
        let stem = format!("{}-seed{}", job.value, job.train.seed);
        let outcome = run_one(
            &job.model,
            &cfg.task,
            &job.train,
            &cells_dir.join(format!("{stem}.jsonl")),
            &cells_dir.join(format!("{stem}.ckpt.txt")),
        );
        let cell = match outcome {
            Ok(o) => SweepCell {
                seed: job.train.seed,
                steps: o.records.last().map_or(0, |r| r.step),
                outcome: Ok(o.report),
            },
            Err(e) => SweepCell {
                seed: job.train.seed,
                steps: 0,
                outcome: Err(e.to_string()),
            },
        };
        results.lock().expect("sweep result lock")[i] = Some(cell);
    };
    let workers = cfg.workers.min(jobs.len()).max(1);
    std::thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(work);
        }
        work();
    });

    let cells = results.into_inner().expect("sweep result lock");
    let mut rows: Vec<SweepRow> = values
        .iter()
        .map(|(v, _)| SweepRow {
            value: v.clone(),
            cells: Vec::new(),
            median: None,
        })
        .collect();
    for (job, cell) in jobs.iter().zip(cells) {
        rows[job.row]
            .cells
            .push(cell.expect("every sweep cell ran"));
        debug_assert_eq!(rows[job.row].value, job.value);
    }
    for row in &mut rows {
        let ok: Vec<MetricReport> = row
            .cells
            .iter()
            .filter_map(|c| c.outcome.clone().ok())
            .collect();
        row.median = median_report(&ok);
    }
    let result = SweepResult { axis, rows };
    for (name, body) in [
        (format!("{}.csv", axis.file()), result.to_csv()),
        (format!("{}_median.csv", axis.file()), result.median_csv()),
    ] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(result)
}

/// Trains one model per (slot count, seed). Failed cells are reported in
/// the table rather than aborting the sweep.
pub fn capacity_sweep(cfg: &ExperimentConfig, capacities: &[usize]) -> Result<SweepResult> {
    let values = capacities
        .iter()
        .map(|&n| {
            (
                n.to_string(),
                ModelConfig {
                    slots: n,
                    ..cfg.model.clone()
                },
            )
        })
        .collect();
    sweep(cfg, SweepAxis::Capacity, values)
}

/// Trains one model per (variant, seed).
pub fn ablation_sweep(cfg: &ExperimentConfig, variants: &[Variant]) -> Result<SweepResult> {
    let values = variants
        .iter()
        .map(|&v| {
            (
                v.name().to_string(),
                ModelConfig {
                    variant: v,
                    ..cfg.model.clone()
                },
            )
        })
        .collect();
    sweep(cfg, SweepAxis::Variant, values)
}

/// Width of the centred moving average used for loss curves.
pub const CURVE_WINDOW: usize = 51;

/// Centred moving average; near the ends the window shrinks to the
/// available neighbours.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = Vec::with_capacity(values.len() + 1);
    prefix.push(0.0);
    for v in values {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// `(step, smoothed, raw, gw_mean, gf_mean)` rows for plotting.
pub fn emit_curves(records: &[RunRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Contract("no run records to plot".into()));
    }
    let raw: Vec<f64> = records.iter().map(|r| r.loss.total).collect();
    let smoothed = smooth(&raw, CURVE_WINDOW);
    let mut out = String::from("step,smoothed,raw,gw_mean,gf_mean\n");
    for ((r, s), x) in records.iter().zip(&smoothed).zip(&raw) {
        out.push_str(&format!(
            "{},{s},{x},{},{}\n",
            r.step,
            fmt_opt(r.gw_mean),
            fmt_opt(r.gf_mean)
        ));
    }
    Ok(out)
}

/// Reads a JSON-lines record file.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Largest relative finite-difference error found in one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &BlockCheck> {
        self.blocks
            .iter()
            .filter(|b| !(b.max_rel_error < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// Tolerance on the relative finite-difference error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Tiny model shape used by the gradient checks.
pub fn gradcheck_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 6,
        embed_dim: 4,
        hidden_dim: 4,
        slots: 3,
        slot_dim: 4,
        variant,
        // Distinct slots, so read and write addressing carry real gradient.
        memory_sigma: 0.5,
        ..ModelConfig::default()
    }
}

/// Finite-difference check of the full joint loss against every parameter
/// block of a freshly initialised model. A random two-sequence batch of
/// three tokens is answered at every position; both penalty weights are
/// 0.5 so the gate terms carry real weight.
pub fn model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    fault: Option<Fault>,
) -> Result<Vec<BlockCheck>> {
    let mut model = Model::new(config.clone(), seed)?;
    // Spread the weights a little so no block sits in a flat region.
    let mut rng = substream(seed, "gradcheck");
    for t in model.params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    let v = config.vocab_size;
    let seq =
        |rng: &mut crate::rng::Rng| (0..3).map(|_| rng.random_range(0..v)).collect::<Vec<_>>();
    let batch = Batch {
        inputs: vec![seq(&mut rng), seq(&mut rng)],
        targets: vec![seq(&mut rng), seq(&mut rng)],
        masks: vec![vec![true; 3]; 2],
        fact_ids: vec![None, None],
    };
    let (l1, l2) = (0.5, 0.5);

    let tape = fault.map_or_else(Tape::new, Tape::with_fault);
    let bound = model.bind(&tape);
    let obj = objective(&model, &tape, &bound, &batch, l1, l2)?;
    let grads = tape.backward(obj.total)?;
    let analytic: Vec<Tensor> = bound.leaves.iter().map(|l| grads.wrt(*l)).collect();
    drop(bound);

    let loss_at = |params: &crate::model::ModelParams| -> Result<f64> {
        let tape = Tape::new();
        let bound = model.bind_with(&tape, params);
        Ok(objective(&model, &tape, &bound, &batch, l1, l2)?
            .total
            .item())
    };
    let mut params = model.params.clone();
    let mut out = Vec::new();
    for (b, name) in model.params.names().iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..params.tensors()[b].numel() {
            let orig = params.tensors()[b].data()[i];
            params.tensors_mut()[b].data_mut()[i] = orig + GRADCHECK_EPS;
            let plus = loss_at(&params)?;
            params.tensors_mut()[b].data_mut()[i] = orig - GRADCHECK_EPS;
            let minus = loss_at(&params)?;
            params.tensors_mut()[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            worst = worst.max(relative_error(analytic[b].data()[i], numeric));
        }
        out.push(BlockCheck {
            name: name.clone(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

type OpCase = (&'static str, Vec<usize>, fn(Var<'_>) -> Result<Var<'_>>);

/// Each differentiable tape operation wrapped as a scalar function of one
/// input, so it can be checked in isolation.
fn op_cases() -> Vec<OpCase> {
    fn mix<'t>(x: Var<'t>) -> Var<'t> {
        // A fixed non-constant weighting so the sum of outputs is not
        // invariant to the operation under test.
        let tape = x.tape();
        let n = x.shape().iter().product::<usize>();
        let w: Vec<f64> = (0..n)
            .map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4)
            .collect();
        let w = tape.leaf(Tensor::new(x.shape(), w).expect("weight shape"));
        x.mul(w).expect("same shape").sum()
    }
    vec![
        ("op/matmul", vec![3, 4], |x| {
            let b = x.tape().leaf(Tensor::new(
                vec![4, 2],
                (0..8).map(|i| i as f64 / 8.0 - 0.3).collect(),
            )?);
            Ok(mix(x.matmul(b)?))
        }),
        ("op/matmul_rhs", vec![4, 2], |x| {
            let a = x.tape().leaf(Tensor::new(
                vec![3, 4],
                (0..12).map(|i| i as f64 / 10.0 - 0.5).collect(),
            )?);
            Ok(mix(a.matmul(x)?))
        }),
        ("op/add_sub_mul", vec![2, 3], |x| {
            Ok(mix(x.add(x)?.mul(x)?.sub(x.scale(0.3))?))
        }),
        ("op/add_row", vec![1, 3], |x| {
            let a = x.tape().leaf(Tensor::new(
                vec![2, 3],
                vec![0.1, -0.2, 0.3, 0.5, 0.0, -0.4],
            )?);
            Ok(mix(a.mul(a)?.add_row(x)?.tanh()))
        }),
        ("op/mul_col", vec![2, 1], |x| {
            let a = x.tape().leaf(Tensor::new(
                vec![2, 3],
                vec![0.1, -0.2, 0.3, 0.5, 0.7, -0.4],
            )?);
            Ok(mix(a.mul_col(x)?))
        }),
        ("op/affine", vec![2, 2], |x| {
            Ok(mix(x.affine(-2.0, 0.5).one_minus()))
        }),
        ("op/sigmoid", vec![2, 3], |x| Ok(mix(x.sigmoid()))),
        ("op/tanh", vec![2, 3], |x| Ok(mix(x.tanh()))),
        ("op/exp", vec![2, 3], |x| Ok(mix(x.exp()))),
        ("op/softmax", vec![2, 4], |x| Ok(mix(x.softmax()?))),
        ("op/concat_slice", vec![2, 3], |x| {
            Ok(mix(x.concat_cols(x.tanh())?.slice_cols(1, 4)?))
        }),
        ("op/mean", vec![3, 2], |x| Ok(x.mul(x)?.mean())),
        ("op/gather_rows", vec![4, 2], |x| {
            Ok(mix(x.gather_rows(&[2, 0, 2])?))
        }),
        ("op/cross_entropy", vec![2, 4], |x| {
            x.cross_entropy(&[1, 3], &[0.7, 0.3])
        }),
        ("op/slot_scores", vec![2, 3, 2], |x| {
            let q = x
                .tape()
                .leaf(Tensor::new(vec![2, 2], vec![0.3, -0.6, 0.9, 0.2])?);
            Ok(mix(x.slot_scores(q)?))
        }),
        ("op/slot_read", vec![2, 3, 2], |x| {
            let w = x
                .tape()
                .leaf(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3])?);
            Ok(mix(w.slot_read(x)?))
        }),
        ("op/slot_update", vec![2, 3, 2], |x| {
            let t = x.tape();
            let f = t.leaf(Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 0.6, 0.1, 0.3])?);
            let w = t.leaf(Tensor::new(vec![2, 3], vec![0.4, 0.1, 0.9, 0.0, 0.7, 0.2])?);
            let c = t.leaf(Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.25, 0.75])?);
            Ok(mix(x.slot_update(f, w, c)?.tanh()))
        }),
        ("op/slot_update_gates", vec![2, 3], |x| {
            let t = x.tape();
            let m = t.leaf(Tensor::new(
                vec![2, 3, 2],
                (0..12).map(|i| i as f64 / 6.0 - 1.0).collect(),
            )?);
            let c = t.leaf(Tensor::new(vec![2, 2], vec![0.5, -0.5, 0.25, 0.75])?);
            let g = x.sigmoid();
            Ok(mix(m.slot_update(g, g.one_minus(), c)?))
        }),
        ("op/stack_slots", vec![2, 2], |x| {
            Ok(mix(Var::stack_slots(&[x, x.tanh(), x])?))
        }),
        ("op/repeat_batch", vec![3, 2], |x| {
            Ok(mix(x.repeat_batch(2)?.tanh()))
        }),
    ]
}

/// Runs the operation checks and the full-model checks for every variant.
/// Block names are `op/<name>` and `<variant>/<parameter>`.
pub fn gradcheck_suite(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut blocks = Vec::new();
    let mut rng = substream(seed, "gradcheck/ops");
    for (name, shape, f) in op_cases() {
        let n: usize = shape.iter().product();
        let point = Tensor::new(
            shape.clone(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let err = crate::tensor::gradient_check_with_fault(f, &point, GRADCHECK_EPS, fault)?;
        blocks.push(BlockCheck {
            name: name.to_string(),
            max_rel_error: err,
        });
    }
    for variant in Variant::ALL {
        for b in model_gradcheck(&gradcheck_config(variant), seed, fault)? {
            blocks.push(BlockCheck {
                name: format!("{}/{}", variant.name(), b.name),
                max_rel_error: b.max_rel_error,
            });
        }
    }
    Ok(GradcheckReport {
        tolerance: GRADCHECK_TOLERANCE,
        blocks,
    })
}
