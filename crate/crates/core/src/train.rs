//! Joint objective, optimizers and the training loop.
//!
//! The objective is `L = L_task + λ1·L_write + λ2·L_forget`, where the task
//! term is the mean cross-entropy over answer positions and the penalties
//! are the mean write and forget gate activations over a sequence.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{Model, ModelConfig, ModelParams, StepTrace};
use crate::rng::substream;
use crate::tasks::{TaskConfig, TaskInstance};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer `{other}` (expected sgd or adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the write-gate penalty.
    pub lambda_write: f64,
    /// Weight of the forget-gate penalty.
    pub lambda_forget: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Global gradient-norm threshold.
    pub clip_norm: f64,
    pub seed: u64,
    /// Evaluate every this many steps (and always after the last step).
    pub eval_interval: usize,
    /// Number of held-out instances per evaluation.
    pub eval_size: usize,
    /// Stop as soon as an evaluation reaches this accuracy.
    pub stop_at_accuracy: Option<f64>,
    /// Reuse the first batch at every step.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_write: 0.01,
            lambda_forget: 0.01,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_steps: 2000,
            batch_size: 16,
            clip_norm: 1.0,
            seed: 0,
            eval_interval: 500,
            eval_size: 128,
            stop_at_accuracy: None,
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda_write >= 0.0) || !(self.lambda_forget >= 0.0) {
            return bad(format!(
                "penalty weights must be non-negative (lambda_write = {}, lambda_forget = {})",
                self.lambda_write, self.lambda_forget
            ));
        }
        // lr = 0 is allowed: it freezes the parameters, which tests rely on.
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!(
                "lr must be a finite non-negative number, got {}",
                self.lr
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "beta1 and beta2 must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_size == 0 {
            return bad("batch_size, eval_interval and eval_size must be at least 1".into());
        }
        if let Some(a) = self.stop_at_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("stop_at_accuracy must lie in [0, 1], got {a}"));
            }
        }
        Ok(())
    }
}

/// Scalar parts of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "loss")]
    pub total: f64,
    pub task: f64,
    pub write: f64,
    pub forget: f64,
}

/// Combines already-computed loss terms.
pub fn joint_loss(
    task: f64,
    write: f64,
    forget: f64,
    lambda_write: f64,
    lambda_forget: f64,
) -> Result<LossBreakdown> {
    if !(lambda_write >= 0.0) || !(lambda_forget >= 0.0) {
        return Err(Error::Config(format!(
            "penalty weights must be non-negative, got {lambda_write} and {lambda_forget}"
        )));
    }
    Ok(LossBreakdown {
        total: task + lambda_write * write + lambda_forget * forget,
        task,
        write,
        forget,
    })
}

/// Mean cross-entropy over masked positions. `logits[t]` is the `[B, V]`
/// output at position `t`; it may be `None` where no sequence is masked.
pub fn task_loss<'t>(
    logits: &[Option<Var<'t>>],
    targets: &[Vec<usize>],
    masks: &[Vec<bool>],
) -> Result<Var<'t>> {
    if targets.len() != masks.len() {
        return Err(Error::dim(
            "task_loss",
            format!(
                "{} target rows for {} mask rows",
                targets.len(),
                masks.len()
            ),
        ));
    }
    for (b, (t, m)) in targets.iter().zip(masks).enumerate() {
        if t.len() != logits.len() || m.len() != logits.len() {
            return Err(Error::dim(
                "task_loss",
                format!(
                    "sequence {b} has {} targets and {} mask entries for {} positions",
                    t.len(),
                    m.len(),
                    logits.len()
                ),
            ));
        }
    }
    let count = masks.iter().flatten().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::Contract("loss mask selects no positions".into()));
    }
    let scale = 1.0 / count as f64;
    let mut terms = Vec::new();
    for (t, l) in logits.iter().enumerate() {
        if !masks.iter().any(|m| m[t]) {
            continue;
        }
        let l = l.ok_or_else(|| Error::Contract(format!("no logits at masked position {t}")))?;
        let column: Vec<usize> = targets.iter().map(|seq| seq[t]).collect();
        let weights: Vec<f64> = masks
            .iter()
            .map(|m| if m[t] { scale } else { 0.0 })
            .collect();
        terms.push(l.cross_entropy(&column, &weights)?);
    }
    Var::sum_all(&terms)
}

fn gate_mean<'t>(
    traces: &[StepTrace<'t>],
    pick: impl Fn(&StepTrace<'t>) -> Option<Var<'t>>,
    what: &str,
) -> Result<Var<'t>> {
    if traces.is_empty() {
        return Err(Error::Contract(format!(
            "{what} penalty needs at least one step"
        )));
    }
    let means = traces
        .iter()
        .map(|tr| pick(tr).map(Var::mean))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Contract(format!("variant has no {what} gate")))?;
    Ok(Var::sum_all(&means)?.scale(1.0 / traces.len() as f64))
}

/// Mean write-gate activation over steps and sequences.
pub fn write_penalty<'t>(traces: &[StepTrace<'t>]) -> Result<Var<'t>> {
    gate_mean(traces, |t| t.write_gate, "write")
}

/// Mean forget-gate activation over steps and sequences.
pub fn forget_penalty<'t>(traces: &[StepTrace<'t>]) -> Result<Var<'t>> {
    gate_mean(traces, |t| t.forget_gate, "forget")
}

/// Equal-length sequences stacked for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
    pub fact_ids: Vec<Option<Vec<usize>>>,
}

impl Batch {
    pub fn new(instances: &[TaskInstance]) -> Result<Self> {
        let len = instances
            .first()
            .ok_or_else(|| Error::Contract("batch needs at least one instance".into()))?
            .len();
        if instances.iter().any(|i| i.len() != len) {
            return Err(Error::Contract(
                "instances in a batch must share one length; use fixed task parameters".into(),
            ));
        }
        Ok(Self {
            inputs: instances.iter().map(|i| i.input.clone()).collect(),
            targets: instances.iter().map(|i| i.target.clone()).collect(),
            masks: instances.iter().map(|i| i.mask.clone()).collect(),
            fact_ids: instances.iter().map(|i| i.meta.fact_ids.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn answer_at(&self, t: usize) -> bool {
        self.masks.iter().any(|m| m[t])
    }
}

/// Forward pass of the full objective on one batch.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub gw_mean: Option<f64>,
    pub gf_mean: Option<f64>,
}

/// Builds the joint loss for `batch` on `tape` using `leaves`-bound params.
pub fn objective<'t>(
    model: &Model,
    tape: &'t Tape,
    bound: &crate::model::Bound<'t>,
    batch: &Batch,
    lambda_write: f64,
    lambda_forget: f64,
) -> Result<Objective<'t>> {
    let out = model.run_sequence(tape, bound, &batch.inputs, |t| batch.answer_at(t))?;
    let task = task_loss(&out.logits, &batch.targets, &batch.masks)?;
    let gated = model.config.variant.has_gates();
    let (write, forget) = if gated {
        (
            Some(write_penalty(&out.traces)?),
            Some(forget_penalty(&out.traces)?),
        )
    } else {
        (None, None)
    };
    let breakdown = joint_loss(
        task.item(),
        write.map_or(0.0, Var::item),
        forget.map_or(0.0, Var::item),
        lambda_write,
        lambda_forget,
    )?;
    let mut total = task;
    if let Some(w) = write {
        total = total.add(w.scale(lambda_write))?;
    }
    if let Some(f) = forget {
        total = total.add(f.scale(lambda_forget))?;
    }
    Ok(Objective {
        total,
        breakdown,
        gw_mean: write.map(Var::item),
        gf_mean: forget.map(Var::item),
    })
}

/// Moment estimates carried between Adam steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Applies one update in place. Gradients are checked for non-finite
/// values, then rescaled so their global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &mut [Tensor],
    cfg: &TrainConfig,
    state: &mut OptimizerState,
) -> Result<f64> {
    if grads.len() != params.len() {
        return Err(Error::dim(
            "optimizer_step",
            format!(
                "{} gradients for {} parameter blocks",
                grads.len(),
                params.len()
            ),
        ));
    }
    for (name, (p, g)) in params
        .names()
        .iter()
        .zip(params.tensors().iter().zip(grads.iter()))
    {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "optimizer_step",
                format!(
                    "gradient {:?} for `{name}` of shape {:?}",
                    g.shape(),
                    p.shape()
                ),
            ));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step: state.steps as usize + 1,
            });
        }
    }
    let norm = global_norm(grads);
    if norm > cfg.clip_norm {
        let k = cfg.clip_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    state.steps += 1;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().iter_mut().zip(grads.iter()) {
                for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= cfg.lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
                state.v = state.m.clone();
            }
            let t = state.steps as i32;
            let c1 = 1.0 - cfg.beta1.powi(t);
            let c2 = 1.0 - cfg.beta2.powi(t);
            let blocks = params
                .tensors_mut()
                .iter_mut()
                .zip(grads.iter())
                .zip(state.m.iter_mut().zip(state.v.iter_mut()));
            for ((p, g), (m, v)) in blocks {
                let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(norm)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub gw_mean: Option<f64>,
    pub gf_mean: Option<f64>,
    pub acc: Option<f64>,
    /// Milliseconds since training started.
    pub ms: u64,
}

impl RunRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &RunRecord) -> bool {
        let strip = |r: &RunRecord| RunRecord { ms: 0, ..r.clone() };
        strip(self) == strip(other)
    }
}

/// Greedy argmax with ties going to the lowest id.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Largest number of evaluation sequences pushed through one tape.
const EVAL_CHUNK: usize = 32;

/// Scores `model` on `instances` with greedy decoding. Inputs are fed as
/// given and nothing is differentiated.
pub fn evaluate(model: &Model, instances: &[TaskInstance]) -> Result<MetricReport> {
    if instances.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let mut acc = MetricAccumulator::default();
    let (mut gw, mut gf, mut gate_steps) = (0.0, 0.0, 0usize);
    for chunk in instances.chunks(EVAL_CHUNK) {
        let batch = Batch::new(chunk)?;
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let out = model.run_sequence(&tape, &bound, &batch.inputs, |t| batch.answer_at(t))?;
        for tr in &out.traces {
            if let (Some(w), Some(f)) = (tr.write_gate, tr.forget_gate) {
                gw += w.value().data().iter().sum::<f64>();
                gf += f.value().data().iter().sum::<f64>();
                gate_steps += w.value().numel();
            }
        }
        let logits: Vec<Option<Tensor>> = out.logits.iter().map(|l| l.map(Var::value)).collect();
        for b in 0..batch.len() {
            let mut predicted = Vec::new();
            let mut gold = Vec::new();
            for (t, l) in logits.iter().enumerate() {
                if batch.masks[b][t] {
                    let l = l.as_ref().expect("logits requested at masked positions");
                    predicted.push(argmax(l.row(b)));
                    gold.push(batch.targets[b][t]);
                }
            }
            match &batch.fact_ids[b] {
                Some(ids) => acc.add_episode(&predicted, &gold, ids)?,
                None => acc.add(&predicted, &gold)?,
            }
        }
    }
    let mut report = acc.finish();
    if gate_steps > 0 {
        report.gw_mean = Some(gw / gate_steps as f64);
        report.gf_mean = Some(gf / gate_steps as f64);
    }
    Ok(report)
}

/// Held-out instances drawn from the `eval` substream of `seed`.
pub fn eval_set(
    task: &TaskConfig,
    vocab: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<TaskInstance>> {
    let mut rng = substream(seed, "eval");
    (0..size)
        .map(|_| task.generate(rng.next_u64(), vocab))
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub records: Vec<RunRecord>,
    /// Evaluation after the last step.
    pub report: MetricReport,
}

fn emit(sink: &mut Option<&mut dyn Write>, record: &RunRecord) -> Result<()> {
    if let Some(w) = sink {
        let line = serde_json::to_string(record)?;
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io("<record sink>", e))?;
    }
    Ok(())
}

/// Trains a freshly initialised model. Every record is written to `sink`
/// (one JSON object per line, flushed immediately) as it is produced.
pub fn train(
    model_cfg: &ModelConfig,
    task: &TaskConfig,
    cfg: &TrainConfig,
    sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    train_from(model, task, cfg, sink)
}

/// Like [`train`] but continues from the given parameters.
pub fn train_from(
    mut model: Model,
    task: &TaskConfig,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let vocab = model.config.vocab_size;
    task.validate(vocab)?;
    let evals = eval_set(task, vocab, cfg.seed, cfg.eval_size)?;
    let mut data = substream(cfg.seed, "data");
    let draw = |rng: &mut crate::rng::Rng| -> Result<Batch> {
        let instances = (0..cfg.batch_size)
            .map(|_| task.generate(rng.next_u64(), vocab))
            .collect::<Result<Vec<_>>>()?;
        Batch::new(&instances)
    };
    let fixed = if cfg.fixed_batch {
        Some(draw(&mut data)?)
    } else {
        None
    };

    let start = Instant::now();
    let mut state = OptimizerState::default();
    let mut records = Vec::with_capacity(cfg.max_steps);
    let mut report = None;
    for step in 1..=cfg.max_steps {
        let owned;
        let batch = match &fixed {
            Some(b) => b,
            None => {
                owned = draw(&mut data)?;
                &owned
            }
        };
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let obj = objective(
            &model,
            &tape,
            &bound,
            batch,
            cfg.lambda_write,
            cfg.lambda_forget,
        )?;
        let mut record = RunRecord {
            step,
            loss: obj.breakdown,
            gw_mean: obj.gw_mean,
            gf_mean: obj.gf_mean,
            acc: None,
            ms: 0,
        };
        if !obj.breakdown.total.is_finite() {
            record.ms = start.elapsed().as_millis() as u64;
            emit(&mut sink, &record)?;
            return Err(Error::Diverged {
                step,
                loss: obj.breakdown.total,
            });
        }
        let grads = tape.backward(obj.total)?;
        let mut grads: Vec<Tensor> = bound.leaves.iter().map(|l| grads.wrt(*l)).collect();
        drop(bound);
        drop(tape);
        optimizer_step(&mut model.params, &mut grads, cfg, &mut state).map_err(|e| match e {
            Error::NonFiniteGradient { param, .. } => Error::NonFiniteGradient { param, step },
            other => other,
        })?;

        let last = step == cfg.max_steps;
        let mut stop = false;
        if step % cfg.eval_interval == 0 || last {
            let r = evaluate(&model, &evals)?;
            record.acc = Some(r.acc);
            stop = cfg.stop_at_accuracy.is_some_and(|target| r.acc >= target);
            report = Some(r);
        }
        record.ms = start.elapsed().as_millis() as u64;
        emit(&mut sink, &record)?;
        records.push(record);
        if stop {
            break;
        }
    }
    let report = match report {
        Some(r) => r,
        None => evaluate(&model, &evals)?,
    };
    Ok(TrainOutcome {
        model,
        records,
        report,
    })
}
