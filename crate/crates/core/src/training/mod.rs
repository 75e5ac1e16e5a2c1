//! STL / MTL / TL training, evaluation and the end-to-end gradient check.

mod augment;
mod gradcheck;
mod log;
mod loss;
mod schedule;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use augment::{apply_pipeline, augment, sample_pipeline, AugmentConfig, Transform};
pub use gradcheck::{gradient_check, GradcheckConfig, GradcheckReport};
pub use log::{BatchRow, MetricLog, MetricRow};
pub use loss::{compute_loss, loss_graph, BatchLoss, LossParts, RuleGroup};
pub use schedule::{EarlyStopping, PlateauScheduler, StopDecision};

use crate::avr::{ProblemInstance, TaskKind, TaskStructure};
use crate::error::{Error, Result};
use crate::model::{argmax, stack_instances, ScarModel};
use crate::tensor::{Adam, AdamConfig, Graph, Scalar, Tensor};

/// How MTL batches pick their task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskSampling {
    Uniform,
    /// Proportional to training-set size.
    Proportional,
}

impl FromStr for TaskSampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TaskSampling::Uniform),
            "proportional" => Ok(TaskSampling::Proportional),
            other => Err(Error::invalid(format!("unknown task sampling `{other}`"))),
        }
    }
}

/// Optimisation and protocol settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    /// Weight of the auxiliary rule loss.
    pub beta: f64,
    /// Groups whose rule logits feed the auxiliary loss.
    pub rule_group: RuleGroup,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Minimum validation-loss decrease that counts as an improvement.
    pub min_delta: f64,
    pub batch_small: usize,
    pub batch_large: usize,
    /// Training sets at least this large use `batch_large`.
    pub large_dataset: usize,
    /// Overrides the small/large rule when set.
    pub batch_size: Option<usize>,
    pub augment: AugmentConfig,
    pub max_epochs: usize,
    /// Epoch cap of the fine-tuning phase; `max_epochs` when unset.
    pub finetune_max_epochs: Option<usize>,
    pub seed: u64,
    /// Records zero wall time so logs are bit-reproducible.
    pub deterministic: bool,
    pub task_sampling: TaskSampling,
    /// Validation share when a single file is split.
    pub val_fraction: f64,
    /// Stops a phase after the epoch that crosses this many seconds.
    pub time_limit_secs: Option<f64>,
    /// Also log one row per optimisation step.
    pub log_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta: 10.0,
            rule_group: RuleGroup::Label,
            plateau_factor: 0.1,
            plateau_patience: 5,
            early_stop_patience: 17,
            min_delta: 1e-4,
            batch_small: 32,
            batch_large: 128,
            large_dataset: 20_000,
            batch_size: None,
            augment: AugmentConfig::default(),
            max_epochs: 100,
            finetune_max_epochs: None,
            seed: 0,
            deterministic: false,
            task_sampling: TaskSampling::Uniform,
            val_fraction: 0.1,
            time_limit_secs: None,
            log_batches: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau factor must lie in (0, 1]"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("patience values must be positive"));
        }
        if self.batch_small == 0 || self.batch_large == 0 || self.batch_size == Some(0) {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if self.max_epochs == 0 || self.finetune_max_epochs == Some(0) {
            return Err(Error::invalid("max_epochs must be positive"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::invalid("min_delta must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must lie in [0, 1)"));
        }
        self.augment.validate()
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "min_delta" => self.min_delta = parse(key, value)?,
            "batch_small" => self.batch_small = parse(key, value)?,
            "batch_large" => self.batch_large = parse(key, value)?,
            "large_dataset" => self.large_dataset = parse(key, value)?,
            "batch_size" => self.batch_size = Some(parse(key, value)?),
            "augment_probability" => self.augment.probability = parse(key, value)?,
            "transform_probability" => self.augment.transform_probability = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "finetune_max_epochs" => self.finetune_max_epochs = Some(parse(key, value)?),
            "seed" => self.seed = parse(key, value)?,
            "task_sampling" => self.task_sampling = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "time_limit_secs" => self.time_limit_secs = Some(parse(key, value)?),
            "rule_group" => self.rule_group = parse(key, value)?,
            "log_batches" => self.log_batches = parse(key, value)?,
            other => return Err(Error::invalid(format!("unknown training key `{other}`"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn apply_overrides(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    /// Batch size for a phase over `train_sizes`.
    pub fn batch_size_for(&self, train_sizes: &[usize]) -> usize {
        if let Some(b) = self.batch_size {
            return b;
        }
        let total: usize = train_sizes.iter().sum();
        if train_sizes.len() > 1 || total >= self.large_dataset {
            self.batch_large
        } else {
            self.batch_small
        }
    }
}

/// Training and validation instances of one task.
#[derive(Clone, Debug)]
pub struct TaskData<T> {
    pub structure: TaskStructure,
    pub train: Vec<ProblemInstance<T>>,
    pub val: Vec<ProblemInstance<T>>,
}

impl<T: Scalar> TaskData<T> {
    pub fn kind(&self) -> TaskKind {
        self.structure.kind
    }

    /// Splits `instances` by a seeded shuffle; the validation part gets
    /// `round(n · val_fraction)` instances, at least one.
    pub fn split(structure: TaskStructure, mut instances: Vec<ProblemInstance<T>>, val_fraction: f64, seed: u64) -> Result<Self> {
        if instances.len() < 2 {
            return Err(Error::invalid(format!(
                "{} dataset needs at least 2 instances to split, has {}",
                structure.kind,
                instances.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        instances.shuffle(&mut rng);
        let n_val = ((instances.len() as f64 * val_fraction).round() as usize).clamp(1, instances.len() - 1);
        let val = instances.split_off(instances.len() - n_val);
        Ok(Self {
            structure,
            train: instances,
            val,
        })
    }

    fn rule_len(&self) -> Option<usize> {
        self.train.first().and_then(|i| i.rules.as_ref()).map(Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::invalid(format!(
                "{} dataset has an empty split (train {}, val {})",
                self.kind(),
                self.train.len(),
                self.val.len()
            )));
        }
        let len = self.rule_len();
        for inst in self.train.iter().chain(&self.val) {
            inst.validate(&self.structure)?;
            if inst.rules.as_ref().map(Vec::len) != len {
                return Err(Error::invalid(format!(
                    "{} instances disagree on rule annotations",
                    self.kind()
                )));
            }
        }
        Ok(())
    }
}

/// One batch drawn by [`TaskBatcher`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub task: usize,
    pub indices: Vec<usize>,
}

/// Shuffled batches over several tasks; every batch comes from one task.
#[derive(Clone, Debug)]
pub struct TaskBatcher {
    sizes: Vec<usize>,
    batch_size: usize,
    sampling: TaskSampling,
    order: Vec<Vec<usize>>,
    cursor: Vec<usize>,
    rng: ChaCha8Rng,
}

impl TaskBatcher {
    pub fn new(sizes: Vec<usize>, batch_size: usize, sampling: TaskSampling, rng: ChaCha8Rng) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) || batch_size == 0 {
            return Err(Error::invalid("batcher needs non-empty tasks and a positive batch size"));
        }
        let order = sizes.iter().map(|&n| (0..n).collect()).collect();
        let cursor = vec![0; sizes.len()];
        Ok(Self {
            sizes,
            batch_size,
            sampling,
            order,
            cursor,
            rng,
        })
    }

    /// Batches per epoch: one pass over every task's training set.
    pub fn batches_per_epoch(&self) -> usize {
        self.sizes.iter().map(|n| n.div_ceil(self.batch_size)).sum()
    }

    /// Reshuffles every task and rewinds the cursors.
    pub fn start_epoch(&mut self) {
        for t in 0..self.sizes.len() {
            self.reshuffle(t);
        }
    }

    fn reshuffle(&mut self, t: usize) {
        self.order[t].shuffle(&mut self.rng);
        self.cursor[t] = 0;
    }

    fn pick_task(&mut self) -> usize {
        match self.sampling {
            TaskSampling::Uniform => self.rng.gen_range(0..self.sizes.len()),
            TaskSampling::Proportional => {
                let total: usize = self.sizes.iter().sum();
                let mut x = self.rng.gen_range(0..total);
                for (t, &n) in self.sizes.iter().enumerate() {
                    if x < n {
                        return t;
                    }
                    x -= n;
                }
                unreachable!("draw is below the total size")
            }
        }
    }

    pub fn next_batch(&mut self) -> Batch {
        let task = self.pick_task();
        if self.cursor[task] >= self.sizes[task] {
            self.reshuffle(task);
        }
        let start = self.cursor[task];
        let end = (start + self.batch_size).min(self.sizes[task]);
        self.cursor[task] = end;
        Batch {
            task,
            indices: self.order[task][start..end].to_vec(),
        }
    }
}

/// Loss and accuracy over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub ce: f64,
    pub aux: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Default)]
struct Accumulator {
    loss: f64,
    ce: f64,
    aux: f64,
    correct: usize,
    count: usize,
}

impl Accumulator {
    fn add(&mut self, parts: LossParts, n: usize, correct: usize) {
        self.loss += parts.total * n as f64;
        self.ce += parts.ce * n as f64;
        self.aux += parts.aux * n as f64;
        self.correct += correct;
        self.count += n;
    }

    fn finish(&self) -> EvalMetrics {
        let n = self.count.max(1) as f64;
        EvalMetrics {
            loss: self.loss / n,
            ce: self.ce / n,
            aux: self.aux / n,
            accuracy: self.correct as f64 / n,
            count: self.count,
        }
    }
}

const EVAL_BATCH: usize = 64;

/// Eval-mode loss and accuracy; no augmentation.
pub fn evaluate_metrics<T: Scalar>(
    model: &ScarModel<T>,
    instances: &[ProblemInstance<T>],
    structure: &TaskStructure,
    beta: f64,
    group: RuleGroup,
) -> Result<EvalMetrics> {
    if instances.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut acc = Accumulator::default();
    for chunk in instances.chunks(EVAL_BATCH) {
        for (inst, out) in chunk.iter().zip(model.predict(chunk, structure)?) {
            let parts = compute_loss(&out, inst.label, inst.rules.as_deref(), beta, group)?;
            acc.add(parts, 1, usize::from(out.prediction == inst.label));
        }
    }
    Ok(acc.finish())
}

/// Fraction of instances whose prediction equals the label.
pub fn evaluate<T: Scalar>(model: &ScarModel<T>, instances: &[ProblemInstance<T>], structure: &TaskStructure) -> Result<f64> {
    Ok(evaluate_metrics(model, instances, structure, 0.0, RuleGroup::Label)?.accuracy)
}

/// Summary of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_lr: f64,
    pub stopped_early: bool,
}

const STREAM_BATCHES: u64 = 10;
const STREAM_AUGMENT: u64 = 11;

/// One optimisation step; returns the batch loss parts and correct count.
fn train_step<T: Scalar>(
    model: &mut ScarModel<T>,
    adam: &mut Adam<T>,
    batch: &[ProblemInstance<T>],
    structure: &TaskStructure,
    beta: f64,
    group: RuleGroup,
) -> Result<(LossParts, usize)> {
    let panels = stack_instances(batch)?;
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let targets = match batch[0].rules.as_ref() {
        Some(r) if model.rule_head_width(structure.kind).is_some() => {
            let data: Vec<T> = batch
                .iter()
                .flat_map(|i| i.rules.iter().flatten().map(|&b| T::lit(f64::from(b))))
                .collect();
            Some(Tensor::new(vec![batch.len(), r.len()], data)?)
        }
        _ => None,
    };
    let mut g = Graph::new();
    let vars = model.forward(&mut g, &panels, structure, true)?;
    let loss = loss_graph(&mut g, model, &vars, structure.kind, &labels, targets.as_ref(), beta, group)?;
    let parts = LossParts {
        total: g.value(loss.total).item().to_f64_lossy(),
        ce: g.value(loss.ce).item().to_f64_lossy(),
        aux: loss.aux.map_or(0.0, |a| g.value(a).item().to_f64_lossy()),
    };
    let a = structure.answers;
    let scores = g.value(vars.scores).data();
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&scores[i * a..(i + 1) * a]) == l)
        .count();
    if !parts.total.is_finite() {
        return Ok((parts, correct));
    }
    let grads = g.backward(loss.total)?;
    let grads = grads.param_map(model.store());
    adam.step(model.store_mut(), &grads)?;
    model.apply_stat_updates(&mut g)?;
    Ok((parts, correct))
}

/// Trains `model` on `tasks` until early stopping or `max_epochs`, then
/// restores the best-validation weights. A fresh optimizer is used.
pub fn train_phase<T: Scalar>(
    model: &mut ScarModel<T>,
    tasks: &[TaskData<T>],
    config: &TrainConfig,
    log: &mut MetricLog,
) -> Result<PhaseReport> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("no training tasks"));
    }
    let (h, w) = (model.config().panel_h, model.config().panel_w);
    for t in tasks {
        t.validate()?;
        if t.train[0].panel_hw() != Some((h, w)) {
            return Err(Error::invalid(format!(
                "{} panels are {:?}, model expects {h}×{w}",
                t.kind(),
                t.train[0].panel_hw()
            )));
        }
        if let Some(len) = t.rule_len() {
            model.ensure_rule_head(t.kind(), len)?;
        }
    }
    if config.augment.is_enabled() && h != w {
        return Err(Error::invalid("rotation and transposition need square panels"));
    }
    let sizes: Vec<usize> = tasks.iter().map(|t| t.train.len()).collect();
    let batch_size = config.batch_size_for(&sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(STREAM_BATCHES);
    let mut batcher = TaskBatcher::new(sizes, batch_size, config.task_sampling, rng)?;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(STREAM_AUGMENT);

    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut lr = config.lr;
    let mut scheduler = PlateauScheduler::new(config.plateau_factor, config.plateau_patience, config.min_delta);
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.min_delta);
    let mut best = model.clone();
    let mut report = PhaseReport {
        epochs: 0,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        final_lr: lr,
        stopped_early: false,
    };
    let start = Instant::now();
    let wall = |start: &Instant| if config.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };

    for epoch in 1..=config.max_epochs {
        batcher.start_epoch();
        let mut train_acc: Vec<Accumulator> = tasks.iter().map(|_| Accumulator::default()).collect();
        for b in 0..batcher.batches_per_epoch() {
            let Batch { task, indices } = batcher.next_batch();
            let data = &tasks[task];
            let batch = indices
                .iter()
                .map(|&i| augment(&data.train[i], &config.augment, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let (parts, correct) = train_step(model, &mut adam, &batch, &data.structure, config.beta, config.rule_group)?;
            if !parts.total.is_finite() {
                return Err(Error::NanLoss { epoch, batch: b + 1 });
            }
            if config.log_batches {
                log.push_batch(BatchRow {
                    epoch,
                    batch: b + 1,
                    task: data.kind().name().to_owned(),
                    loss: parts.total,
                    ce: parts.ce,
                    aux: parts.aux,
                    accuracy: correct as f64 / batch.len() as f64,
                    lr,
                })?;
            }
            train_acc[task].add(parts, batch.len(), correct);
        }
        let mut val_total = 0.0;
        for (t, data) in tasks.iter().enumerate() {
            let tm = train_acc[t].finish();
            if tm.count > 0 {
                log.push(row(epoch, data.kind(), "train", &tm, lr, wall(&start)))?;
            }
            let vm = evaluate_metrics(model, &data.val, &data.structure, config.beta, config.rule_group)?;
            log.push(row(epoch, data.kind(), "val", &vm, lr, wall(&start)))?;
            val_total += vm.loss;
        }
        let val_loss = val_total / tasks.len() as f64;
        report.epochs = epoch;
        let decision = stopper.update(if val_loss.is_finite() { val_loss } else { f64::INFINITY });
        if decision.improved {
            best = model.clone();
            report.best_epoch = epoch;
            report.best_val_loss = val_loss;
        }
        lr = scheduler.step(val_loss, lr);
        adam.set_lr(lr);
        report.final_lr = lr;
        if decision.stop {
            report.stopped_early = true;
            break;
        }
        if config.time_limit_secs.is_some_and(|limit| start.elapsed().as_secs_f64() >= limit) {
            break;
        }
    }
    if report.best_epoch > 0 {
        *model = best;
    }
    Ok(report)
}

fn row(epoch: usize, task: TaskKind, split: &str, m: &EvalMetrics, lr: f64, wall_seconds: f64) -> MetricRow {
    MetricRow {
        epoch,
        task: task.name().to_owned(),
        split: split.to_owned(),
        loss: m.loss,
        ce: m.ce,
        aux: m.aux,
        accuracy: m.accuracy,
        lr,
        wall_seconds,
    }
}

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Single task.
    Stl,
    /// Multi-task pre-training, optionally followed by fine-tuning.
    Mtl,
    /// Pre-training on other tasks, then fine-tuning on an unseen target.
    Tl,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Stl => "stl",
            Regime::Mtl => "mtl",
            Regime::Tl => "tl",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stl" => Ok(Regime::Stl),
            "mtl" => Ok(Regime::Mtl),
            "tl" => Ok(Regime::Tl),
            other => Err(Error::invalid(format!("unknown regime `{other}`"))),
        }
    }
}

/// Regime with its pre-training tasks and fine-tuning target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegimeSpec {
    pub regime: Regime,
    pub pretrain: Vec<TaskKind>,
    pub target: Option<TaskKind>,
}

impl RegimeSpec {
    pub fn stl(task: TaskKind) -> Self {
        Self {
            regime: Regime::Stl,
            pretrain: vec![task],
            target: None,
        }
    }

    pub fn mtl(pretrain: Vec<TaskKind>, target: Option<TaskKind>) -> Self {
        Self {
            regime: Regime::Mtl,
            pretrain,
            target,
        }
    }

    pub fn tl(pretrain: Vec<TaskKind>, target: TaskKind) -> Self {
        Self {
            regime: Regime::Tl,
            pretrain,
            target: Some(target),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let distinct: BTreeSet<TaskKind> = self.pretrain.iter().copied().collect();
        if distinct.len() != self.pretrain.len() {
            return Err(Error::invalid("pre-training tasks must be distinct"));
        }
        match self.regime {
            Regime::Stl if self.pretrain.len() != 1 || self.target.is_some() => {
                Err(Error::invalid("stl trains exactly one task and has no fine-tuning target"))
            }
            Regime::Mtl if self.pretrain.is_empty() => Err(Error::invalid("mtl needs at least one task")),
            Regime::Tl => match self.target {
                None => Err(Error::invalid("tl needs a fine-tuning target")),
                Some(t) if distinct.contains(&t) => Err(Error::invalid(format!(
                    "tl target {t} must not appear among the pre-training tasks"
                ))),
                _ if self.pretrain.is_empty() => Err(Error::invalid("tl needs pre-training tasks")),
                _ => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// One finished phase of [`run_regime`].
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub name: String,
    pub report: PhaseReport,
    pub rows: Vec<MetricRow>,
    /// Checkpoint bytes of the model the phase ended with.
    pub checkpoint: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct RegimeOutcome<T> {
    pub model: ScarModel<T>,
    pub phases: Vec<PhaseOutcome>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pick<T>(datasets: &[TaskData<T>], kind: TaskKind) -> Result<&TaskData<T>> {
    datasets
        .iter()
        .find(|d| d.structure.kind == kind)
        .ok_or_else(|| Error::invalid(format!("no dataset for task {kind}")))
}

/// Runs every phase of `spec`. With `out_dir`, each phase writes
/// `<phase>.csv`, `<phase>.jsonl` and `<phase>.salc`; the final model is
/// also written to `model.salc`.
pub fn run_regime<T: Scalar>(
    spec: &RegimeSpec,
    datasets: &[TaskData<T>],
    config: &TrainConfig,
    model: ScarModel<T>,
    out_dir: Option<&Path>,
) -> Result<RegimeOutcome<T>> {
    spec.validate()?;
    let kinds: BTreeSet<TaskKind> = datasets.iter().map(|d| d.structure.kind).collect();
    if kinds.len() != datasets.len() {
        return Err(Error::invalid("at most one dataset per task kind"));
    }
    let mut phases: Vec<(&str, Vec<TaskData<T>>)> = Vec::new();
    let pre = spec
        .pretrain
        .iter()
        .map(|&k| pick(datasets, k).cloned())
        .collect::<Result<Vec<_>>>()?;
    let target = spec.target.map(|k| pick(datasets, k).cloned()).transpose()?;
    match spec.regime {
        Regime::Stl => phases.push(("train", pre)),
        _ => {
            phases.push(("pretrain", pre));
            if let Some(t) = target {
                phases.push(("finetune", vec![t]));
            }
        }
    }
    let mut model = model;
    let mut outcome = Vec::new();
    for (name, tasks) in phases {
        let mut log = match out_dir {
            Some(dir) => MetricLog::to_files(dir, name)?,
            None => MetricLog::in_memory(),
        };
        let phase_config = match (name, config.finetune_max_epochs) {
            ("finetune", Some(max_epochs)) => TrainConfig {
                max_epochs,
                ..config.clone()
            },
            _ => config.clone(),
        };
        let report = train_phase(&mut model, &tasks, &phase_config, &mut log)?;
        let checkpoint = model.to_checkpoint_bytes()?;
        if let Some(dir) = out_dir {
            write_file(&dir.join(format!("{name}.salc")), &checkpoint)?;
        }
        outcome.push(PhaseOutcome {
            name: name.to_owned(),
            report,
            rows: log.rows().to_vec(),
            checkpoint,
        });
    }
    if let (Some(dir), Some(last)) = (out_dir, outcome.last()) {
        write_file(&dir.join("model.salc"), &last.checkpoint)?;
    }
    Ok(RegimeOutcome { model, phases: outcome })
}
