//! Experiment orchestration.
//!
//! Base-model memorization training with a retrained-on-retain-only
//! reference, unlearning runs with KL/MA/PPL dynamics logging, strength
//! sweeps, sequential unlearning requests, forget-set scaling, and report
//! aggregation. Everything is seeded; identical configs produce identical
//! artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::aux::{task_arithmetic_merge, train_memo_model, AuxMethod, AuxSpec};
use crate::checkpoint;
use crate::corpus::{
    forget_records, generate_corpus, retain_records, split_sequential, to_batch, CorpusConfig,
    SequenceRecord,
};
use crate::error::{Error, Result};
use crate::metrics::{
    avg_kl_distance, compute_split_metrics, ma_batch, perplexity, DecodePolicy, MetricsConfig,
    MetricsReport, RunMeta,
};
use crate::model::{
    forward, LmConfig, ModelParams, OptimizerState, TapeParams, TokenBatch,
};
use crate::objectives::{
    ga_objective, npo_loss, retain_regularizer, undial_loss, DirectMethod, RetainReg,
    TeacherSnapshot, UnlearnSpec,
};
use crate::rng::Pcg32;
use crate::tensor::GradTape;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Sequences per optimizer step.
    pub batch_size: usize,
    /// Hard step budget for base training.
    pub max_steps: usize,
    /// Base training stops once forget-set MA reaches this.
    pub ma_target: f64,
    /// How often the stop rule is checked.
    pub ma_check_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            max_steps: 2000,
            ma_target: 0.95,
            ma_check_every: 20,
        }
    }
}

/// Either a direct-tuning spec or an auxiliary-model spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MethodSpec {
    Direct(UnlearnSpec),
    Aux(AuxSpec),
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Direct(s) => s.method.name(),
            MethodSpec::Aux(s) => s.method.name(),
        }
    }

    pub fn strength(&self) -> f64 {
        match self {
            MethodSpec::Direct(s) => s.strength,
            MethodSpec::Aux(s) => s.coeff,
        }
    }

    pub fn with_strength(&self, strength: f64) -> MethodSpec {
        match self {
            MethodSpec::Direct(s) => MethodSpec::Direct(UnlearnSpec {
                strength,
                ..s.clone()
            }),
            MethodSpec::Aux(s) => MethodSpec::Aux(AuxSpec {
                coeff: strength,
                ..s.clone()
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodSpec::Direct(s) => s.validate(),
            MethodSpec::Aux(s) => s.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub train: TrainParams,
    #[serde(default = "default_method_spec")]
    pub unlearn: MethodSpec,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Retain sequences used for dynamics rows (final reports use the full
    /// retain set).
    #[serde(default = "default_dynamics_retain")]
    pub dynamics_retain_subset: usize,
    /// Optional early stop for unlearning: halt once forget MA drops to this.
    #[serde(default)]
    pub stop_at_forget_ma: Option<f64>,
}

fn default_method_spec() -> MethodSpec {
    MethodSpec::Direct(UnlearnSpec::new(DirectMethod::Undial, 10.0, 200, 1e-3))
}

fn default_eval_every() -> usize {
    10
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_dynamics_retain() -> usize {
    64
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            lm: LmConfig::default(),
            corpus: CorpusConfig::default(),
            train: TrainParams::default(),
            unlearn: default_method_spec(),
            metrics: MetricsConfig::default(),
            eval_every: default_eval_every(),
            seed: 0,
            output_dir: default_output_dir(),
            dynamics_retain_subset: default_dynamics_retain(),
            stop_at_forget_ma: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.lm.validate()?;
        self.corpus.validate()?;
        self.metrics.validate()?;
        self.unlearn.validate()?;
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.corpus.vocab_size != self.lm.vocab_size {
            return Err(Error::InvalidConfig(
                "corpus vocab_size must equal lm vocab_size".into(),
            ));
        }
        if self.corpus.seq_len > self.lm.context_len {
            return Err(Error::InvalidConfig(
                "corpus seq_len exceeds lm context_len".into(),
            ));
        }
        if self.train.batch_size == 0 || self.train.ma_check_every == 0 {
            return Err(Error::InvalidConfig("train sizes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Dynamics log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub step: u64,
    pub forget_kl: f64,
    pub retain_kl: f64,
    pub forget_ma: f64,
    pub retain_ppl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsLog {
    pub rows: Vec<DynamicsRow>,
}

impl DynamicsLog {
    fn push(&mut self, row: DynamicsRow) {
        if let Some(last) = self.rows.last() {
            debug_assert!(row.step > last.step, "dynamics steps must increase");
        }
        self.rows.push(row);
    }

    /// First logged step whose forget MA is at or below the threshold.
    pub fn first_step_at_ma(&self, threshold: f64) -> Option<u64> {
        self.rows.iter().find(|r| r.forget_ma <= threshold).map(|r| r.step)
    }

    /// Row at the largest logged step <= `step`.
    pub fn row_at_or_before(&self, step: u64) -> Option<&DynamicsRow> {
        self.rows.iter().rev().find(|r| r.step <= step)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        for row in &self.rows {
            serde_json::to_writer(&mut f, row)?;
            f.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// The objective went non-finite; the step was not applied and the run
    /// stopped here. Partial logs are preserved. An expected outcome for
    /// ascent-style objectives, not a crash.
    Collapsed { at_step: u64 },
}

impl RunStatus {
    pub fn is_collapsed(&self) -> bool {
        matches!(self, RunStatus::Collapsed { .. })
    }
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct BatchSampler {
    batches: Vec<TokenBatch>,
    order: Vec<usize>,
    cursor: usize,
    rng: Pcg32,
}

impl BatchSampler {
    fn new(records: &[&SequenceRecord], batch_size: usize, seed: u64, stream: u64) -> Result<Self> {
        if records.is_empty() {
            return Error::invalid("batch sampler over an empty record set");
        }
        let mut batches = Vec::new();
        let mut at = 0;
        while at < records.len() {
            let hi = (at + batch_size).min(records.len());
            batches.push(to_batch(&records[at..hi])?);
            at = hi;
        }
        let order: Vec<usize> = (0..batches.len()).collect();
        let cursor = order.len();
        Ok(BatchSampler {
            batches,
            order,
            cursor,
            rng: Pcg32::new(seed, stream),
        })
    }

    fn next(&mut self) -> &TokenBatch {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let b = &self.batches[self.order[self.cursor]];
        self.cursor += 1;
        b
    }
}

fn seq_views<'a>(records: &[&'a SequenceRecord]) -> Vec<&'a [u32]> {
    records.iter().map(|r| r.tokens.as_slice()).collect()
}

// ---------------------------------------------------------------------------
// Base training
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct BaseOutcome {
    pub base: ModelParams,
    pub reference: Option<ModelParams>,
    pub steps_used: u64,
    pub final_forget_ma: f64,
    /// False means the MA target was not reached within the budget; the run
    /// proceeds with a warning status recorded in the metadata.
    pub reached_target: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct BaseMeta {
    pub steps_used: u64,
    pub final_forget_ma: f64,
    pub reached_target: bool,
    pub seed: u64,
}

/// Train the base model on forget+retain until the forget-set MA target (or
/// the step budget), then train the retain-only reference for the same
/// number of steps from the same initialization.
pub fn run_train_base(
    cfg: &ExperimentConfig,
    records: &[SequenceRecord],
    train_reference: bool,
) -> Result<BaseOutcome> {
    let forget = forget_records(records);
    let forget_seqs = seq_views(&forget);

    let mut base = ModelParams::init(&cfg.lm, cfg.seed)?;
    let mut opt = OptimizerState::new(
        &base,
        cfg.train.learning_rate as f32,
        cfg.train.weight_decay as f32,
    );
    let all: Vec<&SequenceRecord> = records.iter().collect();
    let mut sampler = BatchSampler::new(&all, cfg.train.batch_size, cfg.seed, 0x62617365)?;

    let mut steps_used = 0u64;
    let mut forget_ma = 0.0f64;
    let mut reached = false;
    for step in 1..=cfg.train.max_steps as u64 {
        let batch = sampler.next().clone();
        nll_step(&mut base, &mut opt, &batch)?;
        steps_used = step;
        if step % cfg.train.ma_check_every as u64 == 0 || step == cfg.train.max_steps as u64 {
            forget_ma = ma_batch(&base, &DecodePolicy::Plain, &forget_seqs, cfg.metrics.stride)?.0;
            if forget_ma >= cfg.train.ma_target {
                reached = true;
                break;
            }
        }
    }

    let reference = if train_reference {
        let mut reference = ModelParams::init(&cfg.lm, cfg.seed)?;
        let mut ref_opt = OptimizerState::new(
            &reference,
            cfg.train.learning_rate as f32,
            cfg.train.weight_decay as f32,
        );
        let retain: Vec<&SequenceRecord> = retain_records(records);
        let mut ref_sampler = BatchSampler::new(&retain, cfg.train.batch_size, cfg.seed, 0x72656672)?;
        for _ in 0..steps_used {
            let batch = ref_sampler.next().clone();
            nll_step(&mut reference, &mut ref_opt, &batch)?;
        }
        Some(reference)
    } else {
        None
    };

    Ok(BaseOutcome {
        base,
        reference,
        steps_used,
        final_forget_ma: forget_ma,
        reached_target: reached,
    })
}

fn nll_step(params: &mut ModelParams, opt: &mut OptimizerState, batch: &TokenBatch) -> Result<f64> {
    let mut obj: Box<crate::model::Objective> =
        Box::new(|tape, logits, b| crate::model::shifted_nll_mean(tape, logits, b));
    crate::model::train_step(params, opt, batch, &mut obj, None)
}

// ---------------------------------------------------------------------------
// Unlearning runs
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    pub model: ModelParams,
    pub dynamics: DynamicsLog,
    pub report: MetricsReport,
    pub status: RunStatus,
    pub steps_run: u64,
}

/// Evaluation sets used for dynamics rows and final reports.
struct EvalSets<'a> {
    forget: Vec<&'a [u32]>,
    retain: Vec<&'a [u32]>,
    retain_subset: Vec<&'a [u32]>,
}

impl<'a> EvalSets<'a> {
    fn new(records: &'a [SequenceRecord], subset: usize) -> Self {
        let forget: Vec<&[u32]> = records
            .iter()
            .filter(|r| r.split == crate::corpus::Split::Forget)
            .map(|r| r.tokens.as_slice())
            .collect();
        let retain: Vec<&[u32]> = records
            .iter()
            .filter(|r| r.split == crate::corpus::Split::Retain)
            .map(|r| r.tokens.as_slice())
            .collect();
        let retain_subset = retain.iter().copied().take(subset.max(1)).collect();
        EvalSets {
            forget,
            retain,
            retain_subset,
        }
    }
}

fn dynamics_row(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    policy: &DecodePolicy,
    reference: &ModelParams,
    sets: &EvalSets,
    step: u64,
    loss: f64,
) -> Result<DynamicsRow> {
    Ok(DynamicsRow {
        step,
        forget_kl: avg_kl_distance(model, policy, reference, &sets.forget, cfg.metrics.kl_direction)?,
        retain_kl: avg_kl_distance(model, policy, reference, &sets.retain_subset, cfg.metrics.kl_direction)?,
        forget_ma: ma_batch(model, policy, &sets.forget, cfg.metrics.stride)?.0,
        retain_ppl: perplexity(model, policy, &sets.retain_subset)?,
        loss,
    })
}

fn final_report(
    cfg: &ExperimentConfig,
    model: &ModelParams,
    policy: &DecodePolicy,
    reference: &ModelParams,
    sets: &EvalSets,
    meta: &RunMeta,
    with_el: bool,
) -> Result<MetricsReport> {
    let forget = compute_split_metrics(
        model, policy, Some(reference), &sets.forget, "forget", &cfg.metrics, with_el, meta,
    )?;
    let retain = compute_split_metrics(
        model, policy, Some(reference), &sets.retain, "retain", &cfg.metrics, with_el, meta,
    )?;
    Ok(MetricsReport { forget, retain })
}

/// Options controlling how much work `run_unlearn` does beyond training.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Compute the extraction metric in the final report.
    pub with_el: bool,
    /// Log dynamics rows every `eval_every` steps.
    pub with_dynamics: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            with_el: true,
            with_dynamics: true,
        }
    }
}

/// Execute the configured unlearning method against base/reference
/// checkpoints over the given corpus.
pub fn run_unlearn(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    opts: &RunOptions,
) -> Result<RunOutcome> {
    checkpoint::check_compatible(base, reference, "run_unlearn")?;
    let forget: Vec<&SequenceRecord> = forget_records(records);
    run_unlearn_on(cfg, base, reference, records, &forget, opts)
}

/// As [`run_unlearn`] but over an explicit forget subset (sequential folds).
fn run_unlearn_on(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    forget: &[&SequenceRecord],
    opts: &RunOptions,
) -> Result<RunOutcome> {
    match &cfg.unlearn {
        MethodSpec::Direct(spec) => {
            Ok(run_direct(cfg, spec, base, reference, records, forget, opts, None)?.0)
        }
        MethodSpec::Aux(spec) => run_aux(cfg, spec, base, reference, records, forget, opts),
    }
}

fn run_direct(
    cfg: &ExperimentConfig,
    spec: &UnlearnSpec,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    forget: &[&SequenceRecord],
    opts: &RunOptions,
    carried_opt: Option<OptimizerState>,
) -> Result<(RunOutcome, OptimizerState)> {
    let sets = EvalSets::new(records, cfg.dynamics_retain_subset);
    let forget_subset_seqs: Vec<&[u32]> = forget.iter().map(|r| r.tokens.as_slice()).collect();
    let teacher = TeacherSnapshot::take(base);
    let mut student = base.clone();
    let mut opt = carried_opt.unwrap_or_else(|| {
        let mut opt = OptimizerState::new(&student, spec.learning_rate as f32, 0.0);
        // Epsilon tied to the step scale damps the near-zero residual
        // gradients left once the forget set has converged; without it the
        // normalized updates keep drifting the model at full speed while
        // chasing distribution tails.
        opt.eps = (spec.learning_rate as f32).clamp(2e-5, 1e-3);
        opt
    });

    let batch_size = cfg.train.batch_size.min(forget.len());
    let mut forget_sampler = BatchSampler::new(forget, batch_size, cfg.seed, 0x756e6c6e)?;
    let mut retain_sampler = if spec.retain_reg != RetainReg::None {
        let retain: Vec<&SequenceRecord> = retain_records(records);
        Some(BatchSampler::new(&retain, cfg.train.batch_size.min(retain.len()), cfg.seed, 0x72657467)?)
    } else {
        None
    };

    let mut dynamics = DynamicsLog::default();
    let mut status = RunStatus::Completed;
    let mut steps_run = 0u64;

    // step-0 row: metrics of the untouched student plus the first batch loss
    if opts.with_dynamics {
        let probe = forget_sampler.next().clone();
        let loss0 = direct_loss_value(spec, &student, &teacher, &probe)?;
        dynamics.push(dynamics_row(cfg, &student, &DecodePolicy::Plain, reference, &sets, 0, loss0)?);
    }

    for step in 1..=spec.steps as u64 {
        opt.lr = unlearn_lr(spec.learning_rate, step, spec.steps as u64) as f32;
        let batch = forget_sampler.next().clone();
        let retain_batch = retain_sampler.as_mut().map(|s| s.next().clone());
        match direct_step(spec, &mut student, &mut opt, &teacher, &batch, retain_batch.as_ref()) {
            Ok(loss) => {
                steps_run = step;
                let log_now = opts.with_dynamics
                    && (step % cfg.eval_every as u64 == 0 || step == spec.steps as u64);
                if log_now {
                    dynamics.push(dynamics_row(
                        cfg, &student, &DecodePolicy::Plain, reference, &sets, step, loss,
                    )?);
                }
                if let Some(threshold) = cfg.stop_at_forget_ma {
                    if step % cfg.eval_every as u64 == 0 {
                        let ma = ma_batch(&student, &DecodePolicy::Plain, &forget_subset_seqs, cfg.metrics.stride)?.0;
                        if ma <= threshold {
                            steps_run = step;
                            break;
                        }
                    }
                }
            }
            Err(Error::NonFiniteLoss { step: s, .. }) => {
                status = RunStatus::Collapsed { at_step: s };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let meta = RunMeta {
        method: spec.method.name().to_string(),
        strength: spec.strength,
        step: steps_run,
        seed: cfg.seed,
    };
    let report = final_report(cfg, &student, &DecodePolicy::Plain, reference, &sets, &meta, opts.with_el)?;
    Ok((
        RunOutcome {
            model: student,
            dynamics,
            report,
            status,
            steps_run,
        },
        opt,
    ))
}

/// Unlearning learning-rate schedule: linear warmup softens the initial
/// distillation shock, then a cosine decay to 5% of peak keeps late steps
/// from drifting the model once the forget set has converged.
pub fn unlearn_lr(peak: f64, step: u64, total: u64) -> f64 {
    let warmup = (total / 5).clamp(1, 25);
    if step <= warmup {
        return peak * step as f64 / warmup as f64;
    }
    let u = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    let floor = 0.05 * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

/// One optimizer step of a direct method, optionally with a retain-set
/// regularizer batch folded into the same objective.
fn direct_step(
    spec: &UnlearnSpec,
    student: &mut ModelParams,
    opt: &mut OptimizerState,
    teacher: &TeacherSnapshot,
    batch: &TokenBatch,
    retain_batch: Option<&TokenBatch>,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let handles = TapeParams::register(&mut tape, student, true);
    let logits = forward(&mut tape, &handles, &student.config, batch, None)?;
    let mut loss = direct_loss(spec, &mut tape, logits, teacher, batch)?;

    if let (RetainReg::Gdr | RetainReg::Klr, Some(rb)) = (spec.retain_reg, retain_batch) {
        let r_logits = forward(&mut tape, &handles, &student.config, rb, None)?;
        let ref_logits = teacher.logits(rb)?;
        let reg = retain_regularizer(&mut tape, r_logits, &ref_logits, &rb.ids, spec.retain_reg)?;
        let weighted = tape.scale(reg, spec.retain_weight as f32);
        loss = tape.add(loss, weighted)?;
    }

    let loss_value = tape.value(loss) as f64;
    if !loss_value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step + 1,
            value: loss_value,
        });
    }
    tape.backward(loss)?;
    let grads: std::collections::BTreeMap<String, Vec<f32>> = student
        .tensors
        .keys()
        .map(|name| (name.clone(), tape.grad(handles.get(name)).expect("grad").to_vec()))
        .collect();
    opt.apply(student, &grads)?;
    Ok(loss_value)
}

fn direct_loss(
    spec: &UnlearnSpec,
    tape: &mut GradTape,
    logits: crate::tensor::TensorId,
    teacher: &TeacherSnapshot,
    batch: &TokenBatch,
) -> Result<crate::tensor::TensorId> {
    match spec.method {
        DirectMethod::Undial => {
            let t_logits = teacher.logits(batch)?;
            undial_loss(tape, logits, &t_logits, &batch.ids, spec.strength as f32, None)
        }
        DirectMethod::Fundial => {
            let t_logits = teacher.logits(batch)?;
            let mask = batch
                .key_mask
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("fundial needs key masks".into()))?;
            undial_loss(tape, logits, &t_logits, &batch.ids, spec.strength as f32, Some(mask))
        }
        DirectMethod::Ga => ga_objective(tape, logits, &batch.ids),
        DirectMethod::Npo => {
            let r_logits = teacher.logits(batch)?;
            npo_loss(tape, logits, &r_logits, &batch.ids, spec.strength as f32)
        }
    }
}

/// Loss value without touching the model (step-0 logging).
fn direct_loss_value(
    spec: &UnlearnSpec,
    student: &ModelParams,
    teacher: &TeacherSnapshot,
    batch: &TokenBatch,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let handles = TapeParams::register(&mut tape, student, false);
    let logits = forward(&mut tape, &handles, &student.config, batch, None)?;
    let loss = direct_loss(spec, &mut tape, logits, teacher, batch)?;
    Ok(tape.value(loss) as f64)
}

fn run_aux(
    cfg: &ExperimentConfig,
    spec: &AuxSpec,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    forget: &[&SequenceRecord],
    opts: &RunOptions,
) -> Result<RunOutcome> {
    spec.validate()?;
    let sets = EvalSets::new(records, cfg.dynamics_retain_subset);
    let meta = RunMeta {
        method: spec.method.name().to_string(),
        strength: spec.coeff,
        step: 0,
        seed: cfg.seed,
    };

    let memo = if spec.method.needs_memo() {
        Some(match &spec.memo_checkpoint {
            Some(path) => {
                let loaded = checkpoint::load(Path::new(path))?;
                checkpoint::check_compatible(base, &loaded.params, "memo checkpoint")?;
                loaded.params
            }
            None => {
                let batch_size = cfg.train.batch_size.min(forget.len());
                let batches: Vec<TokenBatch> = forget
                    .chunks(batch_size)
                    .map(to_batch)
                    .collect::<Result<_>>()?;
                train_memo_model(base, &batches, spec.memo_steps, spec.memo_lr as f32, cfg.seed)?
            }
        })
    } else {
        None
    };

    let mut dynamics = DynamicsLog::default();
    match spec.method {
        AuxMethod::Dp => {
            let policy = DecodePolicy::Dp {
                lambda: spec.coeff as f32,
                literal: spec.dp_literal,
            };
            if opts.with_dynamics {
                dynamics.push(dynamics_row(cfg, base, &policy, reference, &sets, 0, 0.0)?);
            }
            let report = final_report(cfg, base, &policy, reference, &sets, &meta, opts.with_el)?;
            Ok(RunOutcome {
                model: base.clone(),
                dynamics,
                report,
                status: RunStatus::Completed,
                steps_run: 0,
            })
        }
        AuxMethod::Ta => {
            let memo = memo.expect("ta memo");
            let merged = task_arithmetic_merge(base, &memo, spec.coeff as f32, spec.ta_mode)?;
            if opts.with_dynamics {
                dynamics.push(dynamics_row(cfg, base, &DecodePolicy::Plain, reference, &sets, 0, 0.0)?);
                dynamics.push(dynamics_row(cfg, &merged, &DecodePolicy::Plain, reference, &sets, spec.memo_steps.max(1) as u64, 0.0)?);
            }
            let report = final_report(cfg, &merged, &DecodePolicy::Plain, reference, &sets, &meta, opts.with_el)?;
            Ok(RunOutcome {
                model: merged,
                dynamics,
                report,
                status: RunStatus::Completed,
                steps_run: spec.memo_steps as u64,
            })
        }
        AuxMethod::CdPlain | AuxMethod::CdRelu => {
            let memo = memo.expect("cd memo");
            let policy = DecodePolicy::Cd {
                alpha: spec.coeff as f32,
                relu: matches!(spec.method, AuxMethod::CdRelu),
                memo: &memo,
            };
            if opts.with_dynamics {
                dynamics.push(dynamics_row(cfg, base, &policy, reference, &sets, 0, 0.0)?);
            }
            let report = final_report(cfg, base, &policy, reference, &sets, &meta, opts.with_el)?;
            Ok(RunOutcome {
                model: base.clone(),
                dynamics,
                report,
                status: RunStatus::Completed,
                steps_run: 0,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Protocols: sweep, sequential, scaling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub strength: f64,
    pub el3_forget: f64,
    pub ma_forget: f64,
    pub ppl_retain: f64,
    pub rep3_retain: f64,
    pub collapsed: bool,
}

/// Number of parallel sweep workers: the UNDIAL_THREADS environment variable
/// caps available parallelism.
pub fn sweep_workers() -> usize {
    let avail = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    match std::env::var("UNDIAL_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        Some(n) if n >= 1 => avail.min(n),
        _ => avail,
    }
}

/// One unlearning run per strength from the same base checkpoint. Rows come
/// back sorted by strength; a strength of zero is the identity row (base
/// metrics). Runs execute on up to [`sweep_workers`] threads.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    strengths: &[f64],
) -> Result<Vec<SweepRow>> {
    if strengths.is_empty() {
        return Error::invalid("run_sweep: empty strengths list");
    }
    let n = strengths.len();
    let results: Vec<Mutex<Option<Result<SweepRow>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = sweep_workers().min(n);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let row = sweep_point(cfg, base, reference, records, strengths[i]);
                *results[i].lock().unwrap() = Some(row);
            });
        }
    });

    let mut rows = Vec::with_capacity(n);
    for slot in results {
        rows.push(slot.into_inner().unwrap().expect("worker finished")?);
    }
    rows.sort_by(|a, b| a.strength.partial_cmp(&b.strength).unwrap());
    Ok(rows)
}

fn sweep_point(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    strength: f64,
) -> Result<SweepRow> {
    let opts = RunOptions {
        with_el: true,
        with_dynamics: false,
    };
    let (report, collapsed, method) = if strength == 0.0 {
        // identity row: base metrics
        let sets = EvalSets::new(records, cfg.dynamics_retain_subset);
        let meta = RunMeta {
            method: cfg.unlearn.name().to_string(),
            strength: 0.0,
            step: 0,
            seed: cfg.seed,
        };
        let report = final_report(cfg, base, &DecodePolicy::Plain, reference, &sets, &meta, true)?;
        (report, false, cfg.unlearn.name().to_string())
    } else {
        let point_cfg = ExperimentConfig {
            unlearn: cfg.unlearn.with_strength(strength),
            ..cfg.clone()
        };
        let outcome = run_unlearn(&point_cfg, base, reference, records, &opts)?;
        (
            outcome.report,
            outcome.status.is_collapsed(),
            point_cfg.unlearn.name().to_string(),
        )
    };
    Ok(SweepRow {
        method,
        strength,
        el3_forget: report.forget.el3.unwrap_or(f64::NAN),
        ma_forget: report.forget.ma,
        ppl_retain: report.retain.ppl,
        rep3_retain: report.retain.rep3,
        collapsed,
    })
}

/// Apply the configured method over `k` sequential forget folds, each request
/// starting from the previous unlearned checkpoint. Reports use the
/// cumulative forget set processed so far; the extraction metric is skipped
/// inside the protocol loop.
pub fn run_sequential(
    cfg: &ExperimentConfig,
    base: &ModelParams,
    reference: &ModelParams,
    records: &[SequenceRecord],
    k: usize,
) -> Result<Vec<(MetricsReport, RunStatus)>> {
    let forget: Vec<SequenceRecord> = forget_records(records).into_iter().cloned().collect();
    let folds = split_sequential(&forget, k)?;
    let opts = RunOptions {
        with_el: false,
        with_dynamics: false,
    };
    let mut current = base.clone();
    let mut results = Vec::with_capacity(k);
    let mut cumulative: Vec<&SequenceRecord> = Vec::new();
    let mut total_steps = 0u64;
    let retain: Vec<&SequenceRecord> = retain_records(records);
    let retain_seqs = seq_views(&retain);
    for fold in &folds {
        let fold_refs: Vec<&SequenceRecord> = fold.iter().collect();
        let outcome = run_unlearn_on(cfg, &current, reference, records, &fold_refs, &opts)?;
        total_steps += outcome.steps_run;
        current = outcome.model;
        cumulative.extend(fold.iter());
        // cumulative forget metrics after this request
        let cum_seqs = seq_views(&cumulative);
        let meta = RunMeta {
            method: cfg.unlearn.name().to_string(),
            strength: cfg.unlearn.strength(),
            step: total_steps,
            seed: cfg.seed,
        };
        let forget_metrics = compute_split_metrics(
            &current, &DecodePolicy::Plain, Some(reference), &cum_seqs, "forget", &cfg.metrics, false, &meta,
        )?;
        let retain_metrics = compute_split_metrics(
            &current, &DecodePolicy::Plain, Some(reference), &retain_seqs, "retain", &cfg.metrics, false, &meta,
        )?;
        results.push((
            MetricsReport {
                forget: forget_metrics,
                retain: retain_metrics,
            },
            outcome.status.clone(),
        ));
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_forget: usize,
    pub method: String,
    pub strength: f64,
    pub ma_forget: f64,
    pub ppl_retain: f64,
    pub collapsed: bool,
}

/// Forget-set scaling protocol: regenerate the corpus at each size, train a
/// fresh base, unlearn, and report the memorization/utility trade-off.
pub fn run_scaling(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<Vec<ScalingRow>> {
    if sizes.is_empty() {
        return Error::invalid("run_scaling: empty sizes list");
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n_forget in sizes {
        let point_cfg = ExperimentConfig {
            corpus: CorpusConfig {
                n_forget,
                ..cfg.corpus.clone()
            },
            ..cfg.clone()
        };
        point_cfg.validate()?;
        let records = generate_corpus(&point_cfg.corpus)?;
        let outcome = run_train_base(&point_cfg, &records, true)?;
        let reference = outcome.reference.as_ref().expect("reference trained");
        let opts = RunOptions {
            with_el: false,
            with_dynamics: false,
        };
        let run = run_unlearn(&point_cfg, &outcome.base, reference, &records, &opts)?;
        rows.push(ScalingRow {
            n_forget,
            method: point_cfg.unlearn.name().to_string(),
            strength: point_cfg.unlearn.strength(),
            ma_forget: run.report.forget.ma,
            ppl_retain: run.report.retain.ppl,
            collapsed: run.status.is_collapsed(),
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Artifact layout and report aggregation
// ---------------------------------------------------------------------------

pub struct RunDirs;

impl RunDirs {
    pub fn corpus(out: &Path) -> PathBuf {
        out.join("corpus.jsonl")
    }
    pub fn base(out: &Path) -> PathBuf {
        out.join("base.undl")
    }
    pub fn reference(out: &Path) -> PathBuf {
        out.join("reference.undl")
    }
    pub fn base_meta(out: &Path) -> PathBuf {
        out.join("base_meta.json")
    }
    pub fn run_dir(out: &Path, name: &str) -> PathBuf {
        out.join("runs").join(name)
    }
    pub fn report_dir(out: &Path) -> PathBuf {
        out.join("report")
    }
}

/// Persist one run's artifacts under `runs/<name>/`.
pub fn save_run(out: &Path, name: &str, outcome: &RunOutcome) -> Result<PathBuf> {
    let dir = RunDirs::run_dir(out, name);
    fs::create_dir_all(&dir)?;
    checkpoint::save(&outcome.model, &dir.join("model.undl"), false)?;
    outcome.dynamics.write_jsonl(&dir.join("dynamics.jsonl"))?;
    fs::write(dir.join("metrics.jsonl"), outcome.report.to_jsonl()?)?;
    let status = serde_json::json!({
        "status": match &outcome.status {
            RunStatus::Completed => "completed",
            RunStatus::Collapsed { .. } => "collapsed",
        },
        "collapsed_at": match &outcome.status {
            RunStatus::Collapsed { at_step } => Some(at_step),
            RunStatus::Completed => None,
        },
        "steps_run": outcome.steps_run,
    });
    fs::write(dir.join("status.json"), serde_json::to_string_pretty(&status)?)?;
    Ok(dir)
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

/// Aggregate whatever run artifacts exist under `out/` into per-figure CSVs
/// plus a human-readable summary. Missing inputs produce empty tables and an
/// explicit gap list.
pub fn write_report(out: &Path) -> Result<Vec<String>> {
    let report_dir = RunDirs::report_dir(out);
    fs::create_dir_all(&report_dir)?;
    let mut gaps = Vec::new();

    // fig2: dynamics curves from every saved run
    let mut dyn_rows = Vec::new();
    let runs_dir = out.join("runs");
    let mut run_names = Vec::new();
    if runs_dir.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&runs_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for dir in entries {
            let name = dir.file_name().unwrap().to_string_lossy().to_string();
            let dyn_path = dir.join("dynamics.jsonl");
            if dyn_path.is_file() {
                for line in fs::read_to_string(&dyn_path)?.lines() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let row: DynamicsRow = serde_json::from_str(line)?;
                    dyn_rows.push(format!(
                        "{},{},{},{},{},{},{}",
                        name, row.step, row.forget_kl, row.retain_kl, row.forget_ma, row.retain_ppl, row.loss
                    ));
                }
            }
            run_names.push(name);
        }
    }
    if dyn_rows.is_empty() {
        gaps.push("fig2_dynamics: no run dynamics found".to_string());
    }
    write_csv(
        &report_dir.join("fig2_dynamics.csv"),
        "run,step,forget_kl,retain_kl,forget_ma,retain_ppl,loss",
        &dyn_rows,
    )?;

    // fig3: pareto sweep
    let sweep_path = out.join("sweep.jsonl");
    let mut sweep_rows = Vec::new();
    if sweep_path.is_file() {
        for line in fs::read_to_string(&sweep_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let row: SweepRow = serde_json::from_str(line)?;
            sweep_rows.push(format!(
                "{},{},{},{},{},{},{}",
                row.method, row.strength, row.el3_forget, row.ma_forget, row.ppl_retain, row.rep3_retain, row.collapsed
            ));
        }
    } else {
        gaps.push("fig3_pareto: no sweep.jsonl".to_string());
    }
    write_csv(
        &report_dir.join("fig3_pareto.csv"),
        "method,strength,el3_forget,ma_forget,ppl_retain,rep3_retain,collapsed",
        &sweep_rows,
    )?;

    // fig6 left: scaling
    let scaling_path = out.join("scaling.jsonl");
    let mut scaling_rows = Vec::new();
    if scaling_path.is_file() {
        for line in fs::read_to_string(&scaling_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let row: ScalingRow = serde_json::from_str(line)?;
            scaling_rows.push(format!(
                "{},{},{},{},{},{}",
                row.n_forget, row.method, row.strength, row.ma_forget, row.ppl_retain, row.collapsed
            ));
        }
    } else {
        gaps.push("fig6_scaling: no scaling.jsonl".to_string());
    }
    write_csv(
        &report_dir.join("fig6_scaling.csv"),
        "n_forget,method,strength,ma_forget,ppl_retain,collapsed",
        &scaling_rows,
    )?;

    // fig6 right: sequential requests
    let seq_path = out.join("sequential.jsonl");
    let mut seq_rows = Vec::new();
    if seq_path.is_file() {
        for line in fs::read_to_string(&seq_path)?.lines() {
            if line.trim().is_empty() {
                continue;
            }
            let row: SequentialRow = serde_json::from_str(line)?;
            seq_rows.push(format!(
                "{},{},{},{},{},{}",
                row.request, row.method, row.strength, row.forget_ma_cumulative, row.ppl_retain, row.collapsed
            ));
        }
    } else {
        gaps.push("fig6_sequential: no sequential.jsonl".to_string());
    }
    write_csv(
        &report_dir.join("fig6_sequential.csv"),
        "request,method,strength,forget_ma_cumulative,ppl_retain,collapsed",
        &seq_rows,
    )?;

    // summary
    let mut summary = String::new();
    summary.push_str("unlearning lab report\n=====================\n\n");
    summary.push_str(&format!("runs: {}\n", run_names.join(", ")));
    summary.push_str(&format!(
        "tables: fig2_dynamics ({} rows), fig3_pareto ({} rows), fig6_scaling ({} rows), fig6_sequential ({} rows)\n",
        dyn_rows.len(),
        sweep_rows.len(),
        scaling_rows.len(),
        seq_rows.len()
    ));
    if gaps.is_empty() {
        summary.push_str("\nno gaps\n");
    } else {
        summary.push_str("\ngaps:\n");
        for g in &gaps {
            summary.push_str(&format!("  - {g}\n"));
        }
    }
    fs::write(report_dir.join("summary.txt"), summary)?;
    Ok(gaps)
}

/// One line of sequential.jsonl.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialRow {
    pub request: usize,
    pub method: String,
    pub strength: f64,
    pub forget_ma_cumulative: f64,
    pub ppl_retain: f64,
    pub steps_total: u64,
    pub collapsed: bool,
}

pub fn write_jsonl_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
