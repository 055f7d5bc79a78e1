//! Auxiliary-model unlearning baselines.
//!
//! Decode-time uniform interpolation, task-arithmetic weight merging against
//! a model fine-tuned on the forget set, and contrastive decoding against the
//! same memo model. The memo model is the privacy-sensitive artifact here: it
//! is trained to memorize exactly the content being removed, and its
//! checkpoints carry a header flag saying so.

use serde::{Deserialize, Serialize};

use crate::checkpoint::check_compatible;
use crate::error::{Error, Result};
use crate::model::{
    shifted_nll_mean, train_step, ModelParams, Objective, OptimizerState, TokenBatch,
};
use crate::rng::Pcg32;
use crate::tensor::softmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMethod {
    Dp,
    Ta,
    CdPlain,
    CdRelu,
}

impl AuxMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AuxMethod::Dp => "dp",
            AuxMethod::Ta => "ta",
            AuxMethod::CdPlain => "cd_plain",
            AuxMethod::CdRelu => "cd",
        }
    }

    pub fn needs_memo(&self) -> bool {
        !matches!(self, AuxMethod::Dp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaMode {
    /// Verbatim subtraction of the memo weights.
    Raw,
    /// Subtraction of the task vector (memo minus base).
    #[default]
    Delta,
}

/// Auxiliary-method run description. `coeff` is lambda for decode-time
/// interpolation, beta for task arithmetic, alpha for contrastive decoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSpec {
    pub method: AuxMethod,
    pub coeff: f64,
    /// Path to a memo checkpoint; required for TA/CD.
    #[serde(default)]
    pub memo_checkpoint: Option<String>,
    #[serde(default)]
    pub ta_mode: TaMode,
    /// Steps/lr used when the harness has to train the memo model itself.
    #[serde(default = "default_memo_steps")]
    pub memo_steps: usize,
    #[serde(default = "default_memo_lr")]
    pub memo_lr: f64,
    /// Interpolate in logit space verbatim instead of probability space.
    #[serde(default)]
    pub dp_literal: bool,
}

fn default_memo_steps() -> usize {
    300
}

fn default_memo_lr() -> f64 {
    1e-3
}

impl AuxSpec {
    pub fn new(method: AuxMethod, coeff: f64) -> Self {
        AuxSpec {
            method,
            coeff,
            memo_checkpoint: None,
            ta_mode: TaMode::Delta,
            memo_steps: default_memo_steps(),
            memo_lr: default_memo_lr(),
            dp_literal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.method {
            AuxMethod::Dp => {
                if !(0.0..=1.0).contains(&self.coeff) {
                    return Err(Error::InvalidConfig("dp lambda must be in [0, 1]".into()));
                }
            }
            AuxMethod::Ta | AuxMethod::CdPlain | AuxMethod::CdRelu => {
                if self.coeff < 0.0 {
                    return Err(Error::InvalidConfig("coeff must be >= 0".into()));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decode-time transforms
// ---------------------------------------------------------------------------

/// Interpolate the model distribution with the uniform distribution:
/// (1 - lambda) * softmax(z) + lambda / V.
pub fn dp_decode_probs(logits_row: &[f32], lambda: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Error::invalid(format!("dp lambda {lambda} outside [0, 1]"));
    }
    let v = logits_row.len();
    let mut p = softmax(logits_row)?;
    let floor = lambda / v as f32;
    for x in p.iter_mut() {
        *x = (1.0 - lambda) * *x + floor;
    }
    Ok(p)
}

/// Verbatim logit-space form softmax((1-lambda) z + lambda u). With u a
/// constant vector the mix term is a pure shift, so this mostly acts as a
/// temperature; kept for fidelity.
pub fn dp_decode_probs_literal(logits_row: &[f32], lambda: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Error::invalid(format!("dp lambda {lambda} outside [0, 1]"));
    }
    let u = 1.0 / logits_row.len() as f32;
    let mixed: Vec<f32> = logits_row.iter().map(|&z| (1.0 - lambda) * z + lambda * u).collect();
    softmax(&mixed)
}

/// Contrastive decoding: suppress what the memo model is confident about.
/// `plain` is softmax(z - alpha*z_memo); the relu form only subtracts where
/// the memo logit exceeds the base logit.
pub fn contrastive_decode_probs(
    z: &[f32],
    z_memo: &[f32],
    alpha: f32,
    relu_form: bool,
) -> Result<Vec<f32>> {
    if z.len() != z_memo.len() {
        return Error::shape(format!(
            "contrastive_decode: {} vs {} logits",
            z.len(),
            z_memo.len()
        ));
    }
    if alpha < 0.0 {
        return Error::invalid("contrastive_decode: alpha must be >= 0");
    }
    let adjusted: Vec<f32> = if relu_form {
        z.iter()
            .zip(z_memo)
            .map(|(&a, &b)| a - alpha * (b - a).max(0.0))
            .collect()
    } else {
        z.iter().zip(z_memo).map(|(&a, &b)| a - alpha * b).collect()
    };
    softmax(&adjusted)
}

// ---------------------------------------------------------------------------
// Weight-space merge
// ---------------------------------------------------------------------------

/// Subtract the memo model from the base model in weight space.
/// `Raw`: theta - beta * theta_memo. `Delta`: theta - beta * (theta_memo - theta).
pub fn task_arithmetic_merge(
    base: &ModelParams,
    memo: &ModelParams,
    beta: f32,
    mode: TaMode,
) -> Result<ModelParams> {
    check_compatible(base, memo, "task_arithmetic_merge")?;
    let mut out = base.clone();
    for (name, t) in out.tensors.iter_mut() {
        let m = &memo.tensors[name];
        match mode {
            TaMode::Raw => {
                for (o, &mv) in t.data.iter_mut().zip(&m.data) {
                    *o -= beta * mv;
                }
            }
            TaMode::Delta => {
                for (o, &mv) in t.data.iter_mut().zip(&m.data) {
                    *o -= beta * (mv - *o);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Memo model
// ---------------------------------------------------------------------------

/// Fine-tune a copy of the base model to memorize the forget set (standard
/// NLL minimization). The base is untouched.
pub fn train_memo_model(
    base: &ModelParams,
    forget_batches: &[TokenBatch],
    steps: usize,
    lr: f32,
    seed: u64,
) -> Result<ModelParams> {
    if forget_batches.is_empty() {
        return Error::invalid("train_memo_model: empty forget set");
    }
    let mut params = base.clone();
    let mut opt = OptimizerState::new(&params, lr, 0.0);
    let mut order_rng = Pcg32::new(seed, 0x6d656d6f);
    let mut objective: Box<Objective> =
        Box::new(|tape, logits, batch| shifted_nll_mean(tape, logits, batch));
    let mut order: Vec<usize> = (0..forget_batches.len()).collect();
    let mut cursor = order.len();
    for _ in 0..steps {
        if cursor == order.len() {
            order_rng.shuffle(&mut order);
            cursor = 0;
        }
        let batch = &forget_batches[order[cursor]];
        cursor += 1;
        train_step(&mut params, &mut opt, batch, &mut objective, None)?;
    }
    Ok(params)
}
