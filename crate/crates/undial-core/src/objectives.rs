//! Direct-tuning unlearning losses.
//!
//! The self-distillation loss trains the student toward the frozen teacher's
//! distribution with the target token's logit reduced by the unlearning
//! strength gamma; the focused variant restricts it to key-token positions.
//! Gradient ascent and negative-preference losses are the direct-tuning
//! baselines, and two retain-set regularizers are provided.
//!
//! All losses use the causal shift: the loss at position t pairs logits at t
//! with the target token at t+1, and reduces by the mean over contributing
//! positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{eval_logits, ModelParams, TokenBatch};
use crate::tensor::{self, GradTape, Tensor, TensorId};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectMethod {
    Undial,
    Fundial,
    Ga,
    Npo,
}

impl DirectMethod {
    pub fn name(&self) -> &'static str {
        match self {
            DirectMethod::Undial => "undial",
            DirectMethod::Fundial => "fundial",
            DirectMethod::Ga => "ga",
            DirectMethod::Npo => "npo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetainReg {
    #[default]
    None,
    /// Gradient descent on retain-set NLL.
    Gdr,
    /// KL(reference || student) on retain batches.
    Klr,
}

/// Direct-tuning unlearning run description. `strength` is gamma for the
/// distillation methods and beta for the preference loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnSpec {
    pub method: DirectMethod,
    pub strength: f64,
    #[serde(default)]
    pub retain_reg: RetainReg,
    #[serde(default)]
    pub retain_weight: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl UnlearnSpec {
    pub fn new(method: DirectMethod, strength: f64, steps: usize, learning_rate: f64) -> Self {
        UnlearnSpec {
            method,
            strength,
            retain_reg: RetainReg::None,
            retain_weight: 0.0,
            steps,
            learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strength <= 0.0 {
            return Err(Error::InvalidConfig("unlearn strength must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("unlearn steps must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.retain_weight < 0.0 {
            return Err(Error::InvalidConfig("retain_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frozen copy of the original model taken before unlearning starts. There is
/// no mutable access: the snapshot cannot change during a run.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    params: ModelParams,
}

impl TeacherSnapshot {
    pub fn take(params: &ModelParams) -> Self {
        TeacherSnapshot {
            params: params.clone(),
        }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Teacher logits for a batch, detached from any gradient flow.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor> {
        eval_logits(&self.params, batch)
    }
}

// ---------------------------------------------------------------------------
// Shift plumbing
// ---------------------------------------------------------------------------

/// Slice logits to positions [0, t-1) and flatten to `[b*(t-1), v]` rows.
fn shifted_rows(tape: &mut GradTape, logits: TensorId) -> Result<(TensorId, usize, usize, usize)> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 3 {
        return Error::shape(format!("expected [b, t, v] logits, got {shape:?}"));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if t < 2 {
        return Error::invalid("shifted losses need sequence length >= 2");
    }
    let sliced = tape.slice_time(logits, 0, t - 1)?;
    let rows = tape.reshape(sliced, vec![b * (t - 1), v])?;
    Ok((rows, b, t, v))
}

/// Shifted target ids: row (b, t) predicts `targets[b*t + t + 1]`.
fn shifted_ids(targets: &[u32], b: usize, t: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(b * (t - 1));
    for bi in 0..b {
        out.extend_from_slice(&targets[bi * t + 1..(bi + 1) * t]);
    }
    out
}

/// Shifted key-mask weights: the indicator of the *predicted* token.
fn shifted_mask(mask: &[bool], b: usize, t: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(b * (t - 1));
    for bi in 0..b {
        out.extend(mask[bi * t + 1..(bi + 1) * t].iter().map(|&m| f32::from(m)));
    }
    out
}

fn check_targets(targets: &[u32], b: usize, t: usize, v: usize) -> Result<()> {
    if targets.len() != b * t {
        return Error::shape(format!(
            "targets length {} vs batch {}x{}",
            targets.len(),
            b,
            t
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&id| id as usize >= v) {
        return Error::invalid(format!("target id {bad} out of range {v}"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Adjusted logits
// ---------------------------------------------------------------------------

/// Reduce the target token's logit by gamma. The input row is not mutated.
pub fn adjust_logits(logits_row: &[f32], target_id: usize, gamma: f32) -> Result<Vec<f32>> {
    if target_id >= logits_row.len() {
        return Error::invalid(format!(
            "adjust_logits: target {target_id} out of range {}",
            logits_row.len()
        ));
    }
    if gamma < 0.0 {
        return Error::invalid("adjust_logits: gamma must be >= 0");
    }
    let mut out = logits_row.to_vec();
    out[target_id] -= gamma;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Self-distillation loss on adjusted teacher logits.
///
/// Per shifted position: cross-entropy between softmax(teacher row with the
/// target logit reduced by gamma) and the student row. With a key mask, only
/// positions whose predicted token is masked contribute (exactly zero loss
/// and gradient elsewhere); an all-false mask yields a zero loss.
pub fn undial_loss(
    tape: &mut GradTape,
    student_logits: TensorId,
    teacher_logits: &Tensor,
    targets: &[u32],
    gamma: f32,
    key_mask: Option<&[bool]>,
) -> Result<TensorId> {
    if tape.shape(student_logits) != teacher_logits.shape.as_slice() {
        return Error::shape(format!(
            "undial_loss: student {:?} vs teacher {:?}",
            tape.shape(student_logits),
            teacher_logits.shape
        ));
    }
    if gamma < 0.0 {
        return Error::invalid("undial_loss: gamma must be >= 0");
    }
    let (rows, b, t, v) = shifted_rows(tape, student_logits)?;
    check_targets(targets, b, t, v)?;
    if let Some(m) = key_mask {
        if m.len() != b * t {
            return Error::shape("undial_loss: key_mask length mismatch".to_string());
        }
    }
    let ids = shifted_ids(targets, b, t);

    // adjusted teacher distribution, detached
    let n_rows = b * (t - 1);
    let mut adjusted = vec![0.0f32; n_rows * v];
    let mut scratch = vec![0.0f32; v];
    for bi in 0..b {
        for ti in 0..t - 1 {
            let r = bi * (t - 1) + ti;
            let teacher_row = &teacher_logits.data[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            scratch.copy_from_slice(teacher_row);
            scratch[ids[r] as usize] -= gamma;
            tensor::softmax_into(&scratch, &mut adjusted[r * v..(r + 1) * v]);
        }
    }

    let ce = tape.ce_soft_rows(rows, &adjusted)?;
    match key_mask {
        None => Ok(tape.mean_all(ce)),
        Some(m) => {
            let w = shifted_mask(m, b, t);
            if w.iter().all(|&x| x == 0.0) {
                // nothing to unlearn in this batch: zero loss, zero gradients
                return tape.constant(vec![], vec![0.0]);
            }
            tape.weighted_mean(ce, &w)
        }
    }
}


/// Gradient-ascent objective: the negated mean NLL, so minimizing it ascends
/// the forget-set likelihood loss.
pub fn ga_objective(tape: &mut GradTape, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
    let (rows, b, t, v) = shifted_rows(tape, logits)?;
    check_targets(targets, b, t, v)?;
    let ids = shifted_ids(targets, b, t);
    let nll = tape.nll_rows(rows, &ids)?;
    let mean = tape.mean_all(nll);
    Ok(tape.scale(mean, -1.0))
}

/// Negative-preference loss against a frozen reference:
/// mean over positions of -(2/beta) * log sigma(-beta * (log p_student - log p_ref)).
pub fn npo_loss(
    tape: &mut GradTape,
    student_logits: TensorId,
    ref_logits: &Tensor,
    targets: &[u32],
    beta: f32,
) -> Result<TensorId> {
    if beta <= 0.0 {
        return Error::invalid("npo_loss: beta must be > 0");
    }
    if tape.shape(student_logits) != ref_logits.shape.as_slice() {
        return Error::shape(format!(
            "npo_loss: student {:?} vs reference {:?}",
            tape.shape(student_logits),
            ref_logits.shape
        ));
    }
    let (rows, b, t, v) = shifted_rows(tape, student_logits)?;
    check_targets(targets, b, t, v)?;
    let ids = shifted_ids(targets, b, t);

    // beta * nll_ref, detached
    let neg_beta_ref: Vec<f32> = (0..b * (t - 1))
        .map(|r| {
            let bi = r / (t - 1);
            let ti = r % (t - 1);
            let row = &ref_logits.data[(bi * t + ti) * v..(bi * t + ti + 1) * v];
            let nll_ref = -tensor::log_prob(row, ids[r] as usize);
            (-(beta as f64) * nll_ref) as f32
        })
        .collect();

    // z = -beta * (log p_student - log p_ref) = beta*nll_student - beta*nll_ref
    let nll_s = tape.nll_rows(rows, &ids)?;
    let scaled = tape.scale(nll_s, beta);
    let z = tape.add_const(scaled, &neg_beta_ref)?;
    let ls = tape.log_sigmoid(z);
    let mean = tape.mean_all(ls);
    Ok(tape.scale(mean, -2.0 / beta))
}

/// Retain-set regularizer: `Gdr` is the standard mean NLL under the student;
/// `Klr` is the mean KL(softmax(reference) || softmax(student)) per position.
pub fn retain_regularizer(
    tape: &mut GradTape,
    student_logits: TensorId,
    ref_logits: &Tensor,
    targets: &[u32],
    mode: RetainReg,
) -> Result<TensorId> {
    match mode {
        RetainReg::None => Error::invalid("retain_regularizer: mode None"),
        RetainReg::Gdr => {
            let (rows, b, t, v) = shifted_rows(tape, student_logits)?;
            check_targets(targets, b, t, v)?;
            let ids = shifted_ids(targets, b, t);
            let nll = tape.nll_rows(rows, &ids)?;
            Ok(tape.mean_all(nll))
        }
        RetainReg::Klr => {
            if tape.shape(student_logits) != ref_logits.shape.as_slice() {
                return Error::shape("retain_regularizer: reference shape mismatch".to_string());
            }
            let (rows, b, t, v) = shifted_rows(tape, student_logits)?;
            check_targets(targets, b, t, v)?;
            // KL(ref || student) = CE(ref, student) - H(ref); entropy is constant
            let n_rows = b * (t - 1);
            let mut ref_probs = vec![0.0f32; n_rows * v];
            let mut h_sum = 0.0f64;
            for bi in 0..b {
                for ti in 0..t - 1 {
                    let r = bi * (t - 1) + ti;
                    let row = &ref_logits.data[(bi * t + ti) * v..(bi * t + ti + 1) * v];
                    let p = tensor::softmax(row)?;
                    h_sum += tensor::entropy(&p);
                    ref_probs[r * v..(r + 1) * v].copy_from_slice(&p);
                }
            }
            let ce = tape.ce_soft_rows(rows, &ref_probs)?;
            let mean_ce = tape.mean_all(ce);
            let neg_h = tape.constant(vec![], vec![(-h_sum / n_rows as f64) as f32])?;
            tape.add(mean_ce, neg_h)
        }
    }
}

// ---------------------------------------------------------------------------
// Fixed-point verification
// ---------------------------------------------------------------------------

/// Optimize a free logit table (no LM in the loop) under the distillation
/// loss with Adam, returning the fitted `[b, t, v]` table. Exercises the
/// loss's fixed point: the student distribution should land on the adjusted
/// teacher distribution at every contributing position.
pub fn fit_free_logit_table(
    teacher: &Tensor,
    targets: &[u32],
    gamma: f32,
    steps: usize,
) -> Result<Vec<f32>> {
    let shape = teacher.shape.clone();
    if shape.len() != 3 {
        return Error::shape("fit_free_logit_table: teacher must be [b, t, v]".to_string());
    }
    let mut table = teacher.data.clone();
    let mut m = vec![0.0f32; table.len()];
    let mut v = vec![0.0f32; table.len()];
    // short-horizon moments: the run is a few hundred deterministic steps
    let (b1, b2, eps) = (0.9f32, 0.99f32, 1e-8f32);
    for step in 1..=steps {
        // constant travel phase, then exponential decay to a fine polish
        let frac = step as f32 / steps as f32;
        let lr = if frac <= 0.4 {
            0.08
        } else {
            let u = (frac - 0.4) / 0.6;
            0.08 * (2e-4f32 / 0.08).powf(u)
        };
        let mut tape = GradTape::new();
        let student = tape.leaf(Tensor::new(shape.clone(), table.clone())?.with_grad());
        let loss = undial_loss(&mut tape, student, teacher, targets, gamma, None)?;
        tape.backward(loss)?;
        let g = tape.grad(student).expect("student grad");
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);
        for i in 0..table.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            table[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
    }
    Ok(table)
}

/// Worst per-position KL(p_adjusted || p_student) over shifted positions.
pub fn max_position_kl(
    student_table: &[f32],
    teacher: &Tensor,
    targets: &[u32],
    gamma: f32,
) -> Result<f64> {
    let (b, t, v) = (teacher.shape[0], teacher.shape[1], teacher.shape[2]);
    let ids = shifted_ids(targets, b, t);
    let mut worst = 0.0f64;
    for bi in 0..b {
        for ti in 0..t - 1 {
            let r = bi * (t - 1) + ti;
            let at = (bi * t + ti) * v;
            let adj = adjust_logits(&teacher.data[at..at + v], ids[r] as usize, gamma)?;
            let p_adj = tensor::softmax(&adj)?;
            let p_student = tensor::softmax(&student_table[at..at + v])?;
            worst = worst.max(tensor::kl_divergence(&p_adj, &p_student)?);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Pcg32;
    use crate::tensor::{kl_divergence, softmax};

    const LN_2: f64 = std::f64::consts::LN_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn leaf_logits(tape: &mut GradTape, shape: Vec<usize>, data: Vec<f32>) -> TensorId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn adjust_logits_examples() {
        // single-index subtraction
        assert_eq!(adjust_logits(&[2.0, 1.0, 0.0], 0, 2.0).unwrap(), vec![0.0, 1.0, 0.0]);
        // gamma = 0 is the identity
        let row = [3.0f32, -1.0, 0.5];
        assert_eq!(adjust_logits(&row, 1, 0.0).unwrap(), row.to_vec());
        // input not mutated
        let orig = [1.0f32, 2.0];
        let _ = adjust_logits(&orig, 0, 5.0).unwrap();
        assert_eq!(orig, [1.0, 2.0]);
        // frozen scalar-softmax oracle: softmax([3,1,1] - 4*e0) = softmax([-1,1,1])
        let adj = adjust_logits(&[3.0, 1.0, 1.0], 0, 4.0).unwrap();
        let p = softmax(&adj).unwrap();
        let expect = [0.063381, 0.468310, 0.468310];
        for (a, e) in p.iter().zip(expect) {
            assert!(close(*a as f64, e, 1e-4), "{p:?}");
        }
        assert!(adjust_logits(&[0.0, 0.0], 2, 1.0).is_err());
        assert!(adjust_logits(&[0.0, 0.0], 0, -1.0).is_err());
    }

    #[test]
    fn monotone_deemphasis_and_argmax_flip() {
        let row = [2.5f32, 1.0, -0.5, 0.3];
        let target = 0usize;
        let mut prev_pt = f64::INFINITY;
        let mut prev_rest = -1.0f64;
        for gamma in [0.0f32, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let p = softmax(&adjust_logits(&row, target, gamma).unwrap()).unwrap();
            let pt = p[target] as f64;
            let rest: f64 = p.iter().enumerate().filter(|(i, _)| *i != target).map(|(_, &x)| x as f64).sum();
            assert!(pt < prev_pt, "p_target not strictly decreasing at gamma={gamma}");
            assert!(rest > prev_rest, "rest mass not strictly increasing at gamma={gamma}");
            prev_pt = pt;
            prev_rest = rest;
        }
        // argmax flips to runner-up once gamma exceeds the gap
        let gap = 2.5 - 1.0;
        let flipped = adjust_logits(&row, target, gap + 0.1).unwrap();
        assert_eq!(crate::model::argmax_lowest(&flipped), 1);
        let not_yet = adjust_logits(&row, target, gap - 0.1).unwrap();
        assert_eq!(crate::model::argmax_lowest(&not_yet), 0);
    }

    #[test]
    fn undial_loss_closed_form_v2() {
        // teacher row [1,0], target 0, gamma 1, student [0,0] -> ln 2
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![1, 2, 2], vec![0.0, 0.0, 0.0, 0.0]);
        let teacher = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let targets = [9u32 % 2, 0]; // shifted target for position 0 is ids[1] = 0
        let loss = undial_loss(&mut tape, student, &teacher, &targets, 1.0, None).unwrap();
        assert!(close(tape.value(loss) as f64, LN_2, 1e-6));
    }

    #[test]
    fn undial_loss_equals_teacher_entropy_at_gamma_zero() {
        let mut rng = Pcg32::new(3, 0);
        let (b, t, v) = (2usize, 5usize, 7usize);
        let data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], data.clone());
        let teacher = Tensor::new(vec![b, t, v], data.clone()).unwrap();
        let loss = undial_loss(&mut tape, student, &teacher, &targets, 0.0, None).unwrap();
        // mean teacher entropy over shifted positions
        let mut h = 0.0;
        for bi in 0..b {
            for ti in 0..t - 1 {
                let row = &data[(bi * t + ti) * v..(bi * t + ti + 1) * v];
                h += tensor::entropy(&softmax(row).unwrap());
            }
        }
        h /= (b * (t - 1)) as f64;
        assert!(close(tape.value(loss) as f64, h, 1e-5));
        // and KL(p_adjusted || p_student) = 0 at every position
        for bi in 0..b {
            for ti in 0..t - 1 {
                let row = &data[(bi * t + ti) * v..(bi * t + ti + 1) * v];
                let p = softmax(row).unwrap();
                assert!(kl_divergence(&p, &p).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn undial_all_zero_mask_gives_zero_loss_and_grads() {
        let mut rng = Pcg32::new(5, 0);
        let (b, t, v) = (2usize, 4usize, 5usize);
        let data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let mask = vec![false; b * t];
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], data.clone());
        let teacher = Tensor::new(vec![b, t, v], data).unwrap();
        let loss = undial_loss(&mut tape, student, &teacher, &targets, 10.0, Some(&mask)).unwrap();
        assert_eq!(tape.value(loss), 0.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(student).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn fundial_all_ones_mask_is_bitwise_undial() {
        let mut rng = Pcg32::new(7, 0);
        let (b, t, v) = (3usize, 6usize, 8usize);
        let student_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let teacher_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let teacher = Tensor::new(vec![b, t, v], teacher_data).unwrap();

        let mut tape_a = GradTape::new();
        let s_a = leaf_logits(&mut tape_a, vec![b, t, v], student_data.clone());
        let plain = undial_loss(&mut tape_a, s_a, &teacher, &targets, 5.0, None).unwrap();

        let mut tape_b = GradTape::new();
        let s_b = leaf_logits(&mut tape_b, vec![b, t, v], student_data);
        let ones = vec![true; b * t];
        let focused = undial_loss(&mut tape_b, s_b, &teacher, &targets, 5.0, Some(&ones)).unwrap();

        assert_eq!(tape_a.value(plain).to_bits(), tape_b.value(focused).to_bits());
    }

    #[test]
    fn undial_partial_mask_zeroes_unmasked_positions() {
        let mut rng = Pcg32::new(9, 0);
        let (b, t, v) = (1usize, 5usize, 6usize);
        let student_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let teacher_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        // only the token at position 2 is a key token
        let mut mask = vec![false; b * t];
        mask[2] = true;
        let teacher = Tensor::new(vec![b, t, v], teacher_data).unwrap();
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], student_data);
        let loss = undial_loss(&mut tape, student, &teacher, &targets, 3.0, Some(&mask)).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(student).unwrap();
        // gradient may be nonzero only at shifted position 1 (predicts token 2)
        for ti in 0..t {
            let row = &g[ti * v..(ti + 1) * v];
            if ti == 1 {
                assert!(row.iter().any(|&x| x != 0.0));
            } else {
                assert!(row.iter().all(|&x| x == 0.0), "leak at position {ti}");
            }
        }
    }

    #[test]
    fn ga_objective_closed_forms() {
        // uniform model over v: objective = -ln v
        let (b, t, v) = (1usize, 3usize, 4usize);
        let mut tape = GradTape::new();
        let logits = leaf_logits(&mut tape, vec![b, t, v], vec![0.0; b * t * v]);
        let targets = [0u32, 1, 2];
        let loss = ga_objective(&mut tape, logits, &targets).unwrap();
        assert!(close(tape.value(loss) as f64, -(4.0f64.ln()), 1e-6));

        // p(target) = 0.25 at a single position -> objective = -1.3863
        let mut tape = GradTape::new();
        let row = vec![0.0f32, 0.0, 0.0, 0.0]; // uniform over 4 = 0.25 each
        let logits = leaf_logits(&mut tape, vec![1, 2, 4], [row.clone(), row].concat());
        let loss = ga_objective(&mut tape, logits, &[0, 2]).unwrap();
        assert!(close(tape.value(loss) as f64, -0.25f64.ln().abs(), 1e-4));

        // near-certain model: objective ~ 0
        let mut tape = GradTape::new();
        let mut data = vec![-30.0f32; 2 * 3];
        data[1] = 30.0; // position 0 row: target 1 certain
        let logits = leaf_logits(&mut tape, vec![1, 2, 3], data);
        let loss = ga_objective(&mut tape, logits, &[0, 1]).unwrap();
        assert!(tape.value(loss).abs() < 1e-5);
    }

    #[test]
    fn npo_loss_closed_form_at_equality() {
        let mut rng = Pcg32::new(13, 0);
        let (b, t, v) = (2usize, 4usize, 6usize);
        let data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let reference = Tensor::new(vec![b, t, v], data.clone()).unwrap();
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], data);
        // beta = 0.1 is the reported default
        let loss = npo_loss(&mut tape, student, &reference, &targets, 0.1).unwrap();
        assert!(close(tape.value(loss) as f64, 2.0 / 0.1 * LN_2, 1e-3));
        assert!(tape.value(loss) > 0.0);
    }

    #[test]
    fn npo_loss_vanishes_as_student_probability_drops() {
        // as p_student(target) -> 0 with the reference fixed, loss -> 0
        let (b, t, v) = (1usize, 2usize, 3usize);
        let reference = Tensor::new(vec![b, t, v], vec![0.0; b * t * v]).unwrap();
        let targets = [0u32, 1];
        let mut last = f32::INFINITY;
        for drop in [0.0f32, 20.0, 60.0, 150.0] {
            let mut tape = GradTape::new();
            let mut data = vec![0.0f32; b * t * v];
            data[1] = -drop; // suppress target token 1 at position 0
            let student = leaf_logits(&mut tape, vec![b, t, v], data);
            let loss = npo_loss(&mut tape, student, &reference, &targets, 0.1).unwrap();
            let val = tape.value(loss);
            assert!(val < last);
            last = val;
        }
        assert!(last < 1e-3, "loss did not approach zero: {last}");
    }

    #[test]
    fn npo_rejects_bad_beta_and_shapes() {
        let (b, t, v) = (1usize, 2usize, 3usize);
        let reference = Tensor::new(vec![b, t, v], vec![0.0; b * t * v]).unwrap();
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], vec![0.0; b * t * v]);
        assert!(matches!(
            npo_loss(&mut tape, student, &reference, &[0, 1], 0.0),
            Err(Error::InvalidArgument(_))
        ));
        let wrong = Tensor::new(vec![1, 2, 4], vec![0.0; 8]).unwrap();
        assert!(matches!(
            npo_loss(&mut tape, student, &wrong, &[0, 1], 0.1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn retain_regularizer_closed_forms() {
        // KLR at student == ref -> 0
        let mut rng = Pcg32::new(21, 0);
        let (b, t, v) = (2usize, 3usize, 5usize);
        let data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let reference = Tensor::new(vec![b, t, v], data.clone()).unwrap();
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![b, t, v], data);
        let klr = retain_regularizer(&mut tape, student, &reference, &targets, RetainReg::Klr).unwrap();
        assert!(tape.value(klr).abs() < 1e-5);

        // GDR with p(target) = 1 everywhere -> 0
        let mut tape = GradTape::new();
        let mut data = vec![-40.0f32; 1 * 2 * 3];
        data[2] = 40.0; // position 0: token 2 certain
        let student = leaf_logits(&mut tape, vec![1, 2, 3], data);
        let reference = Tensor::new(vec![1, 2, 3], vec![0.0; 6]).unwrap();
        let gdr = retain_regularizer(&mut tape, student, &reference, &[0, 2], RetainReg::Gdr).unwrap();
        assert!(tape.value(gdr).abs() < 1e-5);

        // KLR frozen oracle: ref row [1,0], student [0,0]
        // KL([0.731059, 0.268941] || [0.5, 0.5]) = ln2 - H(p) = 0.110937
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![1, 2, 2], vec![0.0; 4]);
        let reference = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let klr = retain_regularizer(&mut tape, student, &reference, &[0, 0], RetainReg::Klr).unwrap();
        let oracle = {
            let p = softmax(&[1.0, 0.0]).unwrap();
            kl_divergence(&p, &[0.5, 0.5]).unwrap()
        };
        assert!(close(oracle, 0.110937, 1e-5));
        assert!(close(tape.value(klr) as f64, oracle, 1e-5));

        // unknown mode
        let mut tape = GradTape::new();
        let student = leaf_logits(&mut tape, vec![1, 2, 2], vec![0.0; 4]);
        assert!(retain_regularizer(&mut tape, student, &reference, &[0, 0], RetainReg::None).is_err());
    }

    #[test]
    fn losses_finite_on_large_logits() {
        let mut rng = Pcg32::new(31, 0);
        let (b, t, v) = (2usize, 4usize, 8usize);
        for _ in 0..50 {
            let student_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let teacher_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-50.0, 50.0)).collect();
            let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
            let teacher = Tensor::new(vec![b, t, v], teacher_data).unwrap();

            let mut tape = GradTape::new();
            let student = leaf_logits(&mut tape, vec![b, t, v], student_data);
            let undial = undial_loss(&mut tape, student, &teacher, &targets, 10.0, None).unwrap();
            assert!(tape.value(undial).is_finite());
            let ga = ga_objective(&mut tape, student, &targets).unwrap();
            assert!(tape.value(ga).is_finite());
            let npo = npo_loss(&mut tape, student, &teacher, &targets, 0.1).unwrap();
            assert!(tape.value(npo).is_finite());
            let gdr = retain_regularizer(&mut tape, student, &teacher, &targets, RetainReg::Gdr).unwrap();
            assert!(tape.value(gdr).is_finite());
            let klr = retain_regularizer(&mut tape, student, &teacher, &targets, RetainReg::Klr).unwrap();
            assert!(tape.value(klr).is_finite());
        }
    }

    #[test]
    fn free_logit_table_converges_to_adjusted_target() {
        // distillation fixed point: optimizing logits directly drives
        // KL(p_adjusted || p_student) below 1e-4 at every shifted position
        let mut rng = Pcg32::new(41, 0);
        let (b, t, v) = (1usize, 4usize, 8usize);
        let gamma = 6.0f32;
        let teacher_data: Vec<f32> = (0..b * t * v).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let teacher = Tensor::new(vec![b, t, v], teacher_data).unwrap();
        let targets: Vec<u32> = (0..b * t).map(|_| rng.gen_range(v) as u32).collect();
        let table = fit_free_logit_table(&teacher, &targets, gamma, 500).unwrap();
        let worst = max_position_kl(&table, &teacher, &targets, gamma).unwrap();
        assert!(worst <= 1e-4, "worst per-position KL {worst}");
    }
}
