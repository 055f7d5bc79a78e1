//! Tiny decoder-only autoregressive transformer.
//!
//! Pre-norm blocks with GELU MLPs, learned absolute positional embeddings,
//! causal masking, and a from-scratch AdamW optimizer. Small enough to
//! retrain from scratch in minutes on one CPU core.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::{GradTape, Tensor, TensorId};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    #[serde(default)]
    pub dropout: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 256,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 64,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
        }
        if self.context_len < 2 {
            return Err(Error::InvalidConfig("context_len must be >= 2".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Named parameter set. BTreeMap keeps name order deterministic for
/// serialization and optimizer traversal.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: LmConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fresh initialization: weights normal(0, 0.02), biases and LN offsets
    /// zero, LN gains one. Seed fixes every value.
    pub fn init(config: &LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Pcg32::new(seed, 0x70617261); // param stream
        let mut tensors = BTreeMap::new();
        let (v, d, mlp) = (config.vocab_size, config.d_model, config.mlp_dim());

        let normal = |shape: Vec<usize>, rng: &mut Pcg32| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal(0.02)).collect()).unwrap()
        };

        tensors.insert("tok_emb".into(), normal(vec![v, d], &mut rng));
        tensors.insert("pos_emb".into(), normal(vec![config.context_len, d], &mut rng));
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            tensors.insert(p("ln1.g"), Tensor::new(vec![d], vec![1.0; d])?);
            tensors.insert(p("ln1.b"), Tensor::zeros(vec![d]));
            tensors.insert(p("attn.wq"), normal(vec![d, d], &mut rng));
            tensors.insert(p("attn.bq"), Tensor::zeros(vec![d]));
            tensors.insert(p("attn.wk"), normal(vec![d, d], &mut rng));
            tensors.insert(p("attn.bk"), Tensor::zeros(vec![d]));
            tensors.insert(p("attn.wv"), normal(vec![d, d], &mut rng));
            tensors.insert(p("attn.bv"), Tensor::zeros(vec![d]));
            tensors.insert(p("attn.wo"), normal(vec![d, d], &mut rng));
            tensors.insert(p("attn.bo"), Tensor::zeros(vec![d]));
            tensors.insert(p("ln2.g"), Tensor::new(vec![d], vec![1.0; d])?);
            tensors.insert(p("ln2.b"), Tensor::zeros(vec![d]));
            tensors.insert(p("mlp.w1"), normal(vec![d, mlp], &mut rng));
            tensors.insert(p("mlp.b1"), Tensor::zeros(vec![mlp]));
            tensors.insert(p("mlp.w2"), normal(vec![mlp, d], &mut rng));
            tensors.insert(p("mlp.b2"), Tensor::zeros(vec![d]));
        }
        tensors.insert("ln_f.g".into(), Tensor::new(vec![d], vec![1.0; d])?);
        tensors.insert("ln_f.b".into(), Tensor::zeros(vec![d]));
        tensors.insert("head.w".into(), normal(vec![d, v], &mut rng));
        tensors.insert("head.b".into(), Tensor::zeros(vec![v]));

        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    /// All-zero parameters (used by shape-contract tests).
    pub fn zeros(config: &LmConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors.values_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(p)
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// True when both models share parameter names and shapes.
    pub fn compatible_with(&self, other: &ModelParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.shape == bt.shape)
    }
}

// ---------------------------------------------------------------------------
// Token batches
// ---------------------------------------------------------------------------

/// Row-major `[b, t]` token-id matrix.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub b: usize,
    pub t: usize,
    /// Optional per-position boolean mask, aligned with `ids`.
    pub key_mask: Option<Vec<bool>>,
}

impl TokenBatch {
    pub fn new(ids: Vec<u32>, b: usize, t: usize) -> Result<Self> {
        if ids.len() != b * t {
            return Error::shape(format!("token batch {}x{} vs {} ids", b, t, ids.len()));
        }
        Ok(TokenBatch {
            ids,
            b,
            t,
            key_mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.ids.len() {
            return Error::shape("key mask length mismatch".to_string());
        }
        self.key_mask = Some(mask);
        Ok(self)
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.t..(b + 1) * self.t]
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Handles to parameter leaves registered on a tape.
pub struct TapeParams {
    ids: BTreeMap<String, TensorId>,
}

impl TapeParams {
    /// Register every parameter as a tape leaf. `trainable` controls whether
    /// gradients are collected.
    pub fn register(tape: &mut GradTape, params: &ModelParams, trainable: bool) -> Self {
        let ids = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut leaf = t.clone();
                leaf.requires_grad = trainable;
                leaf.grad = None;
                (name.clone(), tape.leaf(leaf))
            })
            .collect();
        TapeParams { ids }
    }

    pub fn get(&self, name: &str) -> TensorId {
        self.ids[name]
    }
}

/// Run the transformer over a token batch, producing `[b, t, v]` logits.
///
/// Logits at position `t` depend only on tokens at positions `<= t`.
/// `rng` drives dropout and is only consulted when `config.dropout > 0`.
pub fn forward(
    tape: &mut GradTape,
    params: &TapeParams,
    config: &LmConfig,
    batch: &TokenBatch,
    mut rng: Option<&mut Pcg32>,
) -> Result<TensorId> {
    let (b, t) = (batch.b, batch.t);
    if t == 0 || b == 0 {
        return Error::invalid("forward: empty batch");
    }
    if t > config.context_len {
        return Error::invalid(format!(
            "forward: sequence length {t} exceeds context_len {}",
            config.context_len
        ));
    }
    if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Error::invalid(format!(
            "forward: token id {bad} out of range for vocab {}",
            config.vocab_size
        ));
    }

    let (d, h) = (config.d_model, config.n_heads);
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f32).sqrt();

    let tok = tape.embed(params.get("tok_emb"), &batch.ids)?;
    let pos_ids: Vec<u32> = (0..b).flat_map(|_| 0..t as u32).collect();
    let pos = tape.embed(params.get("pos_emb"), &pos_ids)?;
    let mut x = tape.add(tok, pos)?; // [b*t, d]
    if config.dropout > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            x = tape.dropout(x, config.dropout, r);
        }
    }

    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");

        // attention
        let normed = tape.layer_norm(x, params.get(&p("ln1.g")), params.get(&p("ln1.b")))?;
        let q = tape.matmul(normed, params.get(&p("attn.wq")))?;
        let q = tape.add_bias(q, params.get(&p("attn.bq")))?;
        let k = tape.matmul(normed, params.get(&p("attn.wk")))?;
        let k = tape.add_bias(k, params.get(&p("attn.bk")))?;
        let v = tape.matmul(normed, params.get(&p("attn.wv")))?;
        let v = tape.add_bias(v, params.get(&p("attn.bv")))?;

        let q = tape.permute_heads(q, b, t, h, dh)?; // [b*h, t, dh]
        let k = tape.permute_heads(k, b, t, h, dh)?;
        let v = tape.permute_heads(v, b, t, h, dh)?;
        let q = tape.scale(q, scale);

        let scores = tape.matmul_nt(q, k)?; // [b*h, t, t]
        let masked = tape.causal_mask(scores)?;
        let mut attn = tape.softmax_last(masked);
        if config.dropout > 0.0 {
            if let Some(r) = rng.as_deref_mut() {
                attn = tape.dropout(attn, config.dropout, r);
            }
        }
        let ctx = tape.matmul(attn, v)?; // [b*h, t, dh]
        let merged = tape.unpermute_heads(ctx, b, t, h, dh)?;
        let merged = tape.reshape(merged, vec![b * t, d])?;
        let proj = tape.matmul(merged, params.get(&p("attn.wo")))?;
        let proj = tape.add_bias(proj, params.get(&p("attn.bo")))?;
        x = tape.add(x, proj)?;

        // mlp
        let normed = tape.layer_norm(x, params.get(&p("ln2.g")), params.get(&p("ln2.b")))?;
        let hidden = tape.matmul(normed, params.get(&p("mlp.w1")))?;
        let hidden = tape.add_bias(hidden, params.get(&p("mlp.b1")))?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(hidden, params.get(&p("mlp.w2")))?;
        let out = tape.add_bias(out, params.get(&p("mlp.b2")))?;
        x = tape.add(x, out)?;
    }

    let x = tape.layer_norm(x, params.get("ln_f.g"), params.get("ln_f.b"))?;
    let logits = tape.matmul(x, params.get("head.w"))?;
    let logits = tape.add_bias(logits, params.get("head.b"))?;
    tape.reshape(logits, vec![b, t, config.vocab_size])
}

/// Evaluation-only forward: fresh throwaway tape, no gradients.
pub fn eval_logits(params: &ModelParams, batch: &TokenBatch) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let handles = TapeParams::register(&mut tape, params, false);
    // Dropout is a train-time regularizer; evaluation always runs it off.
    let cfg = LmConfig {
        dropout: 0.0,
        ..params.config.clone()
    };
    let logits = forward(&mut tape, &handles, &cfg, batch, None)?;
    Ok(tape.tensor(logits).clone())
}

/// Argmax with ties broken by the lowest token id.
pub fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Greedy decoding: append `n_new` argmax tokens to the prompt.
pub fn greedy_decode(params: &ModelParams, prompt: &[u32], n_new: usize) -> Result<Vec<u32>> {
    let out = greedy_decode_batch(params, &[prompt.to_vec()], n_new, None)?;
    Ok(out.into_iter().next().unwrap())
}

/// Row-level transform applied to final-position logits before argmax.
/// Used by decode-time unlearning baselines.
pub type LogitTransform<'a> = dyn Fn(&[f32]) -> Vec<f32> + 'a;

/// Batched greedy decoding over same-length prompts. When `transform` is
/// given, the argmax is taken over the transformed distribution instead.
pub fn greedy_decode_batch(
    params: &ModelParams,
    prompts: &[Vec<u32>],
    n_new: usize,
    transform: Option<&LogitTransform>,
) -> Result<Vec<Vec<u32>>> {
    if prompts.is_empty() {
        return Error::invalid("greedy_decode: no prompts");
    }
    let len0 = prompts[0].len();
    if len0 == 0 {
        return Error::invalid("greedy_decode: empty prompt");
    }
    if prompts.iter().any(|p| p.len() != len0) {
        return Error::invalid("greedy_decode: prompts must share a length");
    }
    if len0 + n_new > params.config.context_len {
        return Error::invalid(format!(
            "greedy_decode: {} prompt + {} new exceeds context_len {}",
            len0, n_new, params.config.context_len
        ));
    }
    let mut rows: Vec<Vec<u32>> = prompts.to_vec();
    let v = params.config.vocab_size;
    for _ in 0..n_new {
        let t = rows[0].len();
        let flat: Vec<u32> = rows.iter().flatten().copied().collect();
        let batch = TokenBatch::new(flat, rows.len(), t)?;
        let logits = eval_logits(params, &batch)?;
        for (bi, row_tokens) in rows.iter_mut().enumerate() {
            let row = &logits.data[(bi * t + t - 1) * v..(bi * t + t) * v];
            let next = match transform {
                Some(f) => argmax_lowest(&f(row)),
                None => argmax_lowest(row),
            };
            row_tokens.push(next as u32);
        }
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW state: decoupled weight decay, bias-corrected moments.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, lr: f32, weight_decay: f32) -> Self {
        let m = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = params
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one AdamW update from per-parameter gradients.
    pub fn apply(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, tensor) in params.tensors.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("missing gradient for {name}")))?;
            if grad.len() != tensor.numel() {
                return Error::shape(format!("gradient size mismatch for {name}"));
            }
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            // decoupled decay on matrices only (rank >= 2)
            let decay = if tensor.shape.len() >= 2 { self.weight_decay } else { 0.0 };
            for i in 0..grad.len() {
                let g = grad[i];
                if decay != 0.0 {
                    tensor.data[i] *= 1.0 - self.lr * decay;
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Builds the loss for one batch given the tape and the `[b, t, v]` logits.
pub type Objective<'a> =
    dyn FnMut(&mut GradTape, TensorId, &TokenBatch) -> Result<TensorId> + 'a;

/// One training step: forward, objective, backward, AdamW. Returns the
/// pre-update loss. On a non-finite loss the step is not applied.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &TokenBatch,
    objective: &mut Objective,
    dropout_rng: Option<&mut Pcg32>,
) -> Result<f64> {
    let mut tape = GradTape::new();
    let handles = TapeParams::register(&mut tape, params, true);
    let logits = forward(&mut tape, &handles, &params.config, batch, dropout_rng)?;
    let loss_id = objective(&mut tape, logits, batch)?;
    if !tape.tensor(loss_id).is_scalar() {
        return Error::invalid("objective must produce a scalar loss");
    }
    let loss = tape.value(loss_id) as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step + 1,
            value: loss,
        });
    }
    tape.backward(loss_id)?;
    let grads: BTreeMap<String, Vec<f32>> = params
        .tensors
        .keys()
        .map(|name| {
            let id = handles.get(name);
            (name.clone(), tape.grad(id).expect("param grad").to_vec())
        })
        .collect();
    opt.apply(params, &grads)?;
    Ok(loss)
}

/// Mean NLL of next-token prediction (shifted alignment) as a tape scalar.
pub fn shifted_nll_mean(tape: &mut GradTape, logits: TensorId, batch: &TokenBatch) -> Result<TensorId> {
    let (b, t) = (batch.b, batch.t);
    if t < 2 {
        return Error::invalid("shifted objectives need t >= 2");
    }
    let sliced = tape.slice_time(logits, 0, t - 1)?;
    let v = tape.shape(sliced)[2];
    let flat = tape.reshape(sliced, vec![b * (t - 1), v])?;
    let targets = shifted_targets(batch);
    let nll = tape.nll_rows(flat, &targets)?;
    Ok(tape.mean_all(nll))
}

/// Target token at shifted row (b, t) is `ids[b, t+1]`.
pub fn shifted_targets(batch: &TokenBatch) -> Vec<u32> {
    let (b, t) = (batch.b, batch.t);
    let mut out = Vec::with_capacity(b * (t - 1));
    for bi in 0..b {
        out.extend_from_slice(&batch.ids[bi * t + 1..(bi + 1) * t]);
    }
    out
}
