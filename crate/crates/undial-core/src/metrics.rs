//! Unlearning and utility metrics.
//!
//! Memorization accuracy and extraction likelihood follow the strided
//! per-position definitions (context lengths at multiples of the stride);
//! stride 1 is the exact full loop. Perplexity, n-gram repetition, and the
//! averaged KL distance to a reference model form the utility axis.
//!
//! Every metric accepts a [`DecodePolicy`] so decode-time baselines are
//! measured through the distribution they actually decode from.

use serde::{Deserialize, Serialize};

use crate::aux::{contrastive_decode_probs, dp_decode_probs, dp_decode_probs_literal};
use crate::checkpoint::check_compatible;
use crate::error::{Error, Result};
use crate::model::{argmax_lowest, eval_logits, ModelParams, TokenBatch};
use crate::tensor::{self, Tensor};

/// Sequences per forward pass during metric evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenMode {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(model || reference): penalizes mass the model puts where the
    /// reference does not.
    #[default]
    ModelToRef,
    RefToModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub n_gram: usize,
    pub stride: usize,
    /// Continuation length of the repetition probe.
    pub max_new_tokens: usize,
    #[serde(default)]
    pub gen_mode: GenMode,
    #[serde(default)]
    pub kl_direction: KlDirection,
    /// Per-split cap on sequences used for the generation-heavy metrics
    /// (extraction likelihood and the repetition probe). Deterministic
    /// prefix of the split; keeps large retain sets affordable.
    #[serde(default = "default_max_gen_sequences")]
    pub max_gen_sequences: usize,
}

fn default_max_gen_sequences() -> usize {
    64
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            n_gram: 3,
            stride: 8,
            max_new_tokens: 32,
            gen_mode: GenMode::Greedy,
            kl_direction: KlDirection::ModelToRef,
            max_gen_sequences: default_max_gen_sequences(),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gram == 0 {
            return Err(Error::InvalidConfig("n_gram must be >= 1".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if self.max_new_tokens == 0 || self.max_gen_sequences == 0 {
            return Err(Error::InvalidConfig("generation sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// How logits become the decoded distribution.
#[derive(Clone)]
pub enum DecodePolicy<'a> {
    Plain,
    Dp {
        lambda: f32,
        literal: bool,
    },
    Cd {
        alpha: f32,
        relu: bool,
        memo: &'a ModelParams,
    },
}

impl DecodePolicy<'_> {

    pub(crate) fn memo(&self) -> Option<&ModelParams> {
        match self {
            DecodePolicy::Cd { memo, .. } => Some(memo),
            _ => None,
        }
    }

    /// Decoded probability row.
    pub fn probs(&self, row: &[f32], memo_row: Option<&[f32]>) -> Result<Vec<f32>> {
        match self {
            DecodePolicy::Plain => tensor::softmax(row),
            DecodePolicy::Dp { lambda, literal } => {
                if *literal {
                    dp_decode_probs_literal(row, *lambda)
                } else {
                    dp_decode_probs(row, *lambda)
                }
            }
            DecodePolicy::Cd { alpha, relu, .. } => {
                let memo_row = memo_row
                    .ok_or_else(|| Error::InvalidArgument("cd policy needs memo logits".into()))?;
                contrastive_decode_probs(row, memo_row, *alpha, *relu)
            }
        }
    }

    /// log p(target) under the decoded distribution.
    fn log_prob(&self, row: &[f32], memo_row: Option<&[f32]>, target: usize) -> Result<f64> {
        match self {
            DecodePolicy::Plain => Ok(tensor::log_prob(row, target)),
            _ => {
                let p = self.probs(row, memo_row)?;
                Ok((p[target] as f64).max(tensor::LOG_CLAMP).ln())
            }
        }
    }

    /// Argmax token under the decoded distribution.
    fn argmax(&self, row: &[f32], memo_row: Option<&[f32]>) -> Result<usize> {
        match self {
            DecodePolicy::Plain => Ok(argmax_lowest(row)),
            _ => Ok(argmax_lowest(&self.probs(row, memo_row)?)),
        }
    }
}

/// Forward a set of same-length sequences in chunks; yields each chunk's
/// logits together with its row offset.
fn for_each_chunk(
    model: &ModelParams,
    seqs: &[&[u32]],
    mut f: impl FnMut(usize, &TokenBatch, &Tensor) -> Result<()>,
) -> Result<()> {
    if seqs.is_empty() {
        return Error::invalid("metric evaluation over an empty sequence set");
    }
    let t = seqs[0].len();
    if seqs.iter().any(|s| s.len() != t) {
        return Error::shape("metric sequences must share a length".to_string());
    }
    let mut at = 0;
    while at < seqs.len() {
        let hi = (at + EVAL_CHUNK).min(seqs.len());
        let ids: Vec<u32> = seqs[at..hi].iter().flat_map(|s| s.iter().copied()).collect();
        let batch = TokenBatch::new(ids, hi - at, t)?;
        let logits = eval_logits(model, &batch)?;
        f(at, &batch, &logits)?;
        at = hi;
    }
    Ok(())
}

/// Evaluated target positions: context lengths at multiples of `stride`,
/// capped at `max_t` inclusive.
fn strided_positions(stride: usize, max_t: usize) -> Vec<usize> {
    (1..=max_t).filter(|t| t % stride == 0 || stride == 1).collect()
}

// ---------------------------------------------------------------------------
// Memorization accuracy
// ---------------------------------------------------------------------------

/// Fraction of evaluated positions where the decoded argmax equals the true
/// next token. Positions are context lengths `t` in [1, T-1] at multiples of
/// the stride (all of them at stride 1).
pub fn memorization_accuracy(
    model: &ModelParams,
    policy: &DecodePolicy,
    tokens: &[u32],
    stride: usize,
) -> Result<f64> {
    Ok(ma_batch(model, policy, &[tokens], stride)?.0)
}

/// Mean per-sequence memorization accuracy over a set of sequences.
/// Returns (mean, per-sequence values).
pub fn ma_batch(
    model: &ModelParams,
    policy: &DecodePolicy,
    seqs: &[&[u32]],
    stride: usize,
) -> Result<(f64, Vec<f64>)> {
    if stride == 0 {
        return Error::invalid("stride must be >= 1");
    }
    if seqs.iter().any(|s| s.len() < 2) {
        return Error::invalid("memorization accuracy needs sequences of length >= 2");
    }
    let t_len = seqs[0].len();
    let positions = strided_positions(stride, t_len - 1);
    if positions.is_empty() {
        return Error::invalid(format!("stride {stride} leaves no evaluated positions"));
    }
    let v = model.config.vocab_size;
    let mut per_seq = vec![0.0f64; seqs.len()];
    let memo_logits_for = |batch: &TokenBatch| -> Result<Option<Tensor>> {
        match policy.memo() {
            Some(m) => Ok(Some(eval_logits(m, batch)?)),
            None => Ok(None),
        }
    };
    for_each_chunk(model, seqs, |offset, batch, logits| {
        let memo = memo_logits_for(batch)?;
        for bi in 0..batch.b {
            let mut hits = 0usize;
            for &t in &positions {
                let at = (bi * batch.t + t - 1) * v;
                let row = &logits.data[at..at + v];
                let memo_row = memo.as_ref().map(|m| &m.data[at..at + v]);
                if policy.argmax(row, memo_row)? == batch.ids[bi * batch.t + t] as usize {
                    hits += 1;
                }
            }
            per_seq[offset + bi] = hits as f64 / positions.len() as f64;
        }
        Ok(())
    })?;
    let mean = per_seq.iter().sum::<f64>() / per_seq.len() as f64;
    Ok((mean, per_seq))
}

// ---------------------------------------------------------------------------
// N-gram overlap and extraction likelihood
// ---------------------------------------------------------------------------

fn ngram_set(tokens: &[u32], n: usize) -> std::collections::HashSet<&[u32]> {
    if tokens.len() < n {
        return std::collections::HashSet::new();
    }
    tokens.windows(n).collect()
}

/// |ngrams(a) ∩ ngrams(b)| / |ngrams(a)|, n-grams deduplicated.
/// If b is shorter than n the overlap is 0.
pub fn ngram_overlap(a: &[u32], b: &[u32], n: usize) -> Result<f64> {
    if n == 0 {
        return Error::invalid("ngram_overlap: n must be >= 1");
    }
    if a.len() < n {
        return Error::invalid(format!(
            "ngram_overlap: first argument has {} tokens, needs >= {n}",
            a.len()
        ));
    }
    let sa = ngram_set(a, n);
    let sb = ngram_set(b, n);
    let inter = sa.iter().filter(|g| sb.contains(**g)).count();
    Ok(inter as f64 / sa.len() as f64)
}

/// Mean over strided prefix lengths `t` of the n-gram overlap between the
/// greedy continuation from `x[..t]` and the true suffix `x[t..]`.
pub fn extraction_likelihood(
    model: &ModelParams,
    policy: &DecodePolicy,
    tokens: &[u32],
    n: usize,
    stride: usize,
) -> Result<f64> {
    Ok(el_batch(model, policy, &[tokens], n, stride)?.0)
}

/// Batched extraction likelihood: all sequences are decoded together at each
/// strided prefix length. Returns (mean, per-sequence values).
pub fn el_batch(
    model: &ModelParams,
    policy: &DecodePolicy,
    seqs: &[&[u32]],
    n: usize,
    stride: usize,
) -> Result<(f64, Vec<f64>)> {
    if seqs.is_empty() {
        return Error::invalid("extraction likelihood over an empty set");
    }
    let t_len = seqs[0].len();
    if seqs.iter().any(|s| s.len() != t_len) {
        return Error::shape("extraction sequences must share a length".to_string());
    }
    if t_len <= n {
        return Error::invalid(format!(
            "extraction likelihood needs sequence length > n (got {t_len} <= {n})"
        ));
    }
    if stride == 0 {
        return Error::invalid("stride must be >= 1");
    }
    let prefixes = strided_positions(stride, t_len - n);
    if prefixes.is_empty() {
        return Error::invalid(format!("stride {stride} leaves no evaluated prefixes"));
    }
    let mut per_seq = vec![0.0f64; seqs.len()];
    for &t in &prefixes {
        let continuations = policy_decode(model, policy, seqs, t, t_len - t)?;
        for (si, cont) in continuations.iter().enumerate() {
            per_seq[si] += ngram_overlap(&cont[t..], &seqs[si][t..], n)?;
        }
    }
    for v in per_seq.iter_mut() {
        *v /= prefixes.len() as f64;
    }
    let mean = per_seq.iter().sum::<f64>() / per_seq.len() as f64;
    Ok((mean, per_seq))
}

/// Greedy decode under a policy: prefit `prefix_len` tokens of every
/// sequence, then extend by `n_new` argmax tokens.
pub fn policy_decode(
    model: &ModelParams,
    policy: &DecodePolicy,
    seqs: &[&[u32]],
    prefix_len: usize,
    n_new: usize,
) -> Result<Vec<Vec<u32>>> {
    if prefix_len == 0 || seqs.iter().any(|s| s.len() < prefix_len) {
        return Error::invalid("policy_decode: bad prefix length");
    }
    if prefix_len + n_new > model.config.context_len {
        return Error::invalid(format!(
            "policy_decode: {prefix_len}+{n_new} exceeds context_len {}",
            model.config.context_len
        ));
    }
    let v = model.config.vocab_size;
    let mut out = Vec::with_capacity(seqs.len());
    // decode in chunks to bound forward memory
    let mut at = 0;
    while at < seqs.len() {
        let hi = (at + EVAL_CHUNK).min(seqs.len());
        let mut rows: Vec<Vec<u32>> = seqs[at..hi].iter().map(|s| s[..prefix_len].to_vec()).collect();
        for _ in 0..n_new {
            let t = rows[0].len();
            let flat: Vec<u32> = rows.iter().flatten().copied().collect();
            let batch = TokenBatch::new(flat, rows.len(), t)?;
            let logits = eval_logits(model, &batch)?;
            let memo = match policy.memo() {
                Some(m) => Some(eval_logits(m, &batch)?),
                None => None,
            };
            for (bi, row_tokens) in rows.iter_mut().enumerate() {
                let base = (bi * t + t - 1) * v;
                let row = &logits.data[base..base + v];
                let memo_row = memo.as_ref().map(|m| &m.data[base..base + v]);
                row_tokens.push(policy.argmax(row, memo_row)? as u32);
            }
        }
        out.extend(rows);
        at = hi;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Perplexity, repetition, KL distance
// ---------------------------------------------------------------------------

/// exp(mean NLL) over all shifted positions of all sequences.
pub fn perplexity(model: &ModelParams, policy: &DecodePolicy, seqs: &[&[u32]]) -> Result<f64> {
    if seqs.is_empty() {
        return Error::invalid("perplexity over an empty set");
    }
    if seqs.iter().any(|s| s.len() < 2) {
        return Error::invalid("perplexity needs sequences of length >= 2");
    }
    let v = model.config.vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for_each_chunk(model, seqs, |_, batch, logits| {
        let memo = match policy.memo() {
            Some(m) => Some(eval_logits(m, batch)?),
            None => None,
        };
        for bi in 0..batch.b {
            for ti in 0..batch.t - 1 {
                let at = (bi * batch.t + ti) * v;
                let row = &logits.data[at..at + v];
                let memo_row = memo.as_ref().map(|m| &m.data[at..at + v]);
                let target = batch.ids[bi * batch.t + ti + 1] as usize;
                total -= policy.log_prob(row, memo_row, target)?;
                count += 1;
            }
        }
        Ok(())
    })?;
    // cap so collapsed models still report a finite value
    Ok((total / count as f64).min(700.0).exp())
}

/// 1 - distinct/total n-grams; 0 when fewer than one n-gram exists.
pub fn rep_n(tokens: &[u32], n: usize) -> f64 {
    if n == 0 || tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let distinct = ngram_set(tokens, n).len();
    1.0 - distinct as f64 / total as f64
}

/// Repetition probe: greedily continue each sequence from its half-length
/// prefix and report the mean rep_n of the generated tokens alone.
pub fn repetition_probe(
    model: &ModelParams,
    policy: &DecodePolicy,
    seqs: &[&[u32]],
    cfg: &MetricsConfig,
) -> Result<f64> {
    if seqs.is_empty() {
        return Error::invalid("repetition probe over an empty set");
    }
    let t_len = seqs[0].len();
    let prefix = (t_len / 2).max(1);
    let n_new = cfg.max_new_tokens.min(model.config.context_len.saturating_sub(prefix));
    if n_new < cfg.n_gram {
        return Error::invalid("repetition probe continuation shorter than n-gram".to_string());
    }
    let rows = policy_decode(model, policy, seqs, prefix, n_new)?;
    let mean = rows
        .iter()
        .map(|r| rep_n(&r[prefix..], cfg.n_gram))
        .sum::<f64>()
        / rows.len() as f64;
    Ok(mean)
}

/// Mean per-position KL divergence between the decoded model distribution
/// and the reference distribution over all shifted positions.
pub fn avg_kl_distance(
    model: &ModelParams,
    policy: &DecodePolicy,
    reference: &ModelParams,
    seqs: &[&[u32]],
    direction: KlDirection,
) -> Result<f64> {
    check_compatible(model, reference, "avg_kl_distance")?;
    if seqs.is_empty() {
        return Error::invalid("kl distance over an empty set");
    }
    let v = model.config.vocab_size;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for_each_chunk(model, seqs, |_, batch, logits| {
        let ref_logits = eval_logits(reference, batch)?;
        let memo = match policy.memo() {
            Some(m) => Some(eval_logits(m, batch)?),
            None => None,
        };
        for bi in 0..batch.b {
            for ti in 0..batch.t - 1 {
                let at = (bi * batch.t + ti) * v;
                let row = &logits.data[at..at + v];
                let memo_row = memo.as_ref().map(|m| &m.data[at..at + v]);
                let p_model = policy.probs(row, memo_row)?;
                let p_ref = tensor::softmax(&ref_logits.data[at..at + v])?;
                total += match direction {
                    KlDirection::ModelToRef => tensor::kl_divergence(&p_model, &p_ref)?,
                    KlDirection::RefToModel => tensor::kl_divergence(&p_ref, &p_model)?,
                };
                count += 1;
            }
        }
        Ok(())
    })?;
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One JSONL record of per-split metrics plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub ma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub el3: Option<f64>,
    pub ppl: f64,
    pub rep3: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_ref: Option<f64>,
    pub method: String,
    pub strength: f64,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget: SplitMetrics,
    pub retain: SplitMetrics,
}

impl MetricsReport {
    pub fn to_jsonl(&self) -> Result<String> {
        Ok(format!(
            "{}\n{}\n",
            serde_json::to_string(&self.forget)?,
            serde_json::to_string(&self.retain)?
        ))
    }
}

/// Run metadata stamped into every metrics record.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub method: String,
    pub strength: f64,
    pub step: u64,
    pub seed: u64,
}

/// Compute the metric block for one split. `with_el` controls the expensive
/// generation-based extraction metric; `reference` enables the KL column.
pub fn compute_split_metrics(
    model: &ModelParams,
    policy: &DecodePolicy,
    reference: Option<&ModelParams>,
    seqs: &[&[u32]],
    split: &str,
    cfg: &MetricsConfig,
    with_el: bool,
    meta: &RunMeta,
) -> Result<SplitMetrics> {
    cfg.validate()?;
    let (ma, _) = ma_batch(model, policy, seqs, cfg.stride)?;
    let gen_cap = cfg.max_gen_sequences.min(seqs.len());
    let el3 = if with_el {
        Some(el_batch(model, policy, &seqs[..gen_cap], cfg.n_gram, cfg.stride)?.0)
    } else {
        None
    };
    let ppl = perplexity(model, policy, seqs)?;
    let rep3 = repetition_probe(model, policy, &seqs[..gen_cap], cfg)?;
    let kl_ref = match reference {
        Some(r) => Some(avg_kl_distance(model, policy, r, seqs, cfg.kl_direction)?),
        None => None,
    };
    debug_assert!((0.0..=1.0).contains(&ma));
    debug_assert!(el3.is_none_or(|e| (0.0..=1.0).contains(&e)));
    debug_assert!((0.0..=1.0).contains(&rep3));
    Ok(SplitMetrics {
        split: split.to_string(),
        ma,
        el3,
        ppl,
        rep3,
        kl_ref,
        method: meta.method.clone(),
        strength: meta.strength,
        step: meta.step,
        seed: meta.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LmConfig;
    use crate::rng::Pcg32;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn tiny_model(seed: u64) -> ModelParams {
        ModelParams::init(
            &LmConfig {
                vocab_size: 12,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                context_len: 16,
                dropout: 0.0,
            },
            seed,
        )
        .unwrap()
    }

    // Brute-force per-position oracle: re-run the model on each prefix alone.
    fn ma_oracle(model: &ModelParams, tokens: &[u32], stride: usize) -> f64 {
        let v = model.config.vocab_size;
        let positions: Vec<usize> = (1..tokens.len())
            .filter(|t| t % stride == 0 || stride == 1)
            .collect();
        let mut hits = 0;
        for &t in &positions {
            let batch = TokenBatch::new(tokens[..t].to_vec(), 1, t).unwrap();
            let logits = eval_logits(model, &batch).unwrap();
            let row = &logits.data[(t - 1) * v..t * v];
            if argmax_lowest(row) == tokens[t] as usize {
                hits += 1;
            }
        }
        hits as f64 / positions.len() as f64
    }

    #[test]
    fn ma_matches_bruteforce_oracle_exactly() {
        let mut rng = Pcg32::new(7, 0);
        for trial in 0..30 {
            let model = tiny_model(100 + trial);
            let t = 6 + rng.gen_range(9);
            let tokens: Vec<u32> = (0..t).map(|_| rng.gen_range(12) as u32).collect();
            for stride in [1usize, 2, 4] {
                let got =
                    memorization_accuracy(&model, &DecodePolicy::Plain, &tokens, stride).unwrap();
                let expect = ma_oracle(&model, &tokens, stride);
                assert_eq!(got, expect, "trial {trial} stride {stride}");
            }
        }
    }

    #[test]
    fn ma_input_contracts() {
        let model = tiny_model(1);
        assert!(memorization_accuracy(&model, &DecodePolicy::Plain, &[1], 1).is_err());
        assert!(memorization_accuracy(&model, &DecodePolicy::Plain, &[1, 2], 0).is_err());
    }

    #[test]
    fn ngram_overlap_examples() {
        let a = [1u32, 2, 3];
        assert_eq!(ngram_overlap(&a, &a, 2).unwrap(), 1.0);
        // frozen hand enumeration: set(a) = {(1,2),(2,3)}, b = [1,2,5]
        assert_eq!(ngram_overlap(&a, &[1, 2, 5], 2).unwrap(), 0.5);
        // disjoint alphabets
        assert_eq!(ngram_overlap(&a, &[7, 8, 9], 2).unwrap(), 0.0);
        // |b| < n gives 0
        assert_eq!(ngram_overlap(&a, &[1], 2).unwrap(), 0.0);
        // |a| < n is an error
        assert!(ngram_overlap(&[1, 2], &a, 3).is_err());
        // asymmetry: overlap(a, b) != overlap(b, a)
        let x = [1u32, 2, 1, 2];
        let y = [1u32, 2, 3, 4, 5, 6];
        let fwd = ngram_overlap(&x, &y, 2).unwrap();
        let back = ngram_overlap(&y, &x, 2).unwrap();
        assert!(fwd != back, "{fwd} vs {back}");
    }

    #[test]
    fn ngram_overlap_matches_exhaustive_enumeration() {
        let mut rng = Pcg32::new(9, 0);
        for _ in 0..1000 {
            let n = 1 + rng.gen_range(3);
            let la = n + rng.gen_range(10);
            let lb = rng.gen_range(12);
            let a: Vec<u32> = (0..la).map(|_| rng.gen_range(5) as u32).collect();
            let b: Vec<u32> = (0..lb).map(|_| rng.gen_range(5) as u32).collect();
            let got = ngram_overlap(&a, &b, n).unwrap();
            // exhaustive set enumeration oracle
            let mut sa: Vec<&[u32]> = a.windows(n).collect();
            sa.sort_unstable();
            sa.dedup();
            let mut sb: Vec<&[u32]> = if b.len() >= n { b.windows(n).collect() } else { vec![] };
            sb.sort_unstable();
            sb.dedup();
            let inter = sa.iter().filter(|g| sb.contains(g)).count();
            let expect = inter as f64 / sa.len() as f64;
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn rep_n_examples() {
        assert_eq!(rep_n(&[1, 2, 3, 4], 2), 0.0);
        // frozen hand enumeration: [7,7,7,7] n=3 -> 2 total, 1 distinct
        assert_eq!(rep_n(&[7, 7, 7, 7], 3), 0.5);
        assert_eq!(rep_n(&[7, 7], 3), 0.0);
        // long periodic repetition approaches 1
        let long: Vec<u32> = std::iter::repeat([1u32, 2]).take(200).flatten().collect();
        assert!(rep_n(&long, 3) > 0.98);
    }

    #[test]
    fn perplexity_uniform_and_perfect_models() {
        // zero weights give exactly uniform logits -> ppl == V
        let cfg = LmConfig {
            vocab_size: 12,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            context_len: 16,
            dropout: 0.0,
        };
        let zero = ModelParams::zeros(&cfg).unwrap();
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1]];
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let ppl = perplexity(&zero, &DecodePolicy::Plain, &refs).unwrap();
        assert!(close(ppl, 12.0, 1e-3), "{ppl}");
        assert!(perplexity(&zero, &DecodePolicy::Plain, &[]).is_err());
    }

    #[test]
    fn perplexity_cross_checked_against_accumulation_oracle() {
        let model = tiny_model(42);
        let mut rng = Pcg32::new(17, 0);
        let seqs: Vec<Vec<u32>> = (0..2)
            .map(|_| (0..8).map(|_| rng.gen_range(12) as u32).collect())
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let got = perplexity(&model, &DecodePolicy::Plain, &refs).unwrap();
        // independent per-token log-prob accumulation over prefix forwards
        let mut total = 0.0;
        let mut count = 0;
        for s in &seqs {
            for t in 1..s.len() {
                let batch = TokenBatch::new(s[..t].to_vec(), 1, t).unwrap();
                let logits = eval_logits(&model, &batch).unwrap();
                let v = model.config.vocab_size;
                let row = &logits.data[(t - 1) * v..t * v];
                total -= tensor::log_prob(row, s[t] as usize);
                count += 1;
            }
        }
        let expect = (total / count as f64).exp();
        assert!(close(got, expect, 1e-9), "{got} vs {expect}");
    }

    #[test]
    fn el_perfect_memorizer_is_one() {
        // a model with zero weights repeats nothing, but the oracle case
        // "generated == suffix" can be forced by checking against the
        // sequence the decode itself produces
        let model = tiny_model(3);
        let mut seq = greedy_seed_sequence(&model, 9, 12);
        let el = extraction_likelihood(&model, &DecodePolicy::Plain, &seq, 3, 1).unwrap();
        assert!(close(el, 1.0, 1e-12), "self-consistent greedy sequence: {el}");
        // and a sequence over tokens the model never produces scores 0
        for t in seq.iter_mut().skip(1) {
            *t = 11 - *t % 2;
        }
        let el = extraction_likelihood(&model, &DecodePolicy::Plain, &seq, 3, 4).unwrap();
        assert!(el <= 0.5, "{el}");
    }

    // A sequence the model reproduces greedily from its first token.
    fn greedy_seed_sequence(model: &ModelParams, first: u32, len: usize) -> Vec<u32> {
        crate::model::greedy_decode(model, &[first], len - 1).unwrap()
    }

    #[test]
    fn el_matches_per_position_oracle_at_stride_one() {
        let model = tiny_model(8);
        let mut rng = Pcg32::new(19, 0);
        let t_len = 9;
        let tokens: Vec<u32> = (0..t_len).map(|_| rng.gen_range(12) as u32).collect();
        let n = 2;
        let got = extraction_likelihood(&model, &DecodePolicy::Plain, &tokens, n, 1).unwrap();
        // brute-force per-prefix oracle using single-sequence greedy decode
        let mut acc = 0.0;
        let mut cnt = 0;
        for t in 1..=t_len - n {
            let gen = crate::model::greedy_decode(&model, &tokens[..t], t_len - t).unwrap();
            acc += ngram_overlap(&gen[t..], &tokens[t..], n).unwrap();
            cnt += 1;
        }
        assert_eq!(got, acc / cnt as f64);
    }

    #[test]
    fn el_input_contracts() {
        let model = tiny_model(8);
        assert!(extraction_likelihood(&model, &DecodePolicy::Plain, &[1, 2, 3], 3, 1).is_err());
        assert!(extraction_likelihood(&model, &DecodePolicy::Plain, &[1, 2, 3, 4], 3, 9).is_err());
    }

    #[test]
    fn kl_distance_zero_on_self_and_asymmetric() {
        let model = tiny_model(5);
        let other = {
            let mut m = tiny_model(5);
            for t in m.tensors.values_mut() {
                for x in t.data.iter_mut() {
                    *x += 0.05;
                }
            }
            m
        };
        let mut rng = Pcg32::new(23, 0);
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|_| (0..8).map(|_| rng.gen_range(12) as u32).collect())
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let self_kl =
            avg_kl_distance(&model, &DecodePolicy::Plain, &model, &refs, KlDirection::ModelToRef)
                .unwrap();
        assert!(close(self_kl, 0.0, 1e-12));
        let fwd =
            avg_kl_distance(&model, &DecodePolicy::Plain, &other, &refs, KlDirection::ModelToRef)
                .unwrap();
        let back =
            avg_kl_distance(&model, &DecodePolicy::Plain, &other, &refs, KlDirection::RefToModel)
                .unwrap();
        assert!(fwd > 0.0 && back > 0.0);
        assert!((fwd - back).abs() > 1e-9, "directions coincide: {fwd} vs {back}");

        // incompatible configs are refused
        let incompatible = ModelParams::init(
            &LmConfig { vocab_size: 16, ..model.config.clone() },
            5,
        )
        .unwrap();
        assert!(matches!(
            avg_kl_distance(&model, &DecodePolicy::Plain, &incompatible, &refs, KlDirection::ModelToRef),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }

    #[test]
    fn metrics_are_pure() {
        let model = tiny_model(31);
        let mut rng = Pcg32::new(29, 0);
        let seqs: Vec<Vec<u32>> = (0..4)
            .map(|_| (0..10).map(|_| rng.gen_range(12) as u32).collect())
            .collect();
        let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
        let cfg = MetricsConfig { stride: 2, max_new_tokens: 6, ..MetricsConfig::default() };
        let meta = RunMeta { method: "none".into(), strength: 0.0, step: 0, seed: 0 };
        let a = compute_split_metrics(&model, &DecodePolicy::Plain, Some(&model), &refs, "retain", &cfg, true, &meta).unwrap();
        let b = compute_split_metrics(&model, &DecodePolicy::Plain, Some(&model), &refs, "retain", &cfg, true, &meta).unwrap();
        assert_eq!(a, b);
        assert!(a.to_owned().el3.is_some());
    }

    #[test]
    fn split_metrics_jsonl_field_names() {
        let m = SplitMetrics {
            split: "forget".into(),
            ma: 0.5,
            el3: Some(0.25),
            ppl: 3.0,
            rep3: 0.1,
            kl_ref: Some(0.01),
            method: "undial".into(),
            strength: 10.0,
            step: 100,
            seed: 7,
        };
        let line = serde_json::to_string(&m).unwrap();
        for key in ["split", "ma", "el3", "ppl", "rep3", "kl_ref", "method", "strength", "step", "seed"] {
            assert!(line.contains(&format!("\"{key}\"")), "missing {key} in {line}");
        }
        let back: SplitMetrics = serde_json::from_str(&line).unwrap();
        assert_eq!(back, m);
    }
}
