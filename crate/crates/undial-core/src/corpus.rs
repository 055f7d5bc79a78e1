//! Deterministic synthetic corpora.
//!
//! Retain sequences follow a fixed-seed Markov source over a "common" token
//! sub-alphabet, giving the model general structure to preserve. Forget
//! sequences share that background but embed unique high-entropy payload
//! spans drawn from a disjoint "rare" sub-alphabet; the key mask is true
//! exactly on payload positions. The alphabet partition guarantees payload
//! n-grams never occur in retain data.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenBatch;
use crate::rng::{mix64, Pcg32};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    pub tokens: Vec<u32>,
    pub split: Split,
    pub key_mask: Vec<bool>,
    pub request_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_forget: usize,
    pub n_retain: usize,
    /// Fraction of forget-sequence positions covered by payload spans.
    pub entity_density: f64,
    pub seed: u64,
    /// Markov order of the background source.
    pub grammar_order: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 256,
            seq_len: 64,
            n_forget: 32,
            n_retain: 256,
            entity_density: 0.2,
            seed: 0,
            grammar_order: 2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 16 {
            return Err(Error::InvalidConfig(
                "vocab_size must be >= 16 to partition common/rare alphabets".into(),
            ));
        }
        if self.seq_len < 4 {
            return Err(Error::InvalidConfig("seq_len must be >= 4".into()));
        }
        if self.n_forget == 0 || self.n_retain == 0 {
            return Err(Error::InvalidConfig("n_forget and n_retain must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.entity_density) {
            return Err(Error::InvalidConfig("entity_density must be in [0, 1)".into()));
        }
        if self.grammar_order == 0 || self.grammar_order >= self.seq_len {
            return Err(Error::InvalidConfig("grammar_order must be in [1, seq_len)".into()));
        }
        Ok(())
    }

    /// Common (background) alphabet size; rare tokens are `[common, vocab)`.
    pub fn common_size(&self) -> usize {
        (self.vocab_size * 3) / 4
    }
}

// Heavily skewed successor weights keep the background low-entropy
// (~0.07 nats), so a trained model pins retain structure down crisply and
// fast, and only a few percent of retain positions depend on the
// low-probability branches that unlearning suppresses.
const BRANCH: usize = 4;
const BRANCH_WEIGHTS: [f64; BRANCH] = [0.99, 0.005, 0.003, 0.002];

// Forget backgrounds follow the same grammar but sample its unlikely
// branches: memorized text is atypical text. This also keeps the tokens the
// unlearning loss de-emphasizes away from the high-probability continuations
// retain sequences depend on.
const FORGET_BRANCH_WEIGHTS: [f64; BRANCH] = [0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

// Transitions depend on the state through coarse token classes. This keeps
// the effective state space small enough (CLASSES^order) that a few hundred
// sequences cover it many times over, so the background grammar is genuinely
// learnable rather than one-observation-per-state noise.
const CLASSES: u64 = 16;

/// Successor candidates for a Markov state, derived from a stateless PRF so
/// the transition table never has to be materialized.
fn successors(seed: u64, state: &[u32], common: usize) -> [u32; BRANCH] {
    let mut h = mix64(seed ^ 0x6d61726b);
    for &t in state {
        h = mix64(h ^ (t as u64 % CLASSES));
    }
    let mut rng = Pcg32::new(h, 0x73756363);
    let mut out = [0u32; BRANCH];
    for slot in out.iter_mut() {
        *slot = rng.gen_range(common) as u32;
    }
    out
}

fn markov_walk(cfg: &CorpusConfig, rng: &mut Pcg32, len: usize, weights: &[f64; BRANCH]) -> Vec<u32> {
    let common = cfg.common_size();
    let g = cfg.grammar_order;
    let mut tokens: Vec<u32> = (0..g.min(len)).map(|_| rng.gen_range(common) as u32).collect();
    while tokens.len() < len {
        let state = &tokens[tokens.len() - g..];
        let cands = successors(cfg.seed, state, common);
        let pick = rng.categorical(weights);
        tokens.push(cands[pick]);
    }
    tokens
}

/// Sample payload span placements: returns (start, len) pairs, non-overlapping,
/// never at position 0, separated by at least one background token when space
/// allows. The first span lands near the sequence start, so almost every
/// later position carries payload tokens in its context; that is what lets a
/// model tell a forget context apart from the shared background structure.
fn place_spans(rng: &mut Pcg32, seq_len: usize, total: usize) -> Vec<(usize, usize)> {
    let mut lens = Vec::new();
    let mut remaining = total;
    while remaining > 0 {
        let l = (3 + rng.gen_range(4)).min(remaining.max(1));
        lens.push(l.min(remaining));
        remaining = remaining.saturating_sub(l);
    }
    let mut occupied = vec![false; seq_len];
    occupied[0] = true; // keep a background prefix
    let mut spans = Vec::new();
    'next_span: for (i, &l) in lens.iter().enumerate() {
        if i == 0 && l + 6 <= seq_len {
            let start = 2 + rng.gen_range(3);
            occupied[start..start + l].iter_mut().for_each(|o| *o = true);
            spans.push((start, l));
            continue;
        }
        for attempt in 0..64 {
            if l + 1 > seq_len {
                break;
            }
            let start = 1 + rng.gen_range(seq_len - l);
            // require a free gap around the span except on the last-ditch tries
            let gap = usize::from(attempt < 48);
            let lo = start.saturating_sub(gap);
            let hi = (start + l + gap).min(seq_len);
            if occupied[lo..hi].iter().all(|&o| !o) {
                occupied[start..start + l].iter_mut().for_each(|o| *o = true);
                spans.push((start, l));
                continue 'next_span;
            }
        }
        // dense fallback: first free window
        for start in 1..seq_len.saturating_sub(l) {
            if occupied[start..start + l].iter().all(|&o| !o) {
                occupied[start..start + l].iter_mut().for_each(|o| *o = true);
                spans.push((start, l));
                continue 'next_span;
            }
        }
    }
    spans
}

/// Generate the full corpus: `n_retain` retain records then `n_forget`
/// forget records, bit-identical for identical configs.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SequenceRecord>> {
    cfg.validate()?;
    let common = cfg.common_size();
    let rare = cfg.vocab_size - common;
    if rare < 4 {
        return Err(Error::InvalidConfig(
            "vocab too small to partition a rare alphabet".into(),
        ));
    }
    let mut records = Vec::with_capacity(cfg.n_retain + cfg.n_forget);

    for i in 0..cfg.n_retain {
        let mut rng = Pcg32::new(cfg.seed, mix64(0x72657431 ^ i as u64));
        let tokens = markov_walk(cfg, &mut rng, cfg.seq_len, &BRANCH_WEIGHTS);
        records.push(SequenceRecord {
            key_mask: vec![false; tokens.len()],
            tokens,
            split: Split::Retain,
            request_id: None,
        });
    }

    let payload_total = ((cfg.entity_density * cfg.seq_len as f64).round() as usize)
        .min(cfg.seq_len - 1);
    for i in 0..cfg.n_forget {
        let mut rng = Pcg32::new(cfg.seed, mix64(0x666f7231 ^ i as u64));
        let mut tokens = markov_walk(cfg, &mut rng, cfg.seq_len, &FORGET_BRANCH_WEIGHTS);
        let mut key_mask = vec![false; tokens.len()];
        if cfg.entity_density > 0.0 {
            let total = payload_total.max(1);
            for (start, len) in place_spans(&mut rng, cfg.seq_len, total) {
                for p in start..start + len {
                    tokens[p] = (common + rng.gen_range(rare)) as u32;
                    key_mask[p] = true;
                }
            }
        }
        records.push(SequenceRecord {
            tokens,
            split: Split::Forget,
            key_mask,
            request_id: None,
        });
    }
    Ok(records)
}

/// Partition forget records into `k` folds with sizes differing by at most 1,
/// in deterministic order. Fold index is stamped into `request_id`.
pub fn split_sequential(forget: &[SequenceRecord], k: usize) -> Result<Vec<Vec<SequenceRecord>>> {
    if k == 0 {
        return Error::invalid("split_sequential: k must be >= 1");
    }
    if k > forget.len() {
        return Error::invalid(format!(
            "split_sequential: k={k} exceeds {} forget records",
            forget.len()
        ));
    }
    let n = forget.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for fold_idx in 0..k {
        let size = base + usize::from(fold_idx < extra);
        let mut fold: Vec<SequenceRecord> = forget[at..at + size].to_vec();
        for r in fold.iter_mut() {
            r.request_id = Some(fold_idx);
        }
        folds.push(fold);
        at += size;
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// Views and IO
// ---------------------------------------------------------------------------

pub fn forget_records(records: &[SequenceRecord]) -> Vec<&SequenceRecord> {
    records.iter().filter(|r| r.split == Split::Forget).collect()
}

pub fn retain_records(records: &[SequenceRecord]) -> Vec<&SequenceRecord> {
    records.iter().filter(|r| r.split == Split::Retain).collect()
}

/// Stack records into one `[n, t]` batch (records must share a length).
pub fn to_batch(records: &[&SequenceRecord]) -> Result<TokenBatch> {
    if records.is_empty() {
        return Error::invalid("to_batch: no records");
    }
    let t = records[0].tokens.len();
    if records.iter().any(|r| r.tokens.len() != t) {
        return Error::shape("to_batch: records have mixed lengths".to_string());
    }
    let ids: Vec<u32> = records.iter().flat_map(|r| r.tokens.iter().copied()).collect();
    let mask: Vec<bool> = records.iter().flat_map(|r| r.key_mask.iter().copied()).collect();
    TokenBatch::new(ids, records.len(), t)?.with_mask(mask)
}

pub fn write_jsonl(records: &[SequenceRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SequenceRecord>> {
    let f = fs::File::open(path)?;
    let mut records = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            vocab_size: 64,
            seq_len: 32,
            n_forget: 10,
            n_retain: 20,
            entity_density: 0.2,
            seed: 11,
            grammar_order: 2,
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_density_means_no_key_positions() {
        let cfg = CorpusConfig { entity_density: 0.0, ..small_cfg() };
        let records = generate_corpus(&cfg).unwrap();
        for r in records {
            assert!(r.key_mask.iter().all(|&m| !m));
            assert!(r.tokens.iter().all(|&t| (t as usize) < cfg.common_size()));
        }
    }

    #[test]
    fn forget_records_have_payload_and_partitioned_alphabet() {
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let common = cfg.common_size();
        for r in &records {
            assert_eq!(r.key_mask.len(), r.tokens.len());
            match r.split {
                Split::Forget => {
                    assert!(r.key_mask.iter().any(|&m| m), "forget record without payload");
                    for (i, &t) in r.tokens.iter().enumerate() {
                        assert_eq!(r.key_mask[i], (t as usize) >= common);
                    }
                }
                Split::Retain => {
                    assert!(r.tokens.iter().all(|&t| (t as usize) < common));
                    assert!(r.key_mask.iter().all(|&m| !m));
                }
            }
            assert!(r.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size));
        }
    }

    #[test]
    fn payload_trigrams_disjoint_from_retain() {
        // exhaustive n-gram scan oracle, n = 3
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let mut retain_trigrams: HashSet<[u32; 3]> = HashSet::new();
        for r in retain_records(&records) {
            for w in r.tokens.windows(3) {
                retain_trigrams.insert([w[0], w[1], w[2]]);
            }
        }
        for r in forget_records(&records) {
            // contiguous key-mask runs are the payload spans
            let mut i = 0;
            while i < r.tokens.len() {
                if r.key_mask[i] {
                    let start = i;
                    while i < r.tokens.len() && r.key_mask[i] {
                        i += 1;
                    }
                    let span = &r.tokens[start..i];
                    for w in span.windows(3) {
                        assert!(!retain_trigrams.contains(&[w[0], w[1], w[2]]));
                    }
                } else {
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn payload_coverage_near_density() {
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let target = (cfg.entity_density * cfg.seq_len as f64).round() as usize;
        for r in forget_records(&records) {
            let got = r.key_mask.iter().filter(|&&m| m).count();
            assert!(got >= 1 && got <= target, "payload count {got} vs target {target}");
        }
    }

    #[test]
    fn sequential_folds_partition() {
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let forget: Vec<SequenceRecord> = forget_records(&records).into_iter().cloned().collect();

        let single = split_sequential(&forget, 1).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].len(), forget.len());

        let folds = split_sequential(&forget, 4).unwrap();
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]); // 10 records over 4 folds
        let mut seen = HashSet::new();
        for (i, fold) in folds.iter().enumerate() {
            for r in fold {
                assert_eq!(r.request_id, Some(i));
                assert!(seen.insert(r.tokens.clone()), "record in two folds");
            }
        }
        assert_eq!(seen.len(), forget.len());

        assert!(split_sequential(&forget, 11).is_err());
        assert!(split_sequential(&forget, 0).is_err());
    }

    #[test]
    fn jsonl_roundtrip_lossless() {
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("undial-corpus-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corpus.jsonl");
        write_jsonl(&records, &path).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(records, back);
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_corpus(&CorpusConfig { vocab_size: 8, ..small_cfg() }).is_err());
        assert!(generate_corpus(&CorpusConfig { n_forget: 0, ..small_cfg() }).is_err());
        assert!(generate_corpus(&CorpusConfig { entity_density: 1.0, ..small_cfg() }).is_err());
    }

    #[test]
    fn to_batch_stacks_rows() {
        let cfg = small_cfg();
        let records = generate_corpus(&cfg).unwrap();
        let forget = forget_records(&records);
        let batch = to_batch(&forget).unwrap();
        assert_eq!(batch.b, cfg.n_forget);
        assert_eq!(batch.t, cfg.seq_len);
        assert_eq!(batch.row(3), forget[3].tokens.as_slice());
    }
}
