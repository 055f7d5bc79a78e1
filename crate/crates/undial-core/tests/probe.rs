use undial_core::checkpoint;
use undial_core::corpus::{read_jsonl, retain_records, Split};
use undial_core::metrics::{perplexity, DecodePolicy};
use undial_core::model::{eval_logits, TokenBatch};
use undial_core::tensor::log_prob;
use std::path::Path;

#[test]
#[ignore]
fn probe_retain_damage() {
    let records = read_jsonl(Path::new("/tmp/lab4/corpus.jsonl")).unwrap();
    let base = checkpoint::load(Path::new("/tmp/lab4/base.undl")).unwrap().params;
    let unl = checkpoint::load(Path::new("/tmp/lab4/runs/lr1e4_b32/model.undl")).unwrap().params;
    let retain: Vec<&[u32]> = records.iter().filter(|r| r.split == Split::Retain).map(|r| r.tokens.as_slice()).collect();

    // per-position NLL profile
    let v = base.config.vocab_size;
    let mut prof_base = vec![0.0f64; 63];
    let mut prof_unl = vec![0.0f64; 63];
    for chunk in retain.chunks(64) {
        let ids: Vec<u32> = chunk.iter().flat_map(|s| s.iter().copied()).collect();
        let batch = TokenBatch::new(ids, chunk.len(), 64).unwrap();
        let lb = eval_logits(&base, &batch).unwrap();
        let lu = eval_logits(&unl, &batch).unwrap();
        for bi in 0..batch.b {
            for t in 0..63 {
                let at = (bi * 64 + t) * v;
                let tgt = batch.ids[bi * 64 + t + 1] as usize;
                prof_base[t] -= log_prob(&lb.data[at..at + v], tgt);
                prof_unl[t] -= log_prob(&lu.data[at..at + v], tgt);
            }
        }
    }
    let n = retain.len() as f64;
    eprintln!("pos: base_nll -> unl_nll (delta)");
    for t in 0..63 {
        if t % 4 == 0 {
            eprintln!("  t={:2}: {:.3} -> {:.3} ({:+.3})", t, prof_base[t]/n, prof_unl[t]/n, (prof_unl[t]-prof_base[t])/n);
        }
    }

    // head-swap attribution: unlearned trunk + base head / base trunk + unlearned head
    let mut head_restored = unl.clone();
    for name in ["head.w", "head.b", "ln_f.g", "ln_f.b"] {
        head_restored.tensors.insert(name.into(), base.tensors[name].clone());
    }
    let mut head_only = base.clone();
    for name in ["head.w", "head.b", "ln_f.g", "ln_f.b"] {
        head_only.tensors.insert(name.into(), unl.tensors[name].clone());
    }
    let mut emb_restored = unl.clone();
    for name in ["tok_emb", "pos_emb"] {
        emb_restored.tensors.insert(name.into(), base.tensors[name].clone());
    }
    let p = DecodePolicy::Plain;
    eprintln!("retain PPL base          : {:.3}", perplexity(&base, &p, &retain).unwrap());
    eprintln!("retain PPL unlearned     : {:.3}", perplexity(&unl, &p, &retain).unwrap());
    eprintln!("retain PPL unl+base head : {:.3}", perplexity(&head_restored, &p, &retain).unwrap());
    eprintln!("retain PPL base+unl head : {:.3}", perplexity(&head_only, &p, &retain).unwrap());
    eprintln!("retain PPL unl+base emb  : {:.3}", perplexity(&emb_restored, &p, &retain).unwrap());
}
