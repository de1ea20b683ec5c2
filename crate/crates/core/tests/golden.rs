//! Frozen outputs of a tiny fixed model. Regenerate with `MOLCPT_BLESS=1`
//! after an intentional numerical change.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use molcpt::config::RunConfig;
use molcpt::data::tokenizer::{encode, BOS, VOCAB_SIZE};
use molcpt::data::TaggedSequence;
use molcpt::losses::CorpusTag;
use molcpt::model::{ModelArch, Params, Transformer};
use molcpt::trainer::Trainer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Serialize, Deserialize)]
struct Golden {
    base_logits: Vec<f64>,
    step_losses: Vec<f64>,
    step_grad_norms: Vec<f64>,
    student_logits: Vec<f64>,
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny_model.json")
}

fn sequence(text: &str, tag: CorpusTag) -> TaggedSequence {
    let mut tokens = vec![BOS];
    tokens.extend(encode(text));
    let mut mask = vec![true; tokens.len()];
    mask[0] = false;
    TaggedSequence {
        id: text.into(),
        tokens,
        mask,
        tag,
        source: tag.to_string(),
        doc_ids: vec![text.into()],
    }
}

fn compute() -> Golden {
    let arch = ModelArch {
        vocab: VOCAB_SIZE,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_context: 32,
    };
    let base = Arc::new(Transformer::new(arch.clone(), Params::<f32>::init(&arch, &mut ChaCha8Rng::seed_from_u64(42))).unwrap());
    let probe = sequence("dose: 5 mg", CorpusTag::Domain);
    let base_logits = base.forward(&probe.tokens, None, false).unwrap().logits;

    let cfg = RunConfig {
        context: 32,
        adapter_rank: 2,
        alpha: 0.25,
        n_trunc: 8,
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(&cfg, base).unwrap();
    let batch = [
        sequence("dose: 5 mg", CorpusTag::Domain),
        sequence("what is rain?", CorpusTag::General),
    ];
    let refs: Vec<&TaggedSequence> = batch.iter().collect();
    let (mut step_losses, mut step_grad_norms) = (Vec::new(), Vec::new());
    for _ in 0..3 {
        let s = trainer.train_step(&refs, 1e-2).unwrap();
        step_losses.push(s.breakdown.blended_total);
        step_grad_norms.push(s.grad_norm);
    }
    let student_logits = trainer.bundle.forward_student(&probe.tokens, false).unwrap().logits;
    let sample = |m: &molcpt::linalg::Mat<f32>| m.as_slice().iter().step_by(97).map(|&v| v as f64).collect();
    Golden {
        base_logits: sample(&base_logits),
        step_losses,
        step_grad_norms,
        student_logits: sample(&student_logits),
    }
}

fn assert_close(name: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{name} length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= TOLERANCE * w.abs().max(1.0), "{name}[{i}]: got {g}, frozen {w}");
    }
}

#[test]
fn tiny_model_matches_frozen_outputs() {
    let got = compute();
    let path = golden_path();
    if std::env::var_os("MOLCPT_BLESS").is_some() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
        return;
    }
    let want: Golden = serde_json::from_str(&fs::read_to_string(&path).expect("golden file; bless to create")).unwrap();
    assert_close("base_logits", &got.base_logits, &want.base_logits);
    assert_close("step_losses", &got.step_losses, &want.step_losses);
    assert_close("step_grad_norms", &got.step_grad_norms, &want.step_grad_norms);
    assert_close("student_logits", &got.student_logits, &want.student_logits);
    // The first step starts from zero adapters, so its loss is the base loss.
    assert!(got.step_losses[2] < got.step_losses[0]);
}
