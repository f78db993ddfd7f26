#![allow(dead_code)]

use std::sync::Arc;

use deltalogit::corpus::{gen_synthetic_corpus, CorpusKind, CorpusSpec, Demonstration};
use deltalogit::model::{Transformer, TransformerConfig};
use deltalogit::tokenizer::Tokenizer;
use deltalogit::train::{pretrain_base, TrainingConfig};
use deltalogit::Result;

pub const VOCAB: usize = 128;

pub struct Toy {
    pub tok: Arc<Tokenizer>,
    pub plain: Vec<String>,
    pub train: Vec<Demonstration>,
    pub held: Vec<Demonstration>,
}

pub fn toy(task: &str) -> Result<Toy> {
    let plain = gen_synthetic_corpus(&CorpusSpec {
        kind: CorpusKind::Plain,
        grammar: "toy".into(),
        size: 2000,
        seed: 1,
    })?;
    let demos = gen_synthetic_corpus(&CorpusSpec {
        kind: CorpusKind::Demonstrations,
        grammar: task.into(),
        size: 1100,
        seed: 2,
    })?;
    let mut texts = plain.texts();
    texts.extend(demos.texts());
    let tok = Arc::new(Tokenizer::train_bpe(&texts, VOCAB, 0)?);
    let d = demos.demonstrations()?;
    Ok(Toy {
        tok,
        plain: plain.plain()?.to_vec(),
        train: d[..1000].to_vec(),
        held: d[1000..].to_vec(),
    })
}

/// Pretrains a preset on the plain corpus and returns it frozen.
pub fn pretrained(toy: &Toy, preset: &str, seed: u64, steps: usize) -> Result<Arc<Transformer>> {
    let mut m = Transformer::random(TransformerConfig::preset(preset, toy.tok.vocab_size())?, seed)?;
    let cfg = TrainingConfig {
        learning_rate: 3e-3,
        lambda_l1: 0.0,
        max_steps: Some(steps),
        seed,
        ..TrainingConfig::default()
    };
    let rep = pretrain_base(&mut m, &toy.tok, &toy.plain, &cfg)?;
    println!("pretrained {preset}: ppl {:.2} -> {:.2}", rep.initial_ppl, rep.final_ppl);
    Ok(Arc::new(m))
}

pub fn value_config(steps: usize) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-3,
        max_steps: Some(steps),
        ..TrainingConfig::default()
    }
}
