#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use deltalogit::compose::{ConnectionScheme, GuidedModel, ValueModel};
use deltalogit::corpus::{gen_synthetic_corpus, CorpusKind, CorpusSpec, Demonstration};
use deltalogit::model::{
    init_value_network, GatedProbe, ProbeConfig, Transformer, TransformerConfig, ValueInit,
};
use deltalogit::tokenizer::Tokenizer;
use deltalogit::train::{pretrain_base, train_value, NamedBase, TrainingConfig, TrainingLog};

pub const VOCAB: usize = 128;
pub const VOCAB_X: usize = 112;
pub const VALUE_STEPS: usize = 1500;
pub const MAX_NEW: usize = 12;

/// Tokenizers, corpora and pretrained bases shared by the experiments.
pub struct World {
    pub tok: Arc<Tokenizer>,
    pub tok_x: Arc<Tokenizer>,
    pub plain: Vec<String>,
    pub train: Vec<Demonstration>,
    pub held: Vec<Demonstration>,
    pub tasks: Vec<Demonstration>,
    pub base_s: Arc<Transformer>,
    pub base_m: Arc<Transformer>,
    pub base_h: Arc<Transformer>,
    pub base_x: Arc<Transformer>,
    pub value_lm: Transformer,
}

pub fn pretrain_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 3e-3,
        max_steps: Some(1500),
        lambda_l1: 0.0,
        seed,
        ..TrainingConfig::default()
    }
}

fn pretrained(config: TransformerConfig, tok: &Tokenizer, plain: &[String], seed: u64) -> Transformer {
    let mut m = Transformer::random(config, seed).unwrap();
    pretrain_base(&mut m, tok, plain, &pretrain_config(seed)).unwrap();
    m
}

pub fn build_world() -> World {
    let plain = gen_synthetic_corpus(&CorpusSpec {
        kind: CorpusKind::Plain,
        grammar: "toy".into(),
        size: 4000,
        seed: 1,
    })
    .unwrap();
    let demos = gen_synthetic_corpus(&CorpusSpec {
        kind: CorpusKind::Demonstrations,
        grammar: "reverse".into(),
        size: 2200,
        seed: 2,
    })
    .unwrap();
    let mut texts = plain.texts();
    texts.extend(demos.texts());
    let tok = Arc::new(Tokenizer::train_bpe(&texts, VOCAB, 0).unwrap());

    // Second family: a separately sampled and differently sized corpus.
    let plain_x = gen_synthetic_corpus(&CorpusSpec {
        kind: CorpusKind::Plain,
        grammar: "toy".into(),
        size: 3000,
        seed: 101,
    })
    .unwrap();
    let mut texts_x: Vec<String> = plain_x.texts().iter().map(|s| s.to_string()).collect();
    texts_x.extend(demos.texts().into_iter().take(500));
    let tok_x = Arc::new(Tokenizer::train_bpe(&texts_x, VOCAB_X, 0).unwrap());

    let plain = plain.plain().unwrap().to_vec();
    let d = demos.demonstrations().unwrap();
    let (train, held) = d.split_at(2000);
    World {
        base_s: Arc::new(pretrained(TransformerConfig::base_s(VOCAB), &tok, &plain, 11)),
        base_m: Arc::new(pretrained(TransformerConfig::base_m(VOCAB), &tok, &plain, 21)),
        base_h: Arc::new(pretrained(TransformerConfig::base_m(VOCAB), &tok, &plain, 31)),
        base_x: Arc::new(pretrained(
            TransformerConfig::base_s(VOCAB_X),
            &tok_x,
            plain_x.plain().unwrap(),
            41,
        )),
        value_lm: pretrained(TransformerConfig::value_xs(VOCAB), &tok, &plain, 12),
        tasks: held[..100].to_vec(),
        train: train.to_vec(),
        held: held.to_vec(),
        tok,
        tok_x,
        plain,
    }
}

pub fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(build_world)
}

pub fn value_config(lambda: f64, seed: u64) -> TrainingConfig {
    TrainingConfig {
        learning_rate: 1e-3,
        max_steps: Some(VALUE_STEPS),
        lambda_l1: lambda,
        seed,
        ..TrainingConfig::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Base {
    S,
    M,
    H,
}

impl Base {
    pub fn named(self) -> NamedBase {
        let w = world();
        match self {
            Base::S => NamedBase::new("base-s", w.base_s.clone()),
            Base::M => NamedBase::new("base-m", w.base_m.clone()),
            Base::H => NamedBase::new("base-h", w.base_h.clone()),
        }
    }
}

/// A value-training experiment, identified by everything that affects it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Run {
    pub scheme: ConnectionScheme,
    pub bases: Vec<Base>,
    pub lambda_milli: u32,
}

impl Run {
    pub fn new(scheme: ConnectionScheme, bases: &[Base], lambda: f64) -> Self {
        Run {
            scheme,
            bases: bases.to_vec(),
            lambda_milli: (lambda * 1000.0).round() as u32,
        }
    }
}

pub struct Trained {
    pub guided: GuidedModel,
    pub log: TrainingLog,
    pub seconds: f64,
}

/// Trains from scratch, ignoring the memo.
pub fn train_fresh(run: &Run) -> Trained {
    let w = world();
    let first = run.bases[0].named();
    let value = match run.scheme {
        ConnectionScheme::LinearProbe => ValueModel::Probe(
            GatedProbe::new(
                ProbeConfig {
                    d_in: first.model.config.d_model,
                    d_ff: 96,
                    vocab_size: VOCAB,
                },
                7,
            )
            .unwrap(),
        ),
        _ => ValueModel::Transformer(
            init_value_network(
                ValueInit::Pretrained(&w.value_lm),
                TransformerConfig::value_xs(VOCAB),
                7,
            )
            .unwrap(),
        ),
    };
    let mut g = GuidedModel::new(
        first.model.clone(),
        value,
        run.scheme,
        w.tok.clone(),
        w.tok.clone(),
        None,
    )
    .unwrap();
    let bases: Vec<NamedBase> = run.bases.iter().map(|b| b.named()).collect();
    let start = std::time::Instant::now();
    let cfg = value_config(run.lambda_milli as f64 / 1000.0, 5);
    let log = train_value(&mut g, &bases, &w.train, &cfg).unwrap();
    Trained {
        guided: g,
        log,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Memoized [`train_fresh`].
pub fn trained(run: Run) -> &'static Trained {
    static MEMO: OnceLock<Mutex<HashMap<Run, &'static Trained>>> = OnceLock::new();
    let memo = MEMO.get_or_init(Default::default);
    let mut guard = memo.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(t) = guard.get(&run) {
        return t;
    }
    let t: &'static Trained = Box::leak(Box::new(train_fresh(&run)));
    guard.insert(run, t);
    t
}

/// `g`'s value network plugged into another base of the same vocabulary.
pub fn plug(g: &GuidedModel, base: &Arc<Transformer>) -> GuidedModel {
    g.with_base(base.clone()).unwrap()
}

pub fn base_alone(base: &Arc<Transformer>) -> GuidedModel {
    GuidedModel::base_only(base.clone(), world().tok.clone()).unwrap()
}

/// One line per criterion, then the assertion.
pub fn verdict(criterion: u32, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} criterion {criterion}: {detail}");
    eprintln!("{tag} criterion {criterion}: {detail}");
    assert!(pass, "criterion {criterion} failed: {detail}");
}
