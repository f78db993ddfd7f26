//! Train a value network on one base, then plug it into a larger base and
//! into a base with its own tokenizer through a vocabulary map.

mod common;

use std::sync::Arc;

use deltalogit::compose::{ConnectionScheme, GuidedModel, ValueModel};
use deltalogit::eval::{transfer_experiment, TransferTarget};
use deltalogit::model::{init_value_network, Transformer, TransformerConfig, ValueInit};
use deltalogit::tokenizer::Tokenizer;
use deltalogit::train::{pretrain_base, train_value, NamedBase, TrainingConfig};
use deltalogit::vocab_map::{Sparsify, VocabMap};
use deltalogit::Result;

fn main() -> Result<()> {
    let toy = common::toy("reverse")?;
    let small = common::pretrained(&toy, "base-s", 11, 800)?;
    let medium = common::pretrained(&toy, "base-m", 21, 800)?;

    let mut texts = toy.plain[..1500].to_vec();
    texts.extend(toy.train.iter().take(300).map(|d| format!("{} {}", d.prompt, d.response)));
    let tok_x = Arc::new(Tokenizer::train_bpe(&texts, 112, 3)?);
    let plain_x: Vec<String> = toy.plain.clone();
    let mut foreign = Transformer::random(TransformerConfig::base_s(tok_x.vocab_size()), 41)?;
    let cfg = TrainingConfig { learning_rate: 3e-3, lambda_l1: 0.0, max_steps: Some(800), ..TrainingConfig::default() };
    pretrain_base(&mut foreign, &tok_x, &plain_x, &cfg)?;
    let map = Arc::new(VocabMap::build(&tok_x, &toy.tok, &texts, Sparsify::default())?);

    let v = toy.tok.vocab_size();
    let value = init_value_network(ValueInit::Random, TransformerConfig::value_xs(v), 5)?;
    let mut g = GuidedModel::new(small.clone(), ValueModel::Transformer(value), ConnectionScheme::Residual, toy.tok.clone(), toy.tok.clone(), None)?;
    train_value(&mut g, &[NamedBase::new("base-s", small.clone())], &toy.train, &common::value_config(800))?;

    let targets = [
        TransferTarget { name: "base-s".into(), base: small, tokenizer: toy.tok.clone(), map: None },
        TransferTarget { name: "base-m".into(), base: medium, tokenizer: toy.tok.clone(), map: None },
        TransferTarget { name: "base-x".into(), base: Arc::new(foreign), tokenizer: tok_x, map: Some(map) },
    ];
    let table = transfer_experiment(&g, &targets, &toy.held[..50], &toy.held, 12)?;
    print!("{}", table.to_text());
    Ok(())
}
