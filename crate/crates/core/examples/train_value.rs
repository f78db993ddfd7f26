//! Train a residual value network against one frozen base and decode with it.

mod common;

use deltalogit::compose::{ConnectionScheme, GenerateParams, GuidedModel, ValueModel};
use deltalogit::eval::{eval_mean_abs_delta, eval_perplexity, eval_task_accuracy};
use deltalogit::model::{init_value_network, TransformerConfig, ValueInit};
use deltalogit::train::{train_value_with, NamedBase};
use deltalogit::Result;

fn main() -> Result<()> {
    let toy = common::toy("reverse")?;
    let base = common::pretrained(&toy, "base-s", 11, 800)?;
    let value_lm = common::pretrained(&toy, "value-xs", 12, 800)?;
    let v = toy.tok.vocab_size();
    let value = init_value_network(ValueInit::Pretrained(&value_lm), TransformerConfig::value_xs(v), 0)?;
    let mut g = GuidedModel::new(
        base.clone(),
        ValueModel::Transformer(value),
        ConnectionScheme::Residual,
        toy.tok.clone(),
        toy.tok.clone(),
        None,
    )?;
    let alone = GuidedModel::base_only(base.clone(), toy.tok.clone())?;
    let tasks = &toy.held[..50];
    println!("before: ppl {:.3}, accuracy {:.2}", eval_perplexity(&g, &toy.held, true)?, eval_task_accuracy(&g, tasks, 12)?);

    let log = train_value_with(&mut g, &[NamedBase::new("base-s", base)], &toy.train, &common::value_config(800), |r| {
        if r.step % 100 == 0 {
            println!("step {:4} loss {:.4} ce {:.4} l1 {:.4} lr {:.2e}", r.step, r.loss, r.ce, r.l1, r.lr);
        }
    })?;
    println!("base unchanged: {}", log.base_checksums_before == log.base_checksums_after);
    println!(
        "after: ppl {:.3}, accuracy {:.2} (base alone {:.2}), mean |delta| {:.3}",
        eval_perplexity(&g, &toy.held, true)?,
        eval_task_accuracy(&g, tasks, 12)?,
        eval_task_accuracy(&alone, tasks, 12)?,
        eval_mean_abs_delta(&g, &toy.held)?
    );
    for d in &toy.held[..3] {
        let out = g.generate(&d.prompt, &GenerateParams { max_new_tokens: 12, ..GenerateParams::default() })?;
        println!("{:?} -> {:?} (want {:?})", d.prompt, out.text, d.response);
    }
    Ok(())
}
