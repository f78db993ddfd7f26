//! Curriculum training across two frozen bases, then evaluation on a third.

mod common;

use deltalogit::compose::{ConnectionScheme, GuidedModel, ValueModel};
use deltalogit::eval::eval_task_accuracy;
use deltalogit::model::{init_value_network, TransformerConfig, ValueInit};
use deltalogit::train::{train_value, NamedBase};
use deltalogit::Result;

fn main() -> Result<()> {
    let toy = common::toy("reverse")?;
    let a = common::pretrained(&toy, "base-s", 11, 600)?;
    let b = common::pretrained(&toy, "base-m", 21, 600)?;
    let held_out = common::pretrained(&toy, "base-s", 31, 600)?;
    let v = toy.tok.vocab_size();
    let value = init_value_network(ValueInit::Random, TransformerConfig::value_xs(v), 5)?;
    let mut g = GuidedModel::new(a.clone(), ValueModel::Transformer(value), ConnectionScheme::CascadePlus, toy.tok.clone(), toy.tok.clone(), None)?;
    let bases = [NamedBase::new("base-s", a), NamedBase::new("base-m", b)];
    let log = train_value(&mut g, &bases, &toy.train, &common::value_config(800))?;
    for (name, steps) in log.steps_per_base() {
        println!("{name}: {steps} steps");
    }
    println!("last-stage mean ce {:.4}", log.mean_ce(700..800));

    let tasks = &toy.held[..50];
    let alone = GuidedModel::base_only(held_out.clone(), toy.tok.clone())?;
    let plugged = g.with_base(held_out)?;
    println!(
        "held-out base accuracy: alone {:.2}, with value {:.2}",
        eval_task_accuracy(&alone, tasks, 12)?,
        eval_task_accuracy(&plugged, tasks, 12)?
    );
    Ok(())
}
