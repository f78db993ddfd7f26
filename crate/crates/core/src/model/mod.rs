//! Decoder-only transformers, the gated-MLP probe, initialization policies
//! and checkpoint persistence.

mod checkpoint;
mod probe;
mod transformer;

use std::path::Path;

pub use checkpoint::{Checkpoint, Header, ModelKind, TensorEntry};
pub use probe::{GatedProbe, ProbeConfig};
pub use transformer::{Block, KvCache, Transformer, TransformerConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where a value network's weights come from.
#[derive(Debug, Clone, Copy)]
pub enum ValueInit<'a> {
    /// Copy every weight from a pre-trained model of the same shape.
    Pretrained(&'a Transformer),
    /// Scaled-normal random weights.
    Random,
}

/// Builds a value network whose unembedding is zero, so its initial logits
/// are identically zero whatever the input.
///
/// A tied configuration is untied first: the output projection becomes a
/// separate zero matrix and the embedding keeps its pre-trained values.
pub fn init_value_network(
    init: ValueInit<'_>,
    config: TransformerConfig,
    seed: u64,
) -> Result<Transformer> {
    let mut config = config;
    config.tie_embeddings = false;
    let mut model = match init {
        ValueInit::Random => Transformer::random(config, seed)?,
        ValueInit::Pretrained(src) => {
            let mut target = Transformer::<f32>::zeros(config)?;
            let source: std::collections::BTreeMap<String, &Tensor> =
                src.params().into_iter().collect();
            let mut problems = Vec::new();
            for (name, slot) in target.params_mut() {
                if name == "unembed" {
                    continue;
                }
                match source.get(&name) {
                    Some(t) if t.shape() == slot.shape() => *slot = t.with_requires_grad(true),
                    Some(t) => problems.push(format!(
                        "{name}: expected {:?}, found {:?}",
                        slot.shape(),
                        t.shape()
                    )),
                    None => problems.push(format!("{name}: missing")),
                }
            }
            if src.config.vocab_size != config.vocab_size {
                problems.push(format!(
                    "vocab_size: expected {}, found {}",
                    config.vocab_size, src.config.vocab_size
                ));
            }
            if !problems.is_empty() {
                return Err(Error::IncompatibleShapes(problems.join("; ")));
            }
            target
        }
    };
    let (d, v) = (config.d_model, config.vocab_size);
    model.unembed = Some(Tensor::zeros(&[d, v]).with_requires_grad(true));
    Ok(model)
}

/// [`init_value_network`] from a checkpoint file.
pub fn init_value_network_from_checkpoint(
    path: impl AsRef<Path>,
    config: TransformerConfig,
    seed: u64,
) -> Result<Transformer> {
    let pretrained = Checkpoint::read(path)?.into_transformer()?;
    init_value_network(ValueInit::Pretrained(&pretrained), config, seed)
}
