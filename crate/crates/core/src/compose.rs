//! Logit-space composition of a frozen base model with a value network.
//!
//! The guided distribution at each position is `softmax(z_base·M + z_Δ)`,
//! where `M` is an optional base-to-value vocabulary map and `z_base` is
//! always detached so only the value network receives gradients. The value
//! network is wired to the base through a [`ConnectionScheme`].

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GatedProbe, KvCache, Transformer};
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::Tokenizer;
use crate::vocab_map::VocabMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionScheme {
    /// Value network sees only the tokens.
    Residual,
    /// Value network input is `p_base·W_e`.
    Cascade,
    /// Value network input is `p_base·W_e + h_embed`.
    CascadePlus,
    /// Gated-MLP probe over `p_base·W_e` of the base model.
    LinearProbe,
    /// `log p_expert - log p_reference` from a separately tuned pair.
    ProxyDelta,
}

impl ConnectionScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Self::Residual),
            "cascade" => Ok(Self::Cascade),
            "cascade+" | "cascade-plus" => Ok(Self::CascadePlus),
            "probe" | "linear-probe" => Ok(Self::LinearProbe),
            "proxy" | "proxy-delta" => Ok(Self::ProxyDelta),
            other => Err(Error::Config(format!("unknown connection scheme {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Residual => "residual",
            Self::Cascade => "cascade",
            Self::CascadePlus => "cascade+",
            Self::LinearProbe => "probe",
            Self::ProxyDelta => "proxy",
        }
    }

    fn is_cascade(&self) -> bool {
        matches!(self, Self::Cascade | Self::CascadePlus)
    }
}

/// The trainable (or fixed) half of a guided model.
#[derive(Debug, Clone)]
pub enum ValueModel {
    Transformer(Transformer),
    Probe(GatedProbe),
    Proxy {
        expert: Arc<Transformer>,
        reference: Arc<Transformer>,
    },
    /// No value network: the guided model is the base alone.
    None,
}

impl ValueModel {
    fn vocab_size(&self) -> Option<usize> {
        match self {
            ValueModel::Transformer(t) => Some(t.config.vocab_size),
            ValueModel::Probe(p) => Some(p.config.vocab_size),
            ValueModel::Proxy { expert, .. } => Some(expert.config.vocab_size),
            ValueModel::None => None,
        }
    }

    /// Parameters the optimizer may update.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            ValueModel::Transformer(t) => t.params_mut(),
            ValueModel::Probe(p) => p.params_mut(),
            ValueModel::Proxy { .. } | ValueModel::None => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            ValueModel::Transformer(t) => t.params(),
            ValueModel::Probe(p) => p.params(),
            ValueModel::Proxy { .. } | ValueModel::None => Vec::new(),
        }
    }
}

/// Whether the Residual scheme runs its two forwards one after the other
/// or on two threads joined before composition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionOrder {
    Sequential,
    #[default]
    Concurrent,
}

/// `p_base·W_e`, plus `h_embed` for [`ConnectionScheme::CascadePlus`].
pub fn cascade_input(
    p_base: &Tensor,
    w_e: &Tensor,
    h_embed: &Tensor,
    variant: ConnectionScheme,
) -> Result<Tensor> {
    let fused = p_base.matmul(w_e)?;
    match variant {
        ConnectionScheme::Cascade => {
            if fused.shape() != h_embed.shape() {
                return Err(Error::shape("cascade_input", fused.shape(), h_embed.shape()));
            }
            Ok(fused)
        }
        ConnectionScheme::CascadePlus => fused.add(h_embed),
        other => Err(Error::invalid(
            "cascade_input",
            format!("{} is not a cascade scheme", other.name()),
        )),
    }
}

/// `stop_gradient(z_base) + z_delta`.
pub fn compose_logits(z_base: &Tensor, z_delta: &Tensor) -> Result<Tensor> {
    z_base.detach().add(z_delta)
}

/// `stop_gradient(z_base)·M + z_delta`.
pub fn compose_logits_mapped(z_base: &Tensor, map: &VocabMap, z_delta: &Tensor) -> Result<Tensor> {
    if z_base.last_dim() != map.rows() || z_delta.last_dim() != map.cols() {
        return Err(Error::shape("compose_logits_mapped", z_base.shape(), z_delta.shape()));
    }
    map.map_rows(&z_base.detach())?.add(z_delta)
}

/// Proxy-tuning delta `log_softmax(z_expert) - log_softmax(z_base)`.
pub fn proxy_delta(z_expert: &Tensor, z_base: &Tensor) -> Result<Tensor> {
    if z_expert.shape() != z_base.shape() {
        return Err(Error::shape("proxy_delta", z_expert.shape(), z_base.shape()));
    }
    z_expert.log_softmax_rows()?.sub(&z_base.log_softmax_rows()?)
}

/// Logits of one guided forward over a batch.
#[derive(Debug, Clone)]
pub struct GuidedOutput {
    pub z_base: Tensor,
    pub z_delta: Option<Tensor>,
    pub z_post: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerateParams {
    pub max_new_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub greedy: bool,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            max_new_tokens: 32,
            temperature: 1.0,
            seed: 0,
            greedy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<u32>,
    /// Stopped by a length limit rather than an end-of-sequence token.
    pub truncated: bool,
}

/// Frozen base + value network + connection scheme + optional vocabulary
/// map.
#[derive(Debug, Clone)]
pub struct GuidedModel {
    pub base: Arc<Transformer>,
    pub value: ValueModel,
    pub scheme: ConnectionScheme,
    pub vocab_map: Option<Arc<VocabMap>>,
    pub base_tokenizer: Arc<Tokenizer>,
    pub value_tokenizer: Arc<Tokenizer>,
    pub order: ExecutionOrder,
    detach_base: bool,
    same_tokenizer: bool,
}

impl GuidedModel {
    pub fn new(
        base: Arc<Transformer>,
        value: ValueModel,
        scheme: ConnectionScheme,
        base_tokenizer: Arc<Tokenizer>,
        value_tokenizer: Arc<Tokenizer>,
        vocab_map: Option<Arc<VocabMap>>,
    ) -> Result<Self> {
        let same_tokenizer = Arc::ptr_eq(&base_tokenizer, &value_tokenizer)
            || base_tokenizer.checksum() == value_tokenizer.checksum();
        if !same_tokenizer && vocab_map.is_none() {
            return Err(Error::VocabMismatch(
                "base and value tokenizers differ but no vocabulary map was supplied".into(),
            ));
        }
        let value_vocab = value_tokenizer.vocab_size();
        let base_vocab = base_tokenizer.vocab_size();
        if base.config.vocab_size != base_vocab {
            return Err(Error::VocabMismatch(format!(
                "base model vocab {} vs base tokenizer {base_vocab}",
                base.config.vocab_size
            )));
        }
        if let Some(v) = value.vocab_size() {
            if v != value_vocab {
                return Err(Error::VocabMismatch(format!(
                    "value model vocab {v} vs value tokenizer {value_vocab}"
                )));
            }
        }
        if let Some(map) = &vocab_map {
            if map.rows() != base_vocab || map.cols() != value_vocab {
                return Err(Error::VocabMismatch(format!(
                    "map is {}x{}, tokenizers are {base_vocab}x{value_vocab}",
                    map.rows(),
                    map.cols()
                )));
            }
        }
        let compatible = matches!(
            (&value, scheme),
            (ValueModel::None, _)
                | (
                    ValueModel::Transformer(_),
                    ConnectionScheme::Residual
                        | ConnectionScheme::Cascade
                        | ConnectionScheme::CascadePlus
                )
                | (ValueModel::Probe(_), ConnectionScheme::LinearProbe)
                | (ValueModel::Proxy { .. }, ConnectionScheme::ProxyDelta)
        );
        if !compatible {
            return Err(Error::Config(format!(
                "value model does not fit the {} scheme",
                scheme.name()
            )));
        }
        if let (ValueModel::Probe(p), ConnectionScheme::LinearProbe) = (&value, scheme) {
            if p.config.d_in != base.config.d_model {
                return Err(Error::IncompatibleShapes(format!(
                    "probe d_in {} vs base d_model {}",
                    p.config.d_in, base.config.d_model
                )));
            }
        }
        Ok(GuidedModel {
            base,
            value,
            scheme,
            vocab_map,
            base_tokenizer,
            value_tokenizer,
            order: ExecutionOrder::default(),
            detach_base: true,
            same_tokenizer,
        })
    }

    /// The base model on its own, decoded through the same machinery.
    pub fn base_only(base: Arc<Transformer>, tokenizer: Arc<Tokenizer>) -> Result<Self> {
        Self::new(
            base,
            ValueModel::None,
            ConnectionScheme::Residual,
            tokenizer.clone(),
            tokenizer,
            None,
        )
    }

    /// Replaces the base model (plug-in transfer).
    pub fn with_base(&self, base: Arc<Transformer>) -> Result<Self> {
        let mut g = Self::new(
            base,
            self.value.clone(),
            self.scheme,
            self.base_tokenizer.clone(),
            self.value_tokenizer.clone(),
            self.vocab_map.clone(),
        )?;
        g.order = self.order;
        g.detach_base = self.detach_base;
        Ok(g)
    }

    /// Disables the stop-gradient on base logits. Only meaningful for
    /// checking that the stop-gradient is what keeps base gradients at zero.
    #[doc(hidden)]
    pub fn without_stop_gradient(mut self) -> Self {
        self.detach_base = false;
        self
    }

    pub fn value_vocab_size(&self) -> usize {
        self.value_tokenizer.vocab_size()
    }

    fn stop(&self, t: &Tensor) -> Tensor {
        if self.detach_base {
            t.detach()
        } else {
            t.clone()
        }
    }

    /// Guided logits over equal-length value-vocabulary sequences, laid out
    /// as `[batch·seq, vocab]`. Requires a shared vocabulary.
    pub fn forward_batch(&self, tokens: &[Vec<u32>]) -> Result<GuidedOutput> {
        let z_base = self.base.forward_batch(tokens)?;
        self.forward_batch_with_base(tokens, z_base)
    }

    /// As [`Self::forward_batch`] with base logits supplied by the caller.
    pub fn forward_batch_with_base(&self, tokens: &[Vec<u32>], z_base: Tensor) -> Result<GuidedOutput> {
        if !self.same_tokenizer {
            return Err(Error::VocabMismatch(
                "batched guided forward requires a shared vocabulary".into(),
            ));
        }
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        let zb = self.stop(&z_base);
        let z_delta = match (&self.value, self.scheme) {
            (ValueModel::None, _) => None,
            (ValueModel::Transformer(v), ConnectionScheme::Residual) => Some(v.forward_batch(tokens)?),
            (ValueModel::Transformer(v), scheme) if scheme.is_cascade() => {
                let flat: Vec<u32> = tokens.concat();
                let input = cascade_input(
                    &zb.softmax_rows()?,
                    &v.tok_emb,
                    &v.embed_tokens(&flat)?,
                    scheme,
                )?;
                Some(v.forward_embeddings(&input, batch, seq)?)
            }
            (ValueModel::Probe(p), ConnectionScheme::LinearProbe) => {
                let x = zb.softmax_rows()?.matmul(&self.stop(&self.base.tok_emb))?;
                Some(p.forward(&x)?)
            }
            (ValueModel::Proxy { expert, reference }, ConnectionScheme::ProxyDelta) => Some(
                proxy_delta(&expert.forward_batch(tokens)?, &reference.forward_batch(tokens)?)?,
            ),
            _ => unreachable!("scheme compatibility is checked at construction"),
        };
        let z_post = match &z_delta {
            Some(d) => zb.add(d)?,
            None => zb.clone(),
        };
        Ok(GuidedOutput {
            z_base,
            z_delta,
            z_post,
        })
    }

    /// Base-vocabulary context for a value-vocabulary context: the same ids
    /// under a shared tokenizer, otherwise a re-tokenization of its text.
    pub fn base_context(&self, value_ctx: &[u32]) -> Result<Vec<u32>> {
        if self.same_tokenizer {
            return Ok(value_ctx.to_vec());
        }
        let text = self.value_tokenizer.decode(value_ctx)?;
        let mut ctx = vec![self.base_tokenizer.bos()];
        ctx.extend(self.base_tokenizer.encode(&text));
        self.check_consistent(value_ctx, &ctx)?;
        Ok(ctx)
    }

    fn check_consistent(&self, value_ctx: &[u32], base_ctx: &[u32]) -> Result<()> {
        if self.same_tokenizer {
            if value_ctx != base_ctx {
                return Err(Error::ContextMismatch {
                    base: format!("{base_ctx:?}"),
                    value: format!("{value_ctx:?}"),
                });
            }
            return Ok(());
        }
        let base = self.base_tokenizer.decode(base_ctx)?;
        let value = self.value_tokenizer.decode(value_ctx)?;
        if base != value {
            return Err(Error::ContextMismatch { base, value });
        }
        Ok(())
    }

    /// Guided logits for the token following `context` (value vocabulary),
    /// with `base_context` the base-vocabulary view of the same text.
    pub fn guided_next_logits(&self, context: &[u32], base_context: &[u32]) -> Result<Vec<f32>> {
        self.check_consistent(context, base_context)?;
        let mut state = DecodeState::new(self);
        state.next_logits(self, context, Some(base_context))
    }

    /// Autoregressive decoding in the value vocabulary.
    pub fn generate(&self, prompt: &str, params: &GenerateParams) -> Result<Generation> {
        let tv = &self.value_tokenizer;
        let mut ctx = vec![tv.bos()];
        ctx.extend(tv.encode(prompt));
        let mut state = DecodeState::new(self);
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let max_len = self.max_context();
        let mut generated = Vec::new();
        let mut truncated = false;
        loop {
            if generated.len() >= params.max_new_tokens || ctx.len() >= max_len {
                truncated = true;
                break;
            }
            let z = match state.next_logits(self, &ctx, None) {
                Err(Error::SequenceTooLong { .. }) => {
                    truncated = true;
                    break;
                }
                other => other?,
            };
            let tok = choose_token(&z, params, &mut rng);
            if tok == tv.eos() {
                break;
            }
            ctx.push(tok);
            generated.push(tok);
        }
        Ok(Generation {
            text: tv.decode(&generated)?,
            tokens: generated,
            truncated,
        })
    }

    /// Greedy decoding of exactly `length` tokens from a bare `bos`,
    /// ignoring end-of-sequence. Used for timing.
    pub fn generate_fixed(&self, length: usize, seed: u64) -> Result<Vec<u32>> {
        let mut ctx = vec![self.value_tokenizer.bos()];
        if length + 1 > self.max_context() {
            return Err(Error::SequenceTooLong {
                len: length + 1,
                max: self.max_context(),
            });
        }
        let mut state = DecodeState::new(self);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GenerateParams::default();
        for _ in 0..length {
            let z = state.next_logits(self, &ctx, None)?;
            ctx.push(choose_token(&z, &params, &mut rng));
        }
        Ok(ctx.split_off(1))
    }

    fn max_context(&self) -> usize {
        let mut m = self.base.config.max_seq_len;
        match &self.value {
            ValueModel::Transformer(v) => m = m.min(v.config.max_seq_len),
            ValueModel::Proxy { expert, reference } => {
                m = m
                    .min(expert.config.max_seq_len)
                    .min(reference.config.max_seq_len)
            }
            _ => {}
        }
        m
    }
}

/// Greedy picks the lowest id among maximal logits; temperature 0 is
/// greedy.
pub fn choose_token(z: &[f32], params: &GenerateParams, rng: &mut impl Rng) -> u32 {
    if params.greedy || params.temperature <= 0.0 {
        return argmax(z);
    }
    let t = params.temperature as f32;
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f64> = z.iter().map(|&v| (((v - max) / t) as f64).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

pub fn argmax(z: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best as u32
}

fn softmax_vec(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f32 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

fn log_softmax_vec(z: &[f32]) -> Vec<f32> {
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<f32>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Incremental decoding caches for one generation.
struct DecodeState {
    base: KvCache,
    value: Option<KvCache>,
    expert: Option<KvCache>,
    reference: Option<KvCache>,
}

impl DecodeState {
    fn new(g: &GuidedModel) -> Self {
        let (value, expert, reference) = match &g.value {
            ValueModel::Transformer(v) => (Some(v.new_cache()), None, None),
            ValueModel::Proxy { expert, reference } => {
                (None, Some(expert.new_cache()), Some(reference.new_cache()))
            }
            _ => (None, None, None),
        };
        DecodeState {
            base: g.base.new_cache(),
            value,
            expert,
            reference,
        }
    }

    /// Raw and mapped base logits for the last position of `value_prefix`.
    fn base_row(
        g: &GuidedModel,
        cache: &mut KvCache,
        value_prefix: &[u32],
        base_override: Option<&[u32]>,
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let ctx = match base_override {
            Some(c) => c.to_vec(),
            None => g.base_context(value_prefix)?,
        };
        let raw = g.base.forward_tokens_cached(&ctx, cache)?;
        let mapped = match &g.vocab_map {
            Some(map) => map.map_logits(&raw)?,
            None => raw.clone(),
        };
        Ok((raw, mapped))
    }

    fn next_logits(
        &mut self,
        g: &GuidedModel,
        ctx: &[u32],
        base_override: Option<&[u32]>,
    ) -> Result<Vec<f32>> {
        let (z_base, z_delta) = match (&g.value, g.scheme) {
            (ValueModel::None, _) => {
                (Self::base_row(g, &mut self.base, ctx, base_override)?.1, None)
            }
            (ValueModel::Transformer(v), ConnectionScheme::Residual) => {
                let value_cache = self.value.as_mut().expect("value cache");
                let fed = value_cache.len();
                let run_value = |cache: &mut KvCache| -> Result<Vec<f32>> {
                    let h = no_grad(|| v.embed_tokens(&ctx[fed..]))?;
                    let z = v.forward_cached(&h, cache)?;
                    Ok(z.row(z.rows() - 1).to_vec())
                };
                let base_cache = &mut self.base;
                let (zb, zd) = match g.order {
                    ExecutionOrder::Sequential => {
                        let zb = Self::base_row(g, base_cache, ctx, base_override)?.1;
                        (zb, run_value(value_cache)?)
                    }
                    ExecutionOrder::Concurrent => std::thread::scope(|s| {
                        let handle =
                            s.spawn(|| Self::base_row(g, base_cache, ctx, base_override));
                        let zd = run_value(value_cache);
                        let zb = handle.join().expect("base forward panicked");
                        Ok::<_, Error>((zb?.1, zd?))
                    })?,
                };
                (zb, Some(zd))
            }
            (ValueModel::Transformer(v), scheme) if scheme.is_cascade() => {
                let value_cache = self.value.as_mut().expect("value cache");
                let mut last = None;
                // Each value position needs the base prediction made at that
                // position before the value network can consume it.
                for i in value_cache.len()..ctx.len() {
                    let over = if i + 1 == ctx.len() { base_override } else { None };
                    let (_, zb) = Self::base_row(g, &mut self.base, &ctx[..=i], over)?;
                    let zd = no_grad(|| -> Result<Tensor> {
                        let p = Tensor::from_vec(softmax_vec(&zb), &[1, zb.len()])?;
                        let h = v.embed_tokens(&ctx[i..=i])?;
                        let input = cascade_input(&p, &v.tok_emb, &h, scheme)?;
                        v.forward_cached(&input, value_cache)
                    })?;
                    last = Some((zb, zd.to_vec()));
                }
                let (zb, zd) = last.ok_or_else(|| {
                    Error::invalid("guided_next_logits", "context already consumed")
                })?;
                (zb, Some(zd))
            }
            (ValueModel::Probe(p), ConnectionScheme::LinearProbe) => {
                let (raw, mapped) = Self::base_row(g, &mut self.base, ctx, base_override)?;
                let zd = no_grad(|| -> Result<Tensor> {
                    let probs = Tensor::from_vec(softmax_vec(&raw), &[1, raw.len()])?;
                    p.forward(&probs.matmul(&g.base.tok_emb)?)
                })?;
                (mapped, Some(zd.to_vec()))
            }
            (ValueModel::Proxy { expert, reference }, ConnectionScheme::ProxyDelta) => {
                let zb = Self::base_row(g, &mut self.base, ctx, base_override)?.1;
                let ze = expert.forward_tokens_cached(ctx, self.expert.as_mut().unwrap())?;
                let zr = reference.forward_tokens_cached(ctx, self.reference.as_mut().unwrap())?;
                let zd = log_softmax_vec(&ze)
                    .iter()
                    .zip(log_softmax_vec(&zr))
                    .map(|(a, b)| a - b)
                    .collect();
                (zb, Some(zd))
            }
            _ => unreachable!("scheme compatibility is checked at construction"),
        };
        Ok(match z_delta {
            Some(d) => z_base.iter().zip(&d).map(|(a, b)| a + b).collect(),
            None => z_base,
        })
    }
}
