use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{attention_rows, no_grad, CausalAttention, Scalar, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl TransformerConfig {
    /// Small base model.
    pub fn base_s(vocab_size: usize) -> Self {
        TransformerConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 192,
            vocab_size,
            max_seq_len: 64,
            tie_embeddings: false,
        }
    }

    /// Larger base model sharing a vocabulary with [`Self::base_s`].
    pub fn base_m(vocab_size: usize) -> Self {
        TransformerConfig {
            d_model: 96,
            n_layers: 3,
            n_heads: 4,
            d_ff: 288,
            vocab_size,
            max_seq_len: 64,
            tie_embeddings: false,
        }
    }

    /// Value network, smaller than either base.
    pub fn value_xs(vocab_size: usize) -> Self {
        TransformerConfig {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 144,
            vocab_size,
            max_seq_len: 64,
            tie_embeddings: false,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "base-s" => Ok(Self::base_s(vocab_size)),
            "base-m" => Ok(Self::base_m(vocab_size)),
            "value-xs" => Ok(Self::value_xs(vocab_size)),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_ff,
            self.vocab_size,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block<T: Scalar = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

/// Pre-norm causal decoder with SiLU-gated MLPs and learned absolute
/// position embeddings.
#[derive(Debug, Clone)]
pub struct Transformer<T: Scalar = f32> {
    pub config: TransformerConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    /// `[d_model×vocab]`; absent when tied to `tok_emb`.
    pub unembed: Option<Tensor<T>>,
}

/// Cached keys and values for incremental decoding.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar = f32> {
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    /// Token ids fed so far, when the cache is driven by tokens.
    pub tokens: Vec<u32>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            len: 0,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position at or after `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        let d = if self.len == 0 { 0 } else { self.keys[0].len() / self.len };
        for k in self.keys.iter_mut().chain(self.values.iter_mut()) {
            k.truncate(len * d);
        }
        self.tokens.truncate(len);
        self.len = len;
    }
}

fn linear<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
    Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng).with_requires_grad(true)
}

fn ones<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::full(&[n], T::one()).with_requires_grad(true)
}

impl<T: Scalar> Transformer<T> {
    /// Scaled-normal initialization; residual output projections are shrunk
    /// by `1/sqrt(2·n_layers)`.
    pub fn random(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let TransformerConfig {
            d_model: d,
            d_ff,
            vocab_size: v,
            max_seq_len,
            n_layers,
            ..
        } = config;
        let tok_emb = Tensor::randn(&[v, d], 0.02, &mut rng).with_requires_grad(true);
        let pos_emb = Tensor::randn(&[max_seq_len, d], 0.02, &mut rng).with_requires_grad(true);
        let resid = 1.0 / (2.0 * n_layers as f64).sqrt();
        let blocks = (0..n_layers)
            .map(|_| Block {
                attn_norm: ones(d),
                wq: linear(&mut rng, d, d, 1.0),
                wk: linear(&mut rng, d, d, 1.0),
                wv: linear(&mut rng, d, d, 1.0),
                wo: linear(&mut rng, d, d, resid),
                mlp_norm: ones(d),
                w_gate: linear(&mut rng, d, d_ff, 1.0),
                w_up: linear(&mut rng, d, d_ff, 1.0),
                w_down: linear(&mut rng, d_ff, d, resid),
            })
            .collect();
        let unembed = (!config.tie_embeddings).then(|| linear(&mut rng, d, v, 1.0));
        Ok(Transformer {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm: ones(d),
            unembed,
        })
    }

    /// Every parameter zero (norm gains included).
    pub fn zeros(config: TransformerConfig) -> Result<Self> {
        let mut m = Self::random(config, 0)?;
        for (_, p) in m.params_mut() {
            *p = Tensor::zeros(p.shape()).with_requires_grad(true);
        }
        Ok(m)
    }

    /// Named parameters in a stable order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &b.attn_norm),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("mlp_norm", &b.mlp_norm),
                ("w_gate", &b.w_gate),
                ("w_up", &b.w_up),
                ("w_down", &b.w_down),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(u) = &self.unembed {
            out.push(("unembed".to_string(), u));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in [
                ("attn_norm", &mut b.attn_norm),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("mlp_norm", &mut b.mlp_norm),
                ("w_gate", &mut b.w_gate),
                ("w_up", &mut b.w_up),
                ("w_down", &mut b.w_down),
            ] {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        if let Some(u) = self.unembed.as_mut() {
            out.push(("unembed".to_string(), u));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Marks every parameter as trainable or frozen.
    pub fn set_trainable(&mut self, trainable: bool) {
        for (_, p) in self.params_mut() {
            *p = p.with_requires_grad(trainable);
        }
    }

    pub fn zero_grad(&self) {
        self.params().iter().for_each(|(_, p)| p.zero_grad());
    }

    /// Element-type conversion; parameters keep their trainable flags.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        let c = |t: &Tensor<T>| t.cast::<U>().with_requires_grad(t.requires_grad());
        Transformer {
            config: self.config,
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn_norm: c(&b.attn_norm),
                    wq: c(&b.wq),
                    wk: c(&b.wk),
                    wv: c(&b.wv),
                    wo: c(&b.wo),
                    mlp_norm: c(&b.mlp_norm),
                    w_gate: c(&b.w_gate),
                    w_up: c(&b.w_up),
                    w_down: c(&b.w_down),
                })
                .collect(),
            final_norm: c(&self.final_norm),
            unembed: self.unembed.as_ref().map(c),
        }
    }

    /// `[d_model×vocab]` output projection (the transposed embedding when tied).
    pub fn unembedding(&self) -> Result<Tensor<T>> {
        match &self.unembed {
            Some(u) => Ok(u.clone()),
            None => self.tok_emb.transpose(),
        }
    }

    /// Token embeddings `h_embed` for a flat id list.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor<T>> {
        self.tok_emb.embedding(ids)
    }

    fn check_len(&self, seq: usize) -> Result<()> {
        if seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    /// Runs the decoder on precomputed input embeddings laid out as
    /// `[batch·seq, d_model]`; returns logits `[batch·seq, vocab]`.
    pub fn forward_embeddings(&self, h: &Tensor<T>, batch: usize, seq: usize) -> Result<Tensor<T>> {
        self.check_len(seq)?;
        let d = self.config.d_model;
        if h.shape() != [batch * seq, d] {
            return Err(Error::shape("forward_embeddings", h.shape(), &[batch * seq, d]));
        }
        let positions: Vec<u32> = (0..batch).flat_map(|_| 0..seq as u32).collect();
        let mut x = h.add(&self.pos_emb.embedding(&positions)?)?;
        let attn = CausalAttention {
            batch,
            seq,
            heads: self.config.n_heads,
        };
        for b in &self.blocks {
            let xn = x.rms_norm(&b.attn_norm, NORM_EPS)?;
            let q = xn.matmul(&b.wq)?;
            let k = xn.matmul(&b.wk)?;
            let v = xn.matmul(&b.wv)?;
            let a = Tensor::causal_attention(&q, &k, &v, attn)?;
            x = x.add(&a.matmul(&b.wo)?)?;
            let xn = x.rms_norm(&b.mlp_norm, NORM_EPS)?;
            let gated = xn.matmul(&b.w_gate)?.silu().mul(&xn.matmul(&b.w_up)?)?;
            x = x.add(&gated.matmul(&b.w_down)?)?;
        }
        x.rms_norm(&self.final_norm, NORM_EPS)?
            .matmul(&self.unembedding()?)
    }

    /// Logits `[batch·seq, vocab]` for equal-length sequences.
    pub fn forward_batch(&self, tokens: &[Vec<u32>]) -> Result<Tensor<T>> {
        let batch = tokens.len();
        let seq = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|t| t.len() != seq) {
            return Err(Error::invalid("forward_batch", "sequences differ in length"));
        }
        self.check_len(seq)?;
        let flat: Vec<u32> = tokens.concat();
        let h = self.embed_tokens(&flat)?;
        self.forward_embeddings(&h, batch, seq)
    }

    /// Logits `[T×vocab]`; row `t` depends only on `tokens[..=t]`.
    pub fn forward_logits(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        self.forward_batch(&[tokens.to_vec()])
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(self.config.n_layers)
    }

    /// Appends `h_new` (`[n×d_model]` input embeddings) to the cached
    /// context and returns logits for the new positions. Never records a
    /// graph.
    pub fn forward_cached(&self, h_new: &Tensor<T>, cache: &mut KvCache<T>) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let n = h_new.rows();
        if h_new.last_dim() != d {
            return Err(Error::shape("forward_cached", h_new.shape(), &[n, d]));
        }
        let offset = cache.len;
        self.check_len(offset + n)?;
        no_grad(|| {
            let positions: Vec<u32> = (offset as u32..(offset + n) as u32).collect();
            let mut x = h_new.add(&self.pos_emb.embedding(&positions)?)?;
            for (li, b) in self.blocks.iter().enumerate() {
                let xn = x.rms_norm(&b.attn_norm, NORM_EPS)?;
                let q = xn.matmul(&b.wq)?;
                cache.keys[li].extend_from_slice(xn.matmul(&b.wk)?.data());
                cache.values[li].extend_from_slice(xn.matmul(&b.wv)?.data());
                let a = attention_rows(
                    q.data(),
                    &cache.keys[li],
                    &cache.values[li],
                    d,
                    self.config.n_heads,
                    offset,
                );
                let a = Tensor::from_vec(a, &[n, d])?;
                x = x.add(&a.matmul(&b.wo)?)?;
                let xn = x.rms_norm(&b.mlp_norm, NORM_EPS)?;
                let gated = xn.matmul(&b.w_gate)?.silu().mul(&xn.matmul(&b.w_up)?)?;
                x = x.add(&gated.matmul(&b.w_down)?)?;
            }
            cache.len += n;
            x.rms_norm(&self.final_norm, NORM_EPS)?
                .matmul(&self.unembedding()?)
        })
    }

    /// Brings a token-driven cache to `tokens`, reusing the longest common
    /// prefix, and returns the logits of the final position.
    pub fn forward_tokens_cached(&self, tokens: &[u32], cache: &mut KvCache<T>) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Err(Error::invalid("forward_tokens_cached", "empty context"));
        }
        let common = cache
            .tokens
            .iter()
            .zip(tokens)
            .take_while(|(a, b)| a == b)
            .count();
        // Recompute at least the last position so its logits are available.
        cache.truncate(common.min(tokens.len() - 1));
        let start = cache.len;
        let new = &tokens[start..];
        let h = no_grad(|| self.embed_tokens(new))?;
        let logits = self.forward_cached(&h, cache)?;
        cache.tokens.extend_from_slice(new);
        Ok(logits.row(logits.rows() - 1).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerConfig {
        TransformerConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq_len: 16,
            tie_embeddings: false,
        }
    }

    #[test]
    fn output_shape() {
        let m = Transformer::<f32>::random(tiny(), 1).unwrap();
        let z = m.forward_logits(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(z.shape(), &[5, 11]);
    }

    #[test]
    fn overlong_input_is_rejected() {
        let m = Transformer::<f32>::random(tiny(), 1).unwrap();
        assert!(matches!(
            m.forward_logits(&[1; 17]),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(m.forward_logits(&[11]).is_err());
    }

    #[test]
    fn causal_rows_are_bitwise_stable() {
        let m = Transformer::<f32>::random(tiny(), 2).unwrap();
        let a = [1, 4, 2, 7, 3, 9];
        let z1 = m.forward_logits(&a).unwrap();
        for t in 0..a.len() - 1 {
            let mut b = a;
            b[t + 1] = (b[t + 1] + 3) % 11;
            let z2 = m.forward_logits(&b).unwrap();
            for r in 0..=t {
                let same = z1
                    .row(r)
                    .iter()
                    .zip(z2.row(r))
                    .all(|(x, y)| x.to_bits() == y.to_bits());
                assert!(same, "row {r} changed after editing token {}", t + 1);
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_logits() {
        let m = Transformer::<f32>::zeros(tiny()).unwrap();
        let z = m.forward_logits(&[1, 2, 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = Transformer::<f32>::random(tiny(), 9).unwrap();
        let b = Transformer::<f32>::random(tiny(), 9).unwrap();
        for ((_, x), (_, y)) in a.params().iter().zip(b.params()) {
            assert!(x.bitwise_eq(y));
        }
    }

    #[test]
    fn cached_decoding_matches_full_forward() {
        let m = Transformer::<f64>::random(tiny(), 3).unwrap();
        let toks = [1u32, 5, 2, 8, 4];
        let full = m.forward_logits(&toks).unwrap();
        let mut cache = m.new_cache();
        for t in 1..=toks.len() {
            let last = m.forward_tokens_cached(&toks[..t], &mut cache).unwrap();
            for (a, b) in last.iter().zip(full.row(t - 1)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // Divergent context reuses only the common prefix.
        let alt = [1u32, 5, 9];
        let last = m.forward_tokens_cached(&alt, &mut cache).unwrap();
        let expect = m.forward_logits(&alt).unwrap();
        for (a, b) in last.iter().zip(expect.row(2)) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(cache.len(), 3);
    }

    #[test]
    fn tied_embeddings_share_weights() {
        let mut cfg = tiny();
        cfg.tie_embeddings = true;
        let m = Transformer::<f32>::random(cfg, 1).unwrap();
        assert!(m.unembed.is_none());
        assert_eq!(m.unembedding().unwrap().shape(), &[8, 11]);
    }
}
