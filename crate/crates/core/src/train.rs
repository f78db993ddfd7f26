//! Value-network training against frozen bases, base pretraining, AdamW
//! and the warmup-cosine schedule.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::GuidedModel;
use crate::corpus::Demonstration;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tensor::{no_grad, Tensor};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_length: usize,
    pub lambda_l1: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Overrides `epochs` as the total step budget when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            warmup_ratio: 0.04,
            epochs: 3,
            batch_size: 32,
            max_length: 64,
            lambda_l1: 1.0,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !(self.eps > 0.0) {
            return bad("learning_rate and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_length < 2 {
            return bad("batch_size must be positive and max_length at least 2");
        }
        if self.lambda_l1 < 0.0 || self.weight_decay < 0.0 {
            return bad("lambda_l1 and weight_decay must be non-negative");
        }
        if self.max_steps == Some(0) || (self.max_steps.is_none() && self.epochs == 0) {
            return bad("step budget must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    /// Step budget for a dataset of `n` sequences.
    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }
}

/// One tokenized training sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sequence {
    pub ids: Vec<u32>,
    /// `loss_on[t]` says whether predicting `ids[t + 1]` counts.
    pub loss_on: Vec<bool>,
}

impl Sequence {
    /// `[bos] prompt response [eos]`, loss on response tokens and `eos`.
    pub fn demonstration(tok: &Tokenizer, d: &Demonstration, max_length: usize) -> Option<Self> {
        let mut ids = vec![tok.bos()];
        ids.extend(tok.encode(&d.prompt));
        let prompt_len = ids.len();
        ids.extend(tok.encode(&d.response));
        ids.push(tok.eos());
        ids.truncate(max_length);
        let loss_on: Vec<bool> = (1..ids.len()).map(|t| t >= prompt_len).collect();
        loss_on.iter().any(|&m| m).then_some(Sequence { ids, loss_on })
    }

    /// `[bos] text [eos]`, loss on every position.
    pub fn plain(tok: &Tokenizer, text: &str, max_length: usize) -> Option<Self> {
        let mut ids = vec![tok.bos()];
        ids.extend(tok.encode(text));
        ids.push(tok.eos());
        ids.truncate(max_length);
        (ids.len() >= 2).then(|| Sequence {
            loss_on: vec![true; ids.len() - 1],
            ids,
        })
    }
}

/// Padded next-token batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    /// True only where the target is a response token of a real sequence.
    pub mask: Vec<Vec<bool>>,
    /// False on padded input positions.
    pub valid: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[&Sequence], pad: u32) -> Result<Self> {
        let width = seqs.iter().map(|s| s.ids.len() - 1).max().unwrap_or(0);
        if width == 0 {
            return Err(Error::EmptySequence);
        }
        let mut b = Batch {
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
            valid: Vec::new(),
        };
        for s in seqs {
            let n = s.ids.len() - 1;
            let pad_to = |mut v: Vec<u32>| {
                v.resize(width, pad);
                v
            };
            b.inputs.push(pad_to(s.ids[..n].to_vec()));
            b.targets.push(pad_to(s.ids[1..].to_vec()));
            let mut m = s.loss_on.clone();
            m.resize(width, false);
            b.mask.push(m);
            let mut v = vec![true; n];
            v.resize(width, false);
            b.valid.push(v);
        }
        Ok(b)
    }

    pub fn flat_targets(&self) -> Vec<u32> {
        self.targets.concat()
    }

    pub fn flat_mask(&self) -> Vec<bool> {
        self.mask.concat()
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        self.valid
            .concat()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| v.then_some(i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub ce: f64,
    pub l1: f64,
    /// Mean |z_Δ| over loss-bearing positions.
    pub mean_abs_delta: f64,
}

/// `CE(z_post) + λ·mean|z_Δ|`, the mean taken over real (unpadded)
/// positions.
pub fn loss_step(g: &GuidedModel, batch: &Batch, lambda_l1: f64) -> Result<(Tensor, StepMetrics)> {
    let out = g.forward_batch(&batch.inputs)?;
    loss_from_output(out, batch, lambda_l1)
}

fn loss_from_output(
    out: crate::compose::GuidedOutput,
    batch: &Batch,
    lambda_l1: f64,
) -> Result<(Tensor, StepMetrics)> {
    let mask = batch.flat_mask();
    let ce = out.z_post.cross_entropy_rows(&batch.flat_targets(), &mask)?;
    let mut metrics = StepMetrics {
        ce: ce.item() as f64,
        ..StepMetrics::default()
    };
    let Some(z_delta) = out.z_delta else {
        return Ok((ce, metrics));
    };
    let v = z_delta.last_dim();
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (r, &m) in mask.iter().enumerate() {
        if m {
            sum += z_delta.row(r).iter().map(|x| x.abs() as f64).sum::<f64>();
            count += v;
        }
    }
    metrics.mean_abs_delta = sum / count as f64;
    let l1 = z_delta.select_rows(&batch.valid_rows())?.l1_mean()?;
    metrics.l1 = l1.item() as f64;
    if lambda_l1 == 0.0 {
        return Ok((ce, metrics));
    }
    Ok((ce.add(&l1.scale(lambda_l1))?, metrics))
}

/// Adam moments for a list of parameters.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Constants of one AdamW update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Decoupled-weight-decay Adam with bias correction. Replaces each
/// parameter with its updated value.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f32>],
    state: &mut OptimizerState,
    hp: AdamW,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid("adamw_step", "one gradient per parameter"));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::invalid("adamw_step", "optimizer state does not match parameters"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data: Vec<f32> = p
            .data()
            .iter()
            .enumerate()
            .map(|(j, &w)| {
                let gj = g[j] as f64;
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
                let mut w = w as f64 * (1.0 - hp.lr * hp.weight_decay);
                w -= hp.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + hp.eps);
                w as f32
            })
            .collect();
        **p = Tensor::from_vec(data, p.shape())?.with_requires_grad(p.requires_grad());
    }
    Ok(())
}

/// Linear warmup over `ceil(ratio·total)` steps, then cosine decay to 0 at
/// `total`.
pub fn cosine_warmup_lr(step: usize, total_steps: usize, warmup_ratio: f64, base_lr: f64) -> f64 {
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if step >= total_steps {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: Option<f64>) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if let Some(max) = max_norm {
        if norm > max {
            let s = (max / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub base: String,
    pub loss: f64,
    pub ce: f64,
    pub l1: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Sum of |gradient| reaching base parameters on this step.
    pub base_grad_abs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    pub base_checksums_before: Vec<String>,
    pub base_checksums_after: Vec<String>,
}

impl TrainingLog {
    /// One structured line per step, preceded by a format tag.
    pub fn to_text(&self) -> String {
        let mut out = String::from("deltalogit-trainlog v1\n");
        for r in &self.records {
            writeln!(
                out,
                "step={} base={} loss={} ce={} l1={} lr={} grad_norm={} base_grad={}",
                r.step, r.base, r.loss, r.ce, r.l1, r.lr, r.grad_norm, r.base_grad_abs
            )
            .expect("write to string");
        }
        out
    }

    /// Steps per base, in the order the bases were first active.
    pub fn steps_per_base(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((b, n)) if *b == r.base => *n += 1,
                _ => out.push((r.base.clone(), 1)),
            }
        }
        out
    }

    /// Mean CE over a window of steps.
    pub fn mean_ce(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.records[range];
        s.iter().map(|r| r.ce).sum::<f64>() / s.len() as f64
    }
}

/// A frozen base with a display name for logs.
#[derive(Debug, Clone)]
pub struct NamedBase {
    pub name: String,
    pub model: Arc<Transformer>,
}

impl NamedBase {
    pub fn new(name: impl Into<String>, model: Arc<Transformer>) -> Self {
        NamedBase {
            name: name.into(),
            model,
        }
    }
}

fn base_grad_abs(base: &Transformer) -> f64 {
    base.params()
        .iter()
        .filter_map(|(_, p)| p.grad())
        .flatten()
        .map(|g| g.abs() as f64)
        .sum()
}

fn batch_order(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Endless shuffled batch schedule over `n` items.
struct Batches {
    n: usize,
    size: usize,
    seed: u64,
    epoch: usize,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        Batches {
            n,
            size,
            seed,
            epoch: 0,
            queue: Default::default(),
        }
    }

    fn next(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = batch_order(self.n, self.size, self.seed, self.epoch).into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("non-empty epoch")
    }
}

/// Base logits per sequence, computed once per base since the base never
/// changes.
struct BaseLogitCache {
    rows: Vec<Vec<f32>>,
    vocab: usize,
}

impl BaseLogitCache {
    fn build(base: &Transformer, seqs: &[Sequence]) -> Result<Self> {
        let rows = no_grad(|| {
            seqs.iter()
                .map(|s| Ok(base.forward_logits(&s.ids[..s.ids.len() - 1])?.to_vec()))
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(BaseLogitCache {
            rows,
            vocab: base.config.vocab_size,
        })
    }

    fn batch(&self, idx: &[usize], width: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * width * self.vocab);
        for &i in idx {
            let r = &self.rows[i];
            data.extend_from_slice(r);
            data.resize(data.len() + width * self.vocab - r.len(), 0.0);
        }
        Tensor::from_vec(data, &[idx.len() * width, self.vocab])
    }
}

/// Trains `g.value` against each base in turn. A single base is ordinary
/// training; several bases split the step budget equally, in order, each
/// stage with a fresh schedule and optimizer.
pub fn train_value(
    g: &mut GuidedModel,
    bases: &[NamedBase],
    data: &[Demonstration],
    config: &TrainingConfig,
) -> Result<TrainingLog> {
    train_value_with(g, bases, data, config, |_| {})
}

/// [`train_value`] with a callback invoked after every step.
pub fn train_value_with(
    g: &mut GuidedModel,
    bases: &[NamedBase],
    data: &[Demonstration],
    config: &TrainingConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainingLog> {
    config.validate()?;
    if bases.is_empty() {
        return Err(Error::Config("at least one base is required".into()));
    }
    let vocab = g.value_vocab_size();
    for b in bases {
        if b.model.config.vocab_size != vocab {
            return Err(Error::VocabMismatch(format!(
                "base {} has vocab {}, value has {vocab}",
                b.name, b.model.config.vocab_size
            )));
        }
    }
    let tok = g.value_tokenizer.clone();
    let seqs: Vec<Sequence> = data
        .iter()
        .filter_map(|d| Sequence::demonstration(&tok, d, config.max_length))
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total = config.total_steps(seqs.len());
    let mut log = TrainingLog {
        base_checksums_before: bases.iter().map(|b| b.model.param_checksum()).collect(),
        ..TrainingLog::default()
    };
    let mut batches = Batches::new(seqs.len(), config.batch_size, config.seed);
    let k = bases.len();
    for (bi, nb) in bases.iter().enumerate() {
        let stage_steps = (bi + 1) * total / k - bi * total / k;
        *g = g.with_base(nb.model.clone())?;
        let frozen = nb.model.params().iter().all(|(_, p)| !p.requires_grad());
        let cache = if frozen {
            Some(BaseLogitCache::build(&nb.model, &seqs)?)
        } else {
            None
        };
        let mut opt = OptimizerState::default();
        for s in 0..stage_steps {
            let lr = cosine_warmup_lr(s, stage_steps, config.warmup_ratio, config.learning_rate);
            let idx = batches.next();
            let refs: Vec<&Sequence> = idx.iter().map(|&i| &seqs[i]).collect();
            let batch = Batch::from_sequences(&refs, tok.pad())?;
            let out = match &cache {
                Some(c) => {
                    let z_base = c.batch(&idx, batch.inputs[0].len())?;
                    g.forward_batch_with_base(&batch.inputs, z_base)?
                }
                None => g.forward_batch(&batch.inputs)?,
            };
            let (loss, metrics) = loss_from_output(out, &batch, config.lambda_l1)?;
            let loss_value = loss.item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    step: log.records.len(),
                    loss: loss_value,
                });
            }
            loss.backward()?;
            let base_grad = base_grad_abs(&nb.model);
            nb.model.zero_grad();
            let mut params = g.value.params_mut();
            let mut grads: Vec<Vec<f32>> = params
                .iter()
                .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
                .collect();
            let grad_norm = clip_grad_norm(&mut grads, config.grad_clip);
            let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, p)| &mut **p).collect();
            adamw_step(
                &mut refs,
                &grads,
                &mut opt,
                AdamW {
                    lr,
                    beta1: config.beta1,
                    beta2: config.beta2,
                    eps: config.eps,
                    weight_decay: config.weight_decay,
                },
            )?;
            let record = StepRecord {
                step: log.records.len(),
                base: nb.name.clone(),
                loss: loss_value,
                ce: metrics.ce,
                l1: metrics.l1,
                lr,
                grad_norm,
                base_grad_abs: base_grad,
            };
            on_step(&record);
            log.records.push(record);
        }
    }
    log.base_checksums_after = bases.iter().map(|b| b.model.param_checksum()).collect();
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_ppl: f64,
    pub final_ppl: f64,
    pub losses: Vec<f64>,
}

/// Next-token CE training of a base model on plain text.
pub fn pretrain_base(
    model: &mut Transformer,
    tok: &Tokenizer,
    corpus: &[String],
    config: &TrainingConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    if model.config.vocab_size != tok.vocab_size() {
        return Err(Error::VocabMismatch(format!(
            "model vocab {} vs tokenizer {}",
            model.config.vocab_size,
            tok.vocab_size()
        )));
    }
    let max_len = config.max_length.min(model.config.max_seq_len + 1);
    let seqs: Vec<Sequence> = corpus
        .iter()
        .filter_map(|t| Sequence::plain(tok, t, max_len))
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total = config.total_steps(seqs.len());
    let eval_idx: Vec<&Sequence> = seqs.iter().take(256).collect();
    let eval_batch = Batch::from_sequences(&eval_idx, tok.pad())?;
    let eval_ppl = |m: &Transformer| -> Result<f64> {
        let z = no_grad(|| m.forward_batch(&eval_batch.inputs))?;
        let ce = z.cross_entropy_rows(&eval_batch.flat_targets(), &eval_batch.flat_mask())?;
        Ok((ce.item() as f64).exp())
    };
    model.set_trainable(true);
    let initial_ppl = eval_ppl(model)?;
    let mut batches = Batches::new(seqs.len(), config.batch_size, config.seed);
    let mut opt = OptimizerState::default();
    let mut losses = Vec::with_capacity(total);
    for step in 0..total {
        let lr = cosine_warmup_lr(step, total, config.warmup_ratio, config.learning_rate);
        let refs: Vec<&Sequence> = batches.next().into_iter().map(|i| &seqs[i]).collect();
        let batch = Batch::from_sequences(&refs, tok.pad())?;
        let loss = model
            .forward_batch(&batch.inputs)?
            .cross_entropy_rows(&batch.flat_targets(), &batch.flat_mask())?;
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::Diverged { step, loss: value });
        }
        loss.backward()?;
        let mut params = model.params_mut();
        let mut grads: Vec<Vec<f32>> = params
            .iter()
            .map(|(_, p)| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        clip_grad_norm(&mut grads, config.grad_clip);
        let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, p)| &mut **p).collect();
        adamw_step(
            &mut refs,
            &grads,
            &mut opt,
            AdamW {
                lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            },
        )?;
        losses.push(value);
    }
    model.set_trainable(false);
    Ok(PretrainReport {
        initial_ppl,
        final_ppl: eval_ppl(model)?,
        losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(lr: f64, wd: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn adamw_examples() {
        let mut p = Tensor::param(vec![1.0, -2.0], &[2]).unwrap();
        let mut st = OptimizerState::default();
        adamw_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, hp(0.1, 0.0)).unwrap();
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);

        let mut st = OptimizerState::default();
        adamw_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, hp(0.1, 0.5)).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-7 && (p.data()[1] + 1.9).abs() < 1e-6);

        let mut q = Tensor::param(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let mut st = OptimizerState::default();
        let g = vec![0.5f32, -3.0, 1e-3];
        adamw_step(&mut [&mut q], &[g.clone()], &mut st, hp(0.01, 0.0)).unwrap();
        for (d, g) in q.data().iter().zip(&g) {
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((d - want).abs() < 1e-6, "{d} vs {want}");
        }
        assert!(q.requires_grad());
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_warmup_lr(0, 100, 0.04, 1e-3), 0.0);
        assert!((cosine_warmup_lr(4, 100, 0.04, 1e-3) - 1e-3).abs() < 1e-15);
        assert!((cosine_warmup_lr(2, 100, 0.04, 1e-3) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_warmup_lr(100, 100, 0.04, 1e-3), 0.0);
        assert!((cosine_warmup_lr(52, 100, 0.04, 1e-3) - 5e-4).abs() < 1e-12);
        assert_eq!(cosine_warmup_lr(0, 10, 0.0, 1.0), 1.0);
    }

    #[test]
    fn clipping_scales_to_threshold() {
        let mut g = vec![vec![3.0f32], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, Some(1.0)), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
        let mut g = vec![vec![3.0f32], vec![4.0]];
        clip_grad_norm(&mut g, None);
        assert_eq!(g[0][0], 3.0);
    }

    #[test]
    fn batch_masks_prompt_and_padding() {
        let a = Sequence {
            ids: vec![1, 5, 6, 7, 2],
            loss_on: vec![false, false, true, true],
        };
        let b = Sequence {
            ids: vec![1, 8, 2],
            loss_on: vec![false, true],
        };
        let batch = Batch::from_sequences(&[&a, &b], 0).unwrap();
        assert_eq!(batch.inputs, vec![vec![1, 5, 6, 7], vec![1, 8, 0, 0]]);
        assert_eq!(batch.targets, vec![vec![5, 6, 7, 2], vec![8, 2, 0, 0]]);
        assert_eq!(
            batch.mask,
            vec![vec![false, false, true, true], vec![false, true, false, false]]
        );
        assert_eq!(batch.valid_rows(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        let bad = TrainingConfig {
            warmup_ratio: 1.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig {
            learning_rate: 0.0,
            ..TrainingConfig::default()
        };
        assert!(bad.validate().is_err());
        let text = toml::to_string(&TrainingConfig::default()).unwrap();
        assert_eq!(toml::from_str::<TrainingConfig>(&text).unwrap(), TrainingConfig::default());
    }
}
