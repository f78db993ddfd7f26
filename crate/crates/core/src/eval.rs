//! Perplexity, task accuracy, transfer tables and the inference bench.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compose::{GenerateParams, GuidedModel};
use crate::corpus::Demonstration;
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::tensor::no_grad;
use crate::train::{Batch, Sequence};
use crate::vocab_map::VocabMap;

/// `exp` of the mean CE over response tokens (`masked`) or every token,
/// using composed logits.
pub fn eval_perplexity(g: &GuidedModel, data: &[Demonstration], masked: bool) -> Result<f64> {
    let tok = &g.value_tokenizer;
    let max_len = g.base.config.max_seq_len + 1;
    let seqs: Vec<Sequence> = data
        .iter()
        .filter_map(|d| {
            let mut s = Sequence::demonstration(tok, d, max_len)?;
            if !masked {
                s.loss_on.iter_mut().for_each(|m| *m = true);
            }
            Some(s)
        })
        .collect();
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in seqs.chunks(64) {
        let refs: Vec<&Sequence> = chunk.iter().collect();
        let batch = Batch::from_sequences(&refs, tok.pad())?;
        let mask = batch.flat_mask();
        let n = mask.iter().filter(|&&m| m).count();
        let ce = no_grad(|| -> Result<f64> {
            let out = g.forward_batch(&batch.inputs)?;
            Ok(out.z_post.cross_entropy_rows(&batch.flat_targets(), &mask)?.item() as f64)
        })?;
        total += ce * n as f64;
        count += n;
    }
    Ok((total / count as f64).exp())
}

/// Mean response CE over loss-bearing tokens.
pub fn eval_response_ce(g: &GuidedModel, data: &[Demonstration]) -> Result<f64> {
    Ok(eval_perplexity(g, data, true)?.ln())
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exact-match rate of greedy generations after whitespace normalization.
pub fn eval_task_accuracy(g: &GuidedModel, tasks: &[Demonstration], max_new_tokens: usize) -> Result<f64> {
    if tasks.is_empty() {
        return Ok(0.0);
    }
    let params = GenerateParams {
        max_new_tokens,
        ..GenerateParams::default()
    };
    let mut hits = 0usize;
    for t in tasks {
        let out = g.generate(&t.prompt, &params)?;
        if normalize(&out.text) == normalize(&t.response) {
            hits += 1;
        }
    }
    Ok(hits as f64 / tasks.len() as f64)
}

/// Mean |z_Δ| over response positions.
pub fn eval_mean_abs_delta(g: &GuidedModel, data: &[Demonstration]) -> Result<f64> {
    let tok = &g.value_tokenizer;
    let max_len = g.base.config.max_seq_len + 1;
    let (mut sum, mut count) = (0.0f64, 0usize);
    for chunk in data.chunks(64) {
        let seqs: Vec<Sequence> = chunk
            .iter()
            .filter_map(|d| Sequence::demonstration(tok, d, max_len))
            .collect();
        if seqs.is_empty() {
            continue;
        }
        let refs: Vec<&Sequence> = seqs.iter().collect();
        let batch = Batch::from_sequences(&refs, tok.pad())?;
        let out = no_grad(|| g.forward_batch(&batch.inputs))?;
        let Some(d) = out.z_delta else { return Ok(0.0) };
        for (r, m) in batch.flat_mask().into_iter().enumerate() {
            if m {
                sum += d.row(r).iter().map(|x| x.abs() as f64).sum::<f64>();
                count += d.last_dim();
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub base: String,
    pub mode: String,
    pub perplexity: f64,
    pub task_accuracy: f64,
    pub mean_abs_delta: f64,
}

/// Rows of a comparison table plus the text renderings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub rows: Vec<EvalReport>,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("# {}\n", self.title);
        writeln!(
            out,
            "{:<16} {:<12} {:>10} {:>9} {:>12}",
            "base", "mode", "ppl", "acc(%)", "mean|dz|"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<16} {:<12} {:>10.4} {:>9.1} {:>12.5}",
                r.base,
                r.mode,
                r.perplexity,
                r.task_accuracy * 100.0,
                r.mean_abs_delta
            )
            .unwrap();
        }
        out
    }

    /// Line-oriented export: a format tag, then one `key=value` line per row.
    pub fn to_lines(&self) -> String {
        let mut out = String::from("deltalogit-report v1\n");
        for r in &self.rows {
            writeln!(
                out,
                "base={} mode={} ppl={} acc={} mean_abs_delta={}",
                r.base, r.mode, r.perplexity, r.task_accuracy, r.mean_abs_delta
            )
            .unwrap();
        }
        out
    }

    pub fn find(&self, base: &str, mode: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.base == base && r.mode == mode)
    }
}

/// A plug-in target for [`transfer_experiment`].
#[derive(Debug, Clone)]
pub struct TransferTarget {
    pub name: String,
    pub base: Arc<Transformer>,
    pub tokenizer: Arc<crate::tokenizer::Tokenizer>,
    pub map: Option<Arc<VocabMap>>,
}

/// Evaluates every base alone and guided by `g`'s value network.
/// Guided perplexity needs a shared vocabulary; `guided-mapped` rows report
/// task accuracy only and carry 0.0 for perplexity.
pub fn transfer_experiment(
    g: &GuidedModel,
    targets: &[TransferTarget],
    tasks: &[Demonstration],
    held_out: &[Demonstration],
    max_new_tokens: usize,
) -> Result<ReportTable> {
    let mut table = ReportTable {
        title: format!("transfer of a {} value network", g.scheme.name()),
        rows: Vec::new(),
    };
    for t in targets {
        let alone = GuidedModel::base_only(t.base.clone(), t.tokenizer.clone())?;
        table.rows.push(EvalReport {
            base: t.name.clone(),
            mode: "base".into(),
            perplexity: eval_perplexity(&alone, held_out, true)?,
            task_accuracy: eval_task_accuracy(&alone, tasks, max_new_tokens)?,
            mean_abs_delta: 0.0,
        });
        let guided = GuidedModel::new(
            t.base.clone(),
            g.value.clone(),
            g.scheme,
            t.tokenizer.clone(),
            g.value_tokenizer.clone(),
            t.map.clone(),
        )
        .map_err(|e| match e {
            Error::VocabMismatch(m) => Error::VocabMismatch(format!("{}: {m}", t.name)),
            other => other,
        })?;
        let shared = t.tokenizer.checksum() == g.value_tokenizer.checksum();
        let (mode, ppl, delta) = if shared {
            (
                "guided",
                eval_perplexity(&guided, held_out, true)?,
                eval_mean_abs_delta(&guided, held_out)?,
            )
        } else {
            ("guided-mapped", 0.0, 0.0)
        };
        table.rows.push(EvalReport {
            base: t.name.clone(),
            mode: mode.into(),
            perplexity: ppl,
            task_accuracy: eval_task_accuracy(&guided, tasks, max_new_tokens)?,
            mean_abs_delta: delta,
        });
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub length: usize,
    pub mean_seconds: f64,
    pub peak_rss_kb: u64,
}

/// Peak resident set size of this process from `/proc`, 0 where
/// unavailable.
pub fn peak_rss_kb() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("VmHWM:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse().ok())
        })
        .unwrap_or(0)
}

/// Wall time of generating exactly `length` tokens, averaged over `runs`.
/// Generation ignores end-of-sequence so every run does equal work; lengths
/// beyond a model's context are rejected.
pub fn bench_inference(
    configs: &[(String, GuidedModel)],
    lengths: &[usize],
    runs: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (name, g) in configs {
        for &len in lengths {
            let mut total = 0.0;
            for run in 0..runs.max(1) {
                let start = Instant::now();
                g.generate_fixed(len, run as u64)?;
                total += start.elapsed().as_secs_f64();
            }
            rows.push(BenchRow {
                config: name.clone(),
                length: len,
                mean_seconds: total / runs.max(1) as f64,
                peak_rss_kb: peak_rss_kb(),
            });
        }
    }
    Ok(rows)
}

pub fn bench_to_text(rows: &[BenchRow]) -> String {
    let mut out = format!("{:<20} {:>7} {:>12} {:>12}\n", "config", "length", "seconds", "peak_kb");
    for r in rows {
        writeln!(
            out,
            "{:<20} {:>7} {:>12.5} {:>12}",
            r.config, r.length, r.mean_seconds, r.peak_rss_kb
        )
        .unwrap();
    }
    out
}
