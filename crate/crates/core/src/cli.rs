//! Command-line front end. Every subcommand reads an optional TOML config
//! (one table per subcommand, plus `[training]`) and lets flags override it.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::cell::RefCell;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::compose::{ConnectionScheme, GenerateParams, GuidedModel, ValueModel};
use crate::corpus::{gen_synthetic_corpus, Corpus, CorpusKind, CorpusSpec};
use crate::error::Error;
use crate::eval::{
    bench_inference, bench_to_text, eval_mean_abs_delta, eval_perplexity, eval_task_accuracy,
    transfer_experiment, EvalReport, ReportTable, TransferTarget,
};
use crate::model::{
    init_value_network, Checkpoint, GatedProbe, ModelKind, ProbeConfig, Transformer,
    TransformerConfig, ValueInit,
};
use crate::tokenizer::Tokenizer;
use crate::train::{pretrain_base, train_value_with, NamedBase, TrainingConfig};
use crate::vocab_map::{overlap_ratio, Sparsify, VocabMap};

#[derive(Debug, Parser)]
#[command(
    name = "deltalogit",
    version,
    about = "Train logit-delta value networks against frozen base models and plug them into other bases"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE tokenizer on one or more corpus files.
    TokenizerTrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',')]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic plain or demonstrations corpus.
    CorpusGen {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        grammar: Option<String>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain a base model with next-token cross-entropy.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a value network against one frozen base or a curriculum.
    TrainValue {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Comma-separated base checkpoints trained in order.
        #[arg(long, value_delimiter = ',')]
        curriculum: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// residual, cascade, cascade+ or probe.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Pretrained checkpoint for the value network, or `random`.
        #[arg(long)]
        value_init: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Guided (or base-only) decoding of one prompt.
    Generate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Perplexity, task accuracy and mean |delta| of a model on a dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
    },
    /// Plug one value network into several bases and compare.
    Transfer {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        value: Option<PathBuf>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long, value_delimiter = ',')]
        bases: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        max_new_tokens: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a base-to-value vocabulary map by token alignment.
    MapVocab {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        base_tokenizer: Option<PathBuf>,
        #[arg(long)]
        value_tokenizer: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        min_weight: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a text export next to the map.
        #[arg(long)]
        text: bool,
    },
    /// Overlap ratio of a vocabulary map on a corpus.
    Overlap {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        map: Option<PathBuf>,
        #[arg(long)]
        base_tokenizer: Option<PathBuf>,
        #[arg(long)]
        value_tokenizer: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Generation wall time and peak memory for base-only and guided models.
    Bench {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Value-vocabulary tokenizer.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    base: Option<PathBuf>,
    /// Base tokenizer when it differs from the value tokenizer.
    #[arg(long)]
    base_tokenizer: Option<PathBuf>,
    /// Vocabulary map for a base with a different tokenizer.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Value checkpoint; `expert,reference` for the proxy scheme. Omit for
    /// the base alone.
    #[arg(long)]
    value: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// One config table plus a record of every resolved value.
struct Section {
    name: String,
    table: toml::Table,
    resolved: RefCell<toml::Table>,
}

impl Section {
    fn load(config: &Option<PathBuf>, name: &str) -> CliResult<(Self, toml::Table)> {
        let root: toml::Table = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse()
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let table = match root.get(name) {
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => return Err(CliError::Usage(format!("config key `{name}` must be a table"))),
            None => toml::Table::new(),
        };
        Ok((
            Section {
                name: name.to_string(),
                table,
                resolved: RefCell::new(toml::Table::new()),
            },
            root,
        ))
    }

    fn opt<T: DeserializeOwned + Serialize>(&self, key: &str, flag: Option<T>) -> CliResult<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.table.get(key) {
                Some(raw) => Some(raw.clone().try_into().map_err(|e| {
                    CliError::Usage(format!("config key `{}.{key}`: {e}", self.name))
                })?),
                None => None,
            },
        };
        if let Some(v) = &v {
            if let Ok(tv) = toml::Value::try_from(v) {
                self.resolved.borrow_mut().insert(key.to_string(), tv);
            }
        }
        Ok(v)
    }

    fn req<T: DeserializeOwned + Serialize>(&self, key: &str, flag: Option<T>) -> CliResult<T> {
        self.opt(key, flag)?.ok_or_else(|| {
            CliError::Usage(format!(
                "missing required key `{}.{key}` (config file or --{})",
                self.name,
                key.replace('_', "-")
            ))
        })
    }

    fn list<T: DeserializeOwned + Serialize>(&self, key: &str, flag: Vec<T>) -> CliResult<Vec<T>> {
        Ok(self
            .opt(key, (!flag.is_empty()).then_some(flag))?
            .unwrap_or_default())
    }

    fn describe(&self) -> String {
        let mut t = toml::Table::new();
        t.insert(self.name.clone(), toml::Value::Table(self.resolved.borrow().clone()));
        toml::to_string(&t).unwrap_or_default()
    }
}

fn training_config(root: &toml::Table) -> CliResult<TrainingConfig> {
    match root.get("training") {
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| CliError::Usage(format!("config table `training`: {e}"))),
        None => Ok(TrainingConfig::default()),
    }
}

fn load_tokenizer(p: &Path) -> CliResult<Arc<Tokenizer>> {
    Ok(Arc::new(Tokenizer::load(p)?))
}

fn load_corpus(p: &Path) -> CliResult<Corpus> {
    Ok(Corpus::load(p)?)
}

fn parse_scheme(s: &str) -> CliResult<ConnectionScheme> {
    ConnectionScheme::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn load_value(spec: &str, scheme: ConnectionScheme) -> CliResult<ValueModel> {
    if scheme == ConnectionScheme::ProxyDelta {
        let (e, r) = spec.split_once(',').ok_or_else(|| {
            CliError::Usage("proxy scheme needs --value expert.ckpt,reference.ckpt".into())
        })?;
        return Ok(ValueModel::Proxy {
            expert: Arc::new(Transformer::load(e)?),
            reference: Arc::new(Transformer::load(r)?),
        });
    }
    let ckpt = Checkpoint::read(spec)?;
    Ok(match ckpt.header.kind {
        ModelKind::Transformer => ValueModel::Transformer(ckpt.into_transformer()?),
        ModelKind::Probe => ValueModel::Probe(ckpt.into_probe()?),
    })
}

fn build_guided(s: &Section, m: ModelArgs) -> CliResult<GuidedModel> {
    let tok = load_tokenizer(&s.req::<PathBuf>("tokenizer", m.tokenizer)?)?;
    let base = Arc::new(Transformer::load(s.req::<PathBuf>("base", m.base)?)?);
    let base_tok = match s.opt::<PathBuf>("base_tokenizer", m.base_tokenizer)? {
        Some(p) => load_tokenizer(&p)?,
        None => tok.clone(),
    };
    let map = match s.opt::<PathBuf>("map", m.map)? {
        Some(p) => Some(Arc::new(VocabMap::load(p)?)),
        None => None,
    };
    match s.opt::<String>("value", m.value)? {
        None => {
            if map.is_some() || !Arc::ptr_eq(&base_tok, &tok) {
                return Ok(GuidedModel::new(
                    base,
                    ValueModel::None,
                    ConnectionScheme::Residual,
                    base_tok,
                    tok,
                    map,
                )?);
            }
            Ok(GuidedModel::base_only(base, tok)?)
        }
        Some(v) => {
            let scheme = parse_scheme(&s.opt::<String>("scheme", m.scheme)?.unwrap_or("residual".into()))?;
            let value = load_value(&v, scheme)?;
            Ok(GuidedModel::new(base, value, scheme, base_tok, tok, map)?)
        }
    }
}

fn append_report(path: &Path, header: &str, body: &str) -> CliResult<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in header.lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(body);
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::TokenizerTrain {
            cfg,
            corpus,
            vocab_size,
            seed,
            out,
        } => {
            let (s, _) = Section::load(&cfg.config, "tokenizer_train")?;
            let corpus: Vec<PathBuf> = s.list("corpus", corpus)?;
            if corpus.is_empty() {
                return Err(CliError::Usage(
                    "missing required key `tokenizer_train.corpus` (config file or --corpus)".into(),
                ));
            }
            let vocab_size = s.req("vocab_size", vocab_size)?;
            let seed = s.opt("seed", seed)?.unwrap_or(0);
            let out: PathBuf = s.req("out", out)?;
            let mut texts = Vec::new();
            for p in &corpus {
                texts.extend(load_corpus(p)?.texts());
            }
            let tok = Tokenizer::train_bpe(&texts, vocab_size, seed)?;
            tok.save(&out)?;
            println!("tokenizer: {} tokens, checksum {}", tok.vocab_size(), tok.checksum());
        }
        Command::CorpusGen {
            cfg,
            kind,
            grammar,
            size,
            seed,
            out,
        } => {
            let (s, _) = Section::load(&cfg.config, "corpus_gen")?;
            let kind = match s.req::<String>("kind", kind)?.as_str() {
                "plain" => CorpusKind::Plain,
                "demonstrations" => CorpusKind::Demonstrations,
                other => return Err(CliError::Usage(format!("unknown corpus kind {other:?}"))),
            };
            let spec = CorpusSpec {
                kind,
                grammar: s.req("grammar", grammar)?,
                size: s.req("size", size)?,
                seed: s.opt("seed", seed)?.unwrap_or(0),
            };
            let out: PathBuf = s.req("out", out)?;
            let corpus = gen_synthetic_corpus(&spec)?;
            corpus.save(&out)?;
            println!("corpus: {} items", corpus.len());
        }
        Command::Pretrain {
            cfg,
            tokenizer,
            corpus,
            preset,
            seed,
            steps,
            lr,
            out,
        } => {
            let (s, root) = Section::load(&cfg.config, "pretrain")?;
            let tok = load_tokenizer(&s.req::<PathBuf>("tokenizer", tokenizer)?)?;
            let corpus = load_corpus(&s.req::<PathBuf>("corpus", corpus)?)?;
            let preset: String = s.req("preset", preset)?;
            let seed = s.opt("seed", seed)?.unwrap_or(0);
            let out: PathBuf = s.req("out", out)?;
            let mut tc = training_config(&root)?;
            tc.seed = seed;
            tc.max_steps = s.opt("steps", steps)?.or(tc.max_steps);
            tc.learning_rate = s.opt("lr", lr)?.unwrap_or(tc.learning_rate);
            let config = TransformerConfig::preset(&preset, tok.vocab_size())
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let mut model = Transformer::random(config, seed)?;
            let report = pretrain_base(&mut model, &tok, corpus.plain()?, &tc)?;
            let meta = [
                ("preset".to_string(), preset),
                ("final_ppl".to_string(), report.final_ppl.to_string()),
                ("tokenizer".to_string(), tok.checksum()),
            ]
            .into_iter()
            .collect();
            write_file(&out, model.to_checkpoint_bytes(meta)?)?;
            println!(
                "pretrain: ppl {:.4} -> {:.4}, checksum {}",
                report.initial_ppl,
                report.final_ppl,
                model.param_checksum()
            );
        }
        Command::TrainValue {
            cfg,
            tokenizer,
            base,
            curriculum,
            data,
            scheme,
            lambda,
            value_init,
            steps,
            lr,
            seed,
            out,
            log,
        } => {
            let (s, root) = Section::load(&cfg.config, "train_value")?;
            let tok = load_tokenizer(&s.req::<PathBuf>("tokenizer", tokenizer)?)?;
            let mut base_paths: Vec<PathBuf> = s.list("curriculum", curriculum)?;
            if base_paths.is_empty() {
                base_paths.push(s.req("base", base)?);
            }
            let data = load_corpus(&s.req::<PathBuf>("data", data)?)?;
            let scheme = parse_scheme(&s.opt::<String>("scheme", scheme)?.unwrap_or("residual".into()))?;
            if scheme == ConnectionScheme::ProxyDelta {
                return Err(CliError::Usage("the proxy scheme has no trainable value network".into()));
            }
            let value_init: String = s.opt("value_init", value_init)?.unwrap_or("random".into());
            let out: PathBuf = s.req("out", out)?;
            let log_path: Option<PathBuf> = s.opt("log", log)?;
            let mut tc = training_config(&root)?;
            tc.lambda_l1 = s.opt("lambda", lambda)?.unwrap_or(tc.lambda_l1);
            tc.max_steps = s.opt("steps", steps)?.or(tc.max_steps);
            tc.learning_rate = s.opt("lr", lr)?.unwrap_or(tc.learning_rate);
            tc.seed = s.opt("seed", seed)?.unwrap_or(tc.seed);
            let bases: Vec<NamedBase> = base_paths
                .iter()
                .map(|p| {
                    let name = p.file_stem().map_or("base".into(), |n| n.to_string_lossy().into_owned());
                    Ok(NamedBase::new(name, Arc::new(Transformer::load(p)?)))
                })
                .collect::<CliResult<_>>()?;
            let first = bases[0].model.clone();
            let vocab = tok.vocab_size();
            let value = match scheme {
                ConnectionScheme::LinearProbe => ValueModel::Probe(GatedProbe::new(
                    ProbeConfig {
                        d_in: first.config.d_model,
                        d_ff: s.opt("probe_d_ff", None)?.unwrap_or(96),
                        vocab_size: vocab,
                    },
                    tc.seed,
                )?),
                _ if value_init == "random" => ValueModel::Transformer(init_value_network(
                    ValueInit::Random,
                    TransformerConfig::value_xs(vocab),
                    tc.seed,
                )?),
                _ => {
                    let src = Transformer::load(&value_init)?;
                    ValueModel::Transformer(init_value_network(
                        ValueInit::Pretrained(&src),
                        src.config,
                        tc.seed,
                    )?)
                }
            };
            let mut g = GuidedModel::new(first, value, scheme, tok.clone(), tok, None)?;
            let mut log_file = match &log_path {
                Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
                None => None,
            };
            if let Some(f) = log_file.as_mut() {
                let _ = writeln!(f, "deltalogit-trainlog v1");
            }
            let log = train_value_with(&mut g, &bases, data.demonstrations()?, &tc, |r| {
                if let Some(f) = log_file.as_mut() {
                    let _ = writeln!(
                        f,
                        "step={} base={} loss={} ce={} l1={} lr={} grad_norm={} base_grad={}",
                        r.step, r.base, r.loss, r.ce, r.l1, r.lr, r.grad_norm, r.base_grad_abs
                    );
                }
            })?;
            if log.base_checksums_before != log.base_checksums_after {
                return Err(CliError::Runtime(Error::Checkpoint("a base changed during training".into())));
            }
            match &g.value {
                ValueModel::Transformer(v) => {
                    let meta = [
                        ("scheme".to_string(), scheme.name().to_string()),
                        ("lambda".to_string(), tc.lambda_l1.to_string()),
                    ]
                    .into_iter()
                    .collect();
                    write_file(&out, v.to_checkpoint_bytes(meta)?)?;
                }
                ValueModel::Probe(p) => p.save(&out)?,
                _ => unreachable!("trainable value models only"),
            }
            let last = log.records.last().expect("positive step budget");
            println!(
                "train-value: {} steps {:?}, final loss {:.4} (ce {:.4}, l1 {:.4})",
                log.records.len(),
                log.steps_per_base(),
                last.loss,
                last.ce,
                last.l1
            );
        }
        Command::Generate {
            cfg,
            model,
            prompt,
            max_new_tokens,
            temperature,
            seed,
        } => {
            let (s, _) = Section::load(&cfg.config, "generate")?;
            let g = build_guided(&s, model)?;
            let prompt: String = s.req("prompt", prompt)?;
            let temperature = s.opt("temperature", temperature)?.unwrap_or(0.0);
            let params = GenerateParams {
                max_new_tokens: s.opt("max_new_tokens", max_new_tokens)?.unwrap_or(32),
                temperature,
                seed: s.opt("seed", seed)?.unwrap_or(0),
                greedy: temperature <= 0.0,
            };
            let out = g.generate(&prompt, &params)?;
            println!("{}", out.text);
            if out.truncated {
                eprintln!("(truncated at the length limit)");
            }
        }
        Command::Eval {
            cfg,
            model,
            data,
            tasks,
            max_new_tokens,
        } => {
            let (s, _) = Section::load(&cfg.config, "eval")?;
            let g = build_guided(&s, model)?;
            let data = load_corpus(&s.req::<PathBuf>("data", data)?)?;
            let demos = data.demonstrations()?;
            let n = s.opt("tasks", tasks)?.unwrap_or(100).min(demos.len());
            let max_new = s.opt("max_new_tokens", max_new_tokens)?.unwrap_or(16);
            let table = ReportTable {
                title: "eval".into(),
                rows: vec![EvalReport {
                    base: "base".into(),
                    mode: if g.vocab_map.is_some() { "guided-mapped".into() } else { g.scheme.name().into() },
                    perplexity: if g.vocab_map.is_some() { 0.0 } else { eval_perplexity(&g, demos, true)? },
                    task_accuracy: eval_task_accuracy(&g, &demos[..n], max_new)?,
                    mean_abs_delta: if g.vocab_map.is_some() { 0.0 } else { eval_mean_abs_delta(&g, demos)? },
                }],
            };
            print!("{}", table.to_text());
        }
        Command::Transfer {
            cfg,
            tokenizer,
            value,
            scheme,
            bases,
            data,
            tasks,
            max_new_tokens,
            out,
        } => {
            let (s, _) = Section::load(&cfg.config, "transfer")?;
            let tok = load_tokenizer(&s.req::<PathBuf>("tokenizer", tokenizer)?)?;
            let scheme = parse_scheme(&s.opt::<String>("scheme", scheme)?.unwrap_or("residual".into()))?;
            let value = load_value(&s.req::<String>("value", value.map(|p| p.display().to_string()))?, scheme)?;
            let bases: Vec<PathBuf> = s.list("bases", bases)?;
            if bases.is_empty() {
                return Err(CliError::Usage("missing required key `transfer.bases` (config file or --bases)".into()));
            }
            let data = load_corpus(&s.req::<PathBuf>("data", data)?)?;
            let demos = data.demonstrations()?;
            let n = s.opt("tasks", tasks)?.unwrap_or(100).min(demos.len());
            let max_new = s.opt("max_new_tokens", max_new_tokens)?.unwrap_or(16);
            let out: Option<PathBuf> = s.opt("out", out)?;
            let targets: Vec<TransferTarget> = bases
                .iter()
                .map(|p| {
                    Ok(TransferTarget {
                        name: p.file_stem().map_or("base".into(), |n| n.to_string_lossy().into_owned()),
                        base: Arc::new(Transformer::load(p)?),
                        tokenizer: tok.clone(),
                        map: None,
                    })
                })
                .collect::<CliResult<_>>()?;
            let g = GuidedModel::new(targets[0].base.clone(), value, scheme, tok.clone(), tok, None)?;
            let table = transfer_experiment(&g, &targets, &demos[..n], demos, max_new)?;
            print!("{}", table.to_text());
            if let Some(out) = out {
                append_report(&out, &s.describe(), &table.to_lines())?;
            }
        }
        Command::MapVocab {
            cfg,
            base_tokenizer,
            value_tokenizer,
            corpus,
            min_weight,
            top_k,
            out,
            text,
        } => {
            let (s, _) = Section::load(&cfg.config, "map_vocab")?;
            let tb = load_tokenizer(&s.req::<PathBuf>("base_tokenizer", base_tokenizer)?)?;
            let tv = load_tokenizer(&s.req::<PathBuf>("value_tokenizer", value_tokenizer)?)?;
            let corpus = load_corpus(&s.req::<PathBuf>("corpus", corpus)?)?;
            let sparsify = match (s.opt("min_weight", min_weight)?, s.opt("top_k", top_k)?) {
                (Some(_), Some(_)) => {
                    return Err(CliError::Usage("give either min_weight or top_k, not both".into()))
                }
                (_, Some(k)) => Sparsify::TopK(k),
                (Some(w), None) => Sparsify::MinWeight(w),
                (None, None) => Sparsify::default(),
            };
            let out: PathBuf = s.req("out", out)?;
            let map = VocabMap::build(&tb, &tv, &corpus.texts(), sparsify)?;
            map.save(&out)?;
            if s.opt("text", text.then_some(true))?.unwrap_or(false) {
                write_file(&out.with_extension("txt"), map.to_text(Some(&tb), Some(&tv)))?;
            }
            println!(
                "map-vocab: {}x{}, {} entries, {} unobserved base tokens",
                map.rows(),
                map.cols(),
                map.nnz(),
                map.unobserved().len()
            );
        }
        Command::Overlap {
            cfg,
            map,
            base_tokenizer,
            value_tokenizer,
            corpus,
        } => {
            let (s, _) = Section::load(&cfg.config, "overlap")?;
            let map = VocabMap::load(s.req::<PathBuf>("map", map)?)?;
            let tb = load_tokenizer(&s.req::<PathBuf>("base_tokenizer", base_tokenizer)?)?;
            let tv = load_tokenizer(&s.req::<PathBuf>("value_tokenizer", value_tokenizer)?)?;
            let corpus = load_corpus(&s.req::<PathBuf>("corpus", corpus)?)?;
            if !map.matches(&tb, &tv) {
                return Err(CliError::Runtime(Error::VocabMismatch(
                    "map was built for different tokenizers".into(),
                )));
            }
            println!("overlap ratio {:.4}", overlap_ratio(&map, &tb, &tv, &corpus.texts()));
        }
        Command::Bench {
            cfg,
            lengths,
            runs,
            vocab_size,
            out,
        } => {
            let (s, _) = Section::load(&cfg.config, "bench")?;
            let mut lengths: Vec<usize> = s.list("lengths", lengths)?;
            if lengths.is_empty() {
                lengths = vec![128, 512, 1024];
            }
            let runs = s.opt("runs", runs)?.unwrap_or(5);
            let vocab = s.opt("vocab_size", vocab_size)?.unwrap_or(128);
            let out: Option<PathBuf> = s.opt("out", out)?;
            let configs = bench_models(vocab, lengths.iter().max().copied().unwrap_or(1) + 1)?;
            let rows = bench_inference(&configs, &lengths, runs)?;
            let text = bench_to_text(&rows);
            print!("{text}");
            if let Some(out) = out {
                append_report(&out, &s.describe(), &text)?;
            }
        }
    }
    Ok(())
}

/// Randomly initialized base-S, base-M and value-XS stretched to
/// `context` positions; timing does not depend on trained weights.
pub fn bench_models(vocab: usize, context: usize) -> crate::Result<Vec<(String, GuidedModel)>> {
    let words: Vec<String> = (0..vocab).map(|i| format!("w{i}")).collect();
    let tok = Arc::new(Tokenizer::train_bpe(&words, vocab.max(64), 0)?);
    let v = tok.vocab_size();
    let stretch = |mut c: TransformerConfig| {
        c.max_seq_len = context;
        c
    };
    let base_s = Arc::new(Transformer::random(stretch(TransformerConfig::base_s(v)), 1)?);
    let base_m = Arc::new(Transformer::random(stretch(TransformerConfig::base_m(v)), 2)?);
    let value = Transformer::random(stretch(TransformerConfig::value_xs(v)), 3)?;
    let guided = |b: &Arc<Transformer>| {
        GuidedModel::new(
            b.clone(),
            ValueModel::Transformer(value.clone()),
            ConnectionScheme::Residual,
            tok.clone(),
            tok.clone(),
            None,
        )
    };
    Ok(vec![
        ("base-s".into(), GuidedModel::base_only(base_s.clone(), tok.clone())?),
        ("base-s+value-xs".into(), guided(&base_s)?),
        ("base-m".into(), GuidedModel::base_only(base_m.clone(), tok.clone())?),
        ("base-m+value-xs".into(), guided(&base_m)?),
    ])
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}
