//! Synthetic corpora: plain grammar sentences for pretraining and
//! (prompt, response) demonstrations from toy tasks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Plain,
    Demonstrations,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    /// `toy` for plain text; `reverse`, `qa`, `style` or `mixed` for
    /// demonstrations.
    pub grammar: String,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub prompt: String,
    pub response: String,
}

impl Demonstration {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Demonstration {
            prompt: prompt.into(),
            response: response.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Corpus {
    Plain(Vec<String>),
    Demonstrations(Vec<Demonstration>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Corpus::Plain(v) => v.len(),
            Corpus::Demonstrations(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every string in the corpus, prompts and responses joined by a space.
    pub fn texts(&self) -> Vec<String> {
        match self {
            Corpus::Plain(v) => v.clone(),
            Corpus::Demonstrations(v) => v
                .iter()
                .map(|d| format!("{} {}", d.prompt, d.response))
                .collect(),
        }
    }

    /// One line per item; demonstrations are `prompt<TAB>response`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        match self {
            Corpus::Plain(v) => {
                out.push_str("deltalogit-corpus v1 plain\n");
                for s in v {
                    out.push_str(s);
                    out.push('\n');
                }
            }
            Corpus::Demonstrations(v) => {
                out.push_str("deltalogit-corpus v1 demonstrations\n");
                for d in v {
                    out.push_str(&d.prompt);
                    out.push('\t');
                    out.push_str(&d.response);
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        match header {
            "deltalogit-corpus v1 plain" => Ok(Corpus::Plain(lines.map(str::to_string).collect())),
            "deltalogit-corpus v1 demonstrations" => lines
                .enumerate()
                .map(|(i, l)| {
                    l.split_once('\t')
                        .map(|(p, r)| Demonstration::new(p, r))
                        .ok_or_else(|| Error::Format(format!("corpus line {}: missing tab", i + 2)))
                })
                .collect::<Result<_>>()
                .map(Corpus::Demonstrations),
            other => Err(Error::Format(format!("unknown corpus header {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn demonstrations(&self) -> Result<&[Demonstration]> {
        match self {
            Corpus::Demonstrations(v) => Ok(v),
            Corpus::Plain(_) => Err(Error::Config("expected a demonstrations corpus".into())),
        }
    }

    pub fn plain(&self) -> Result<&[String]> {
        match self {
            Corpus::Plain(v) => Ok(v),
            Corpus::Demonstrations(_) => Err(Error::Config("expected a plain corpus".into())),
        }
    }
}

const ADJECTIVES: &[&str] = &["red", "small", "old", "quiet", "bright", "green", "cold"];
const NOUNS: &[&str] = &["cat", "dog", "bird", "tree", "river", "house", "stone", "lamp"];
const VERBS: &[&str] = &["sees", "finds", "likes", "moves", "holds", "follows"];

/// Fact table for the template-QA task: (subject, attribute, value).
pub const FACTS: &[(&str, &str, &str)] = &[
    ("sky", "color", "blue"),
    ("grass", "color", "green"),
    ("snow", "color", "white"),
    ("sun", "color", "yellow"),
    ("cat", "sound", "meow"),
    ("dog", "sound", "woof"),
    ("bird", "sound", "tweet"),
    ("cow", "sound", "moo"),
    ("river", "size", "long"),
    ("stone", "size", "small"),
    ("tree", "size", "tall"),
    ("house", "size", "big"),
];

pub const STYLE_SUFFIX: &str = "thank you";

fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty word list")
}

fn digits(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n)
        .map(|_| rng.gen_range(0..10).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

fn grammar_sentence(rng: &mut impl Rng) -> String {
    match rng.gen_range(0..10) {
        0..=4 => format!(
            "the {} {} {} the {}",
            pick(rng, ADJECTIVES),
            pick(rng, NOUNS),
            pick(rng, VERBS),
            pick(rng, NOUNS)
        ),
        5 | 6 => digits(rng, 3, 8),
        7 | 8 => {
            let (s, _, v) = FACTS[rng.gen_range(0..FACTS.len())];
            format!("the {s} is {v}")
        }
        _ => format!("a {} {} is here", pick(rng, ADJECTIVES), pick(rng, NOUNS)),
    }
}

/// Reverses the payload character by character.
pub fn reverse_payload(payload: &str) -> String {
    payload.chars().rev().collect()
}

fn reverse_task(rng: &mut impl Rng) -> Demonstration {
    let payload = digits(rng, 2, 4);
    Demonstration::new(format!("R: {payload}"), reverse_payload(&payload))
}

fn qa_task(rng: &mut impl Rng) -> Demonstration {
    let (s, a, v) = FACTS[rng.gen_range(0..FACTS.len())];
    Demonstration::new(format!("Q: {a} of {s}"), format!("the {a} of {s} is {v}"))
}

fn style_task(rng: &mut impl Rng) -> Demonstration {
    let s = format!("the {} {} {} the {}", pick(rng, ADJECTIVES), pick(rng, NOUNS), pick(rng, VERBS), pick(rng, NOUNS));
    Demonstration::new(format!("S: {s}"), format!("{s} {STYLE_SUFFIX}"))
}

/// Deterministic corpus for `spec`.
pub fn gen_synthetic_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match (spec.kind, spec.grammar.as_str()) {
        (CorpusKind::Plain, "toy") => Ok(Corpus::Plain(
            (0..spec.size).map(|_| grammar_sentence(&mut rng)).collect(),
        )),
        (CorpusKind::Demonstrations, task) => {
            let gen: fn(&mut ChaCha8Rng) -> Demonstration = match task {
                "reverse" => reverse_task,
                "qa" => qa_task,
                "style" => style_task,
                "mixed" => |rng| match rng.gen_range(0..3) {
                    0 => reverse_task(rng),
                    1 => qa_task(rng),
                    _ => style_task(rng),
                },
                other => return Err(Error::Config(format!("unknown grammar id {other:?}"))),
            };
            Ok(Corpus::Demonstrations(
                (0..spec.size).map(|_| gen(&mut rng)).collect(),
            ))
        }
        (_, other) => Err(Error::Config(format!("unknown grammar id {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: CorpusKind, grammar: &str, size: usize) -> CorpusSpec {
        CorpusSpec {
            kind,
            grammar: grammar.into(),
            size,
            seed: 9,
        }
    }

    #[test]
    fn deterministic_and_sized() {
        for s in [
            spec(CorpusKind::Plain, "toy", 50),
            spec(CorpusKind::Demonstrations, "mixed", 40),
        ] {
            let a = gen_synthetic_corpus(&s).unwrap();
            assert_eq!(a, gen_synthetic_corpus(&s).unwrap());
            assert_eq!(a.len(), s.size);
        }
    }

    #[test]
    fn reverse_definition() {
        assert_eq!(reverse_payload("abc"), "cba");
        let c = gen_synthetic_corpus(&spec(CorpusKind::Demonstrations, "reverse", 20)).unwrap();
        for d in c.demonstrations().unwrap() {
            let payload = d.prompt.strip_prefix("R: ").unwrap();
            assert_eq!(d.response, reverse_payload(payload));
        }
    }

    #[test]
    fn unknown_grammar_is_rejected() {
        assert!(gen_synthetic_corpus(&spec(CorpusKind::Demonstrations, "poetry", 3)).is_err());
        assert!(gen_synthetic_corpus(&spec(CorpusKind::Plain, "reverse", 3)).is_err());
    }

    #[test]
    fn text_round_trip() {
        let c = gen_synthetic_corpus(&spec(CorpusKind::Demonstrations, "qa", 5)).unwrap();
        assert_eq!(Corpus::from_text(&c.to_text()).unwrap(), c);
        let p = gen_synthetic_corpus(&spec(CorpusKind::Plain, "toy", 5)).unwrap();
        assert_eq!(Corpus::from_text(&p.to_text()).unwrap(), p);
    }
}
