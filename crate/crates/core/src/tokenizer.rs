//! Byte-pair-encoding tokenizer over characters.
//!
//! Text is split on single spaces into words. Each word is prefixed with
//! the word-start marker [`WORD_START`] and then segmented into characters,
//! which are merged pairwise following the learned merge table. Decoding
//! concatenates token strings, turns markers back into spaces and drops the
//! leading one, so `decode(encode(t)) == t` whenever every character of `t`
//! was seen during training.
//!
//! # File format
//!
//! ```text
//! deltalogit-tokenizer v1
//! seed <u64>
//! specials <pad> <bos> <eos> <unk>
//! vocab <count>
//! <id>\t<escaped token>          (one line per entry, ids ascending)
//! merges <count>
//! <escaped left>\t<escaped right> (in merge order)
//! ```
//!
//! Escaping applies to every token string: `\` is written `\\`, tab `\t`,
//! newline `\n`, carriage return `\r`, space `\s`, and any other control
//! character `\u{HEX}` with lowercase hex digits. All other characters are
//! written verbatim as UTF-8. Lines end with a single `\n`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Prefix character marking word-initial tokens.
pub const WORD_START: char = '\u{2581}';

const FORMAT_TAG: &str = "deltalogit-tokenizer v1";

/// Reserved token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
}

const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

impl Default for Specials {
    fn default() -> Self {
        Specials {
            pad: 0,
            bos: 1,
            eos: 2,
            unk: 3,
        }
    }
}

impl Specials {
    pub fn contains(&self, id: u32) -> bool {
        id == self.pad || id == self.bos || id == self.eos || id == self.unk
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
    specials: Specials,
}

impl Vocabulary {
    fn new(tokens: Vec<String>) -> Result<Self> {
        let specials = Specials::default();
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate().skip(SPECIAL_NAMES.len()) {
            if token_to_id.insert(tok.clone(), id as u32).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary {
            id_to_token: tokens,
            token_to_id,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Id of a non-special token string.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Removes a leading word-start marker.
pub fn strip_prefix(token: &str) -> &str {
    token.strip_prefix(WORD_START).unwrap_or(token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    seed: u64,
}

/// Encoded ids plus the number of characters mapped to the unknown token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub unknown: usize,
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    // An empty text has no words; otherwise single-space splitting keeps
    // runs of spaces recoverable as empty words.
    let empty = text.is_empty();
    text.split(' ').filter(move |_| !empty)
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_START)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

impl Tokenizer {
    /// Learns a merge table by repeatedly merging the most frequent adjacent
    /// symbol pair, breaking ties by the lexicographically smallest pair.
    ///
    /// The procedure is fully deterministic; `seed` is recorded with the
    /// tokenizer so that runs can be traced back to their configuration.
    pub fn train_bpe(corpus: &[String], vocab_size: usize, seed: u64) -> Result<Self> {
        if corpus.iter().all(|t| t.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in corpus {
            for w in words(text) {
                *word_counts.entry(w).or_default() += 1;
            }
        }
        let mut base: BTreeSet<char> = BTreeSet::new();
        base.insert(WORD_START);
        for w in word_counts.keys() {
            base.extend(w.chars());
        }
        let floor = SPECIAL_NAMES.len() + base.len();
        if vocab_size < floor {
            return Err(Error::invalid(
                "train_bpe",
                format!("vocab_size {vocab_size} below {floor} base symbols and specials"),
            ));
        }
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(base.iter().map(|c| c.to_string()));
        let mut known: BTreeSet<String> = tokens[SPECIAL_NAMES.len()..].iter().cloned().collect();

        let mut segmented: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &c)| (word_symbols(w), c))
            .collect();
        let mut merges = Vec::new();
        while tokens.len() < vocab_size {
            let mut pair_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, count) in &segmented {
                for pair in syms.windows(2) {
                    *pair_counts.entry((&pair[0], &pair[1])).or_default() += count;
                }
            }
            // BTreeMap iterates pairs in lexicographic order, so the first
            // maximum found is the tie-break winner.
            let mut best: Option<((&str, &str), usize)> = None;
            for (pair, &count) in &pair_counts {
                if best.map_or(true, |(_, c)| count > c) {
                    best = Some((*pair, count));
                }
            }
            let Some(((a, b), _)) = best else { break };
            let (a, b) = (a.to_string(), b.to_string());
            let merged = format!("{a}{b}");
            for (syms, _) in segmented.iter_mut() {
                merge_in_place(syms, &a, &b, &merged);
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
            merges.push((a, b));
        }
        Self::from_parts(tokens, merges, seed)
    }

    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>, seed: u64) -> Result<Self> {
        let vocab = Vocabulary::new(tokens)?;
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Ok(Tokenizer {
            vocab,
            merges,
            merge_rank,
            seed,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn specials(&self) -> Specials {
        self.vocab.specials
    }

    pub fn bos(&self) -> u32 {
        self.vocab.specials.bos
    }

    pub fn eos(&self) -> u32 {
        self.vocab.specials.eos
    }

    pub fn pad(&self) -> u32 {
        self.vocab.specials.pad
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn segment_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let (a, b) = &self.merges[rank];
            let merged = format!("{a}{b}");
            merge_in_place(&mut syms, a, b, &merged);
        }
        syms
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_with_stats(text).ids
    }

    pub fn encode_with_stats(&self, text: &str) -> Encoding {
        let mut ids = Vec::new();
        let mut unknown = 0;
        for w in words(text) {
            for sym in self.segment_word(w) {
                match self.vocab.id(&sym) {
                    Some(id) => ids.push(id),
                    None => {
                        // Only single unseen characters survive segmentation.
                        unknown += sym.chars().count();
                        ids.push(self.vocab.specials.unk);
                    }
                }
            }
        }
        Encoding { ids, unknown }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self.vocab.token(id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.vocab.len(),
            })?;
            if self.vocab.specials.contains(id) {
                continue;
            }
            out.push_str(tok);
        }
        let spaced = out.replace(WORD_START, " ");
        Ok(spaced.strip_prefix(' ').unwrap_or(&spaced).to_string())
    }

    /// Surface strings of `ids` with specials removed and word-start markers
    /// stripped, paired with their ids.
    pub fn aligned_tokens(&self, ids: &[u32]) -> Vec<(u32, String)> {
        ids.iter()
            .filter(|&&id| !self.vocab.specials.contains(id))
            .filter_map(|&id| {
                self.vocab
                    .token(id)
                    .map(|t| (id, strip_prefix(t).to_string()))
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sp = self.vocab.specials;
        writeln!(s, "{FORMAT_TAG}").unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "specials {} {} {} {}", sp.pad, sp.bos, sp.eos, sp.unk).unwrap();
        writeln!(s, "vocab {}", self.vocab.len()).unwrap();
        for (id, tok) in self.vocab.id_to_token.iter().enumerate() {
            writeln!(s, "{id}\t{}", escape(tok)).unwrap();
        }
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{}\t{}", escape(a), escape(b)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("tokenizer file: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(FORMAT_TAG) {
            return Err(bad("missing or unknown format tag"));
        }
        let seed = lines
            .next()
            .and_then(|l| l.strip_prefix("seed "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad seed line"))?;
        let specials: Vec<u32> = lines
            .next()
            .and_then(|l| l.strip_prefix("specials "))
            .map(|v| v.split(' ').filter_map(|x| x.parse().ok()).collect())
            .ok_or_else(|| bad("bad specials line"))?;
        if specials != [0, 1, 2, 3] {
            return Err(bad("unsupported special id layout"));
        }
        let n: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("vocab "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad vocab header"))?;
        let mut tokens = Vec::with_capacity(n);
        for expect in 0..n {
            let line = lines.next().ok_or_else(|| bad("truncated vocab"))?;
            let (id, tok) = line.split_once('\t').ok_or_else(|| bad("bad vocab entry"))?;
            if id.parse::<usize>().ok() != Some(expect) {
                return Err(bad("vocab ids out of order"));
            }
            tokens.push(unescape(tok)?);
        }
        if tokens.len() < SPECIAL_NAMES.len() || tokens[..SPECIAL_NAMES.len()] != SPECIAL_NAMES {
            return Err(bad("special tokens missing"));
        }
        let m: usize = lines
            .next()
            .and_then(|l| l.strip_prefix("merges "))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("bad merges header"))?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (a, b) = line.split_once('\t').ok_or_else(|| bad("bad merge entry"))?;
            merges.push((unescape(a)?, unescape(b)?));
        }
        Self::from_parts(tokens, merges, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Hex SHA-256 of the serialized form.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn merge_in_place(syms: &mut Vec<String>, a: &str, b: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == a && syms[i + 1] == b {
            syms[i] = merged.to_string();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            ' ' => out.push_str("\\s"),
            c if c.is_control() => write!(out, "\\u{{{:x}}}", c as u32).unwrap(),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let bad = || Error::Format(format!("bad escape in {s:?}"));
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next().ok_or_else(bad)? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            's' => out.push(' '),
            'u' => {
                if chars.next() != Some('{') {
                    return Err(bad());
                }
                let hex: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let code = u32::from_str_radix(&hex, 16).map_err(|_| bad())?;
                out.push(char::from_u32(code).ok_or_else(bad)?);
            }
            _ => return Err(bad()),
        }
    }
    Ok(out)
}
