//! Base-to-value vocabulary mapping built from DTW alignments of the two
//! tokenizations of a shared corpus.
//!
//! For every text, both tokenizations are stripped of word-start markers
//! and aligned with dynamic time warping under a token edit-distance cost.
//! Aligned pairs are counted into a `|V_b|×|V_v|` matrix, which is then
//! row-normalized and sparsified. Each non-empty row is a probability
//! distribution, so a mapped logit redistributes a base logit over value
//! tokens without amplifying it.
//!
//! # Map file
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic            8 bytes  "DLVMAP01"
//! rows             u32      base vocabulary size n
//! cols             u32      value vocabulary size m
//! base_checksum    32 bytes SHA-256 of the base tokenizer file
//! value_checksum   32 bytes SHA-256 of the value tokenizer file
//! sparsify_mode    u8       0 = min_weight, 1 = top_k
//! sparsify_param   f64      threshold or k
//! unobserved       u32 count, then count × u32 base ids
//! row_count        u32      number of non-empty rows
//! rows             row_count × (u32 base_id, u32 entries, entries × (u32 col, f32 weight))
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Tokenizer;

const MAGIC: &[u8; 8] = b"DLVMAP01";

/// Levenshtein distance over Unicode scalar values.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Monotone alignment between two sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl AlignmentPath {
    /// Starts at (0,0), ends at (len_b-1, len_v-1), and advances one or
    /// both indices by exactly one per step.
    pub fn is_valid(&self, len_b: usize, len_v: usize) -> bool {
        if self.pairs.first() != Some(&(0, 0)) || self.pairs.last() != Some(&(len_b - 1, len_v - 1))
        {
            return false;
        }
        self.pairs.windows(2).all(|w| {
            let (di, dj) = (w[1].0 as isize - w[0].0 as isize, w[1].1 as isize - w[0].1 as isize);
            matches!((di, dj), (1, 0) | (0, 1) | (1, 1))
        })
    }
}

/// Minimum-cost alignment under steps (+1,0), (0,+1), (+1,+1); ties on
/// backtracking prefer the diagonal, then (+1,0).
pub fn dtw_align(
    len_b: usize,
    len_v: usize,
    cost: impl Fn(usize, usize) -> f64,
) -> Result<AlignmentPath> {
    if len_b == 0 || len_v == 0 {
        return Err(Error::EmptySequence);
    }
    let idx = |i: usize, j: usize| i * len_v + j;
    let mut acc = vec![f64::INFINITY; len_b * len_v];
    for i in 0..len_b {
        for j in 0..len_v {
            let best_prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[idx(i, j)] = best_prev + cost(i, j);
        }
    }
    let mut pairs = vec![(len_b - 1, len_v - 1)];
    let (mut i, mut j) = (len_b - 1, len_v - 1);
    while (i, j) != (0, 0) {
        let diag = if i > 0 && j > 0 { acc[idx(i - 1, j - 1)] } else { f64::INFINITY };
        let up = if i > 0 { acc[idx(i - 1, j)] } else { f64::INFINITY };
        let left = if j > 0 { acc[idx(i, j - 1)] } else { f64::INFINITY };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        cost: acc[idx(len_b - 1, len_v - 1)],
    })
}

/// DTW over token strings with edit-distance cost.
pub fn align_tokens(seq_b: &[String], seq_v: &[String]) -> Result<AlignmentPath> {
    dtw_align(seq_b.len(), seq_v.len(), |i, j| {
        edit_distance(&seq_b[i], &seq_v[j]) as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Sparsify {
    /// Drop normalized weights below the threshold, then renormalize.
    MinWeight(f64),
    /// Keep the `k` heaviest entries per row, then renormalize.
    TopK(usize),
}

impl Default for Sparsify {
    fn default() -> Self {
        Sparsify::MinWeight(0.01)
    }
}

/// Sparse row-stochastic `rows×cols` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabMap {
    rows: usize,
    cols: usize,
    entries: Vec<Vec<(u32, f32)>>,
    unobserved: BTreeSet<u32>,
    sparsify: Sparsify,
    base_checksum: [u8; 32],
    value_checksum: [u8; 32],
}

fn checksum_bytes(tok: &Tokenizer) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&hex::decode(tok.checksum()).expect("hex checksum"));
    out
}

fn normalize_row(counts: &BTreeMap<u32, f64>, sparsify: Sparsify) -> Vec<(u32, f32)> {
    let total: f64 = counts.values().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut weighted: Vec<(u32, f64)> = counts.iter().map(|(&c, &n)| (c, n / total)).collect();
    match sparsify {
        Sparsify::MinWeight(th) => {
            let kept: Vec<_> = weighted.iter().copied().filter(|&(_, w)| w >= th).collect();
            // A row whose mass is spread below the threshold keeps its mode.
            weighted = if kept.is_empty() {
                let best = weighted
                    .iter()
                    .copied()
                    .fold(None::<(u32, f64)>, |acc, e| match acc {
                        Some(a) if a.1 >= e.1 => Some(a),
                        _ => Some(e),
                    });
                best.into_iter().collect()
            } else {
                kept
            };
        }
        Sparsify::TopK(k) => {
            weighted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            weighted.truncate(k.max(1));
            weighted.sort_by_key(|e| e.0);
        }
    }
    let kept_total: f64 = weighted.iter().map(|e| e.1).sum();
    weighted
        .into_iter()
        .map(|(c, w)| (c, (w / kept_total) as f32))
        .collect()
}

impl VocabMap {
    /// Identity map over `n` tokens.
    pub fn identity(n: usize) -> Self {
        VocabMap {
            rows: n,
            cols: n,
            entries: (0..n as u32).map(|i| vec![(i, 1.0)]).collect(),
            unobserved: BTreeSet::new(),
            sparsify: Sparsify::default(),
            base_checksum: [0; 32],
            value_checksum: [0; 32],
        }
    }

    /// Builds a map from explicit rows; each row is normalized.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(u32, f32)>>) -> Result<Self> {
        let mut entries = Vec::with_capacity(rows.len());
        for (r, mut row) in rows.into_iter().enumerate() {
            row.sort_by_key(|e| e.0);
            if row.iter().any(|&(c, w)| c as usize >= cols || !(w > 0.0)) {
                return Err(Error::invalid(
                    "vocab_map",
                    format!("row {r} has an out-of-range column or non-positive weight"),
                ));
            }
            let total: f32 = row.iter().map(|e| e.1).sum();
            entries.push(row.into_iter().map(|(c, w)| (c, w / total)).collect());
        }
        Ok(VocabMap {
            rows: entries.len(),
            cols,
            entries,
            unobserved: BTreeSet::new(),
            sparsify: Sparsify::default(),
            base_checksum: [0; 32],
            value_checksum: [0; 32],
        })
    }

    pub fn build(
        tok_b: &Tokenizer,
        tok_v: &Tokenizer,
        corpus: &[String],
        sparsify: Sparsify,
    ) -> Result<Self> {
        let counts = count_alignments(tok_b, tok_v, corpus)?;
        let (n, m) = (tok_b.vocab_size(), tok_v.vocab_size());
        let sb = tok_b.specials();
        let sv = tok_v.specials();
        let mut entries = vec![Vec::new(); n];
        let mut unobserved = BTreeSet::new();
        for (id, row) in entries.iter_mut().enumerate() {
            let id = id as u32;
            if sb.contains(id) {
                // Specials are excluded from alignment and map onto their
                // counterparts.
                let target = [
                    (sb.pad, sv.pad),
                    (sb.bos, sv.bos),
                    (sb.eos, sv.eos),
                    (sb.unk, sv.unk),
                ]
                .into_iter()
                .find(|(b, _)| *b == id)
                .map(|(_, v)| v)
                .unwrap();
                *row = vec![(target, 1.0)];
                continue;
            }
            match counts.get(&id) {
                Some(c) => *row = normalize_row(c, sparsify),
                None => {
                    unobserved.insert(id);
                    let surface = tok_b.vocab().token(id).unwrap_or_default();
                    if let Some(j) = tok_v.vocab().id(surface) {
                        *row = vec![(j, 1.0)];
                    }
                }
            }
        }
        Ok(VocabMap {
            rows: n,
            cols: m,
            entries,
            unobserved,
            sparsify,
            base_checksum: checksum_bytes(tok_b),
            value_checksum: checksum_bytes(tok_v),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, base_id: u32) -> &[(u32, f32)] {
        &self.entries[base_id as usize]
    }

    /// Base ids never seen in the alignment corpus.
    pub fn unobserved(&self) -> &BTreeSet<u32> {
        &self.unobserved
    }

    /// Base ids whose row has no entries at all.
    pub fn zero_rows(&self) -> BTreeSet<u32> {
        (0..self.rows as u32)
            .filter(|&i| self.entries[i as usize].is_empty())
            .collect()
    }

    pub fn sparsify(&self) -> Sparsify {
        self.sparsify
    }

    pub fn nnz(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    /// Largest deviation from 1 among non-empty row sums.
    pub fn max_row_sum_error(&self) -> f64 {
        self.entries
            .iter()
            .filter(|r| !r.is_empty())
            .map(|r| (r.iter().map(|e| e.1 as f64).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Sparse product `z·M` for one row of base logits.
    pub fn map_logits(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.rows {
            return Err(Error::shape("map_logits", &[z.len()], &[self.rows, self.cols]));
        }
        let mut out = vec![0.0f32; self.cols];
        for (row, &zi) in self.entries.iter().zip(z) {
            for &(c, w) in row {
                out[c as usize] += zi * w;
            }
        }
        Ok(out)
    }

    /// Maps every row of `z: [T×rows]`; the result is a constant tensor.
    pub fn map_rows(&self, z: &Tensor) -> Result<Tensor> {
        if z.last_dim() != self.rows || z.shape().len() != 2 {
            return Err(Error::shape("map_rows", z.shape(), &[self.rows, self.cols]));
        }
        let mut out = Vec::with_capacity(z.rows() * self.cols);
        for r in 0..z.rows() {
            out.extend(self.map_logits(z.row(r))?);
        }
        Tensor::from_vec(out, &[z.rows(), self.cols])
    }

    /// Dense `rows×cols` copy, mainly for inspection and tests.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut dense = vec![0.0; self.rows * self.cols];
        for (r, row) in self.entries.iter().enumerate() {
            for &(c, w) in row {
                dense[r * self.cols + c as usize] = w;
            }
        }
        dense
    }

    /// Highest-weight column of a row (lowest id on ties).
    pub fn argmax_col(&self, base_id: u32) -> Option<u32> {
        self.entries[base_id as usize]
            .iter()
            .fold(None::<(u32, f32)>, |acc, &e| match acc {
                Some(a) if a.1 >= e.1 => Some(a),
                _ => Some(e),
            })
            .map(|e| e.0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&self.base_checksum);
        out.extend_from_slice(&self.value_checksum);
        let (mode, param) = match self.sparsify {
            Sparsify::MinWeight(t) => (0u8, t),
            Sparsify::TopK(k) => (1u8, k as f64),
        };
        out.push(mode);
        out.extend_from_slice(&param.to_le_bytes());
        out.extend_from_slice(&(self.unobserved.len() as u32).to_le_bytes());
        for &id in &self.unobserved {
            out.extend_from_slice(&id.to_le_bytes());
        }
        let non_empty: Vec<_> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.is_empty())
            .collect();
        out.extend_from_slice(&(non_empty.len() as u32).to_le_bytes());
        for (id, row) in non_empty {
            out.extend_from_slice(&(id as u32).to_le_bytes());
            out.extend_from_slice(&(row.len() as u32).to_le_bytes());
            for &(c, w) in row {
                out.extend_from_slice(&c.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("vocab map: bad magic".into()));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut base_checksum = [0u8; 32];
        base_checksum.copy_from_slice(r.take(32)?);
        let mut value_checksum = [0u8; 32];
        value_checksum.copy_from_slice(r.take(32)?);
        let mode = r.take(1)?[0];
        let param = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let sparsify = match mode {
            0 => Sparsify::MinWeight(param),
            1 => Sparsify::TopK(param as usize),
            _ => return Err(Error::Format("vocab map: bad sparsify mode".into())),
        };
        let n_unobserved = r.u32()?;
        let mut unobserved = BTreeSet::new();
        for _ in 0..n_unobserved {
            unobserved.insert(r.u32()?);
        }
        let mut entries = vec![Vec::new(); rows];
        for _ in 0..r.u32()? {
            let id = r.u32()? as usize;
            let count = r.u32()?;
            let row = entries
                .get_mut(id)
                .ok_or_else(|| Error::Format(format!("vocab map: row {id} out of range")))?;
            for _ in 0..count {
                let c = r.u32()?;
                let w = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                if c as usize >= cols {
                    return Err(Error::Format(format!("vocab map: column {c} out of range")));
                }
                row.push((c, w));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("vocab map: trailing bytes".into()));
        }
        Ok(VocabMap {
            rows,
            cols,
            entries,
            unobserved,
            sparsify,
            base_checksum,
            value_checksum,
        })
    }

    /// Human-readable export: one line per non-empty row.
    pub fn to_text(&self, tok_b: Option<&Tokenizer>, tok_v: Option<&Tokenizer>) -> String {
        let mut s = String::new();
        writeln!(s, "deltalogit-vocab-map v1").unwrap();
        writeln!(s, "rows {} cols {}", self.rows, self.cols).unwrap();
        writeln!(s, "base_checksum {}", hex::encode(self.base_checksum)).unwrap();
        writeln!(s, "value_checksum {}", hex::encode(self.value_checksum)).unwrap();
        writeln!(s, "sparsify {:?}", self.sparsify).unwrap();
        writeln!(s, "unobserved {}", self.unobserved.len()).unwrap();
        let name = |t: Option<&Tokenizer>, id: u32| {
            t.and_then(|t| t.vocab().token(id))
                .map(|s| format!("{id}:{s:?}"))
                .unwrap_or_else(|| id.to_string())
        };
        for (id, row) in self.entries.iter().enumerate() {
            if row.is_empty() {
                continue;
            }
            let cells: Vec<String> = row
                .iter()
                .map(|&(c, w)| format!("{}={w:.4}", name(tok_v, c)))
                .collect();
            writeln!(s, "{} -> {}", name(tok_b, id as u32), cells.join(" ")).unwrap();
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Whether the map was built from these two tokenizers.
    pub fn matches(&self, tok_b: &Tokenizer, tok_v: &Tokenizer) -> bool {
        self.base_checksum == checksum_bytes(tok_b) && self.value_checksum == checksum_bytes(tok_v)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("vocab map: truncated".into()))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Raw alignment counts `C[b][v]` accumulated over the corpus.
pub fn count_alignments(
    tok_b: &Tokenizer,
    tok_v: &Tokenizer,
    corpus: &[String],
) -> Result<BTreeMap<u32, BTreeMap<u32, f64>>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<u32, BTreeMap<u32, f64>> = BTreeMap::new();
    for text in corpus {
        let tb = tok_b.aligned_tokens(&tok_b.encode(text));
        let tv = tok_v.aligned_tokens(&tok_v.encode(text));
        if tb.is_empty() || tv.is_empty() {
            continue;
        }
        let sb: Vec<String> = tb.iter().map(|(_, s)| s.clone()).collect();
        let sv: Vec<String> = tv.iter().map(|(_, s)| s.clone()).collect();
        let path = align_tokens(&sb, &sv)?;
        for (i, j) in path.pairs {
            *counts.entry(tb[i].0).or_default().entry(tv[j].0).or_default() += 1.0;
        }
    }
    Ok(counts)
}

/// Mean over texts of the multiset overlap between argmax-mapped base
/// tokens and the value tokenizer's own tokens, relative to the latter.
pub fn overlap_ratio(
    map: &VocabMap,
    tok_b: &Tokenizer,
    tok_v: &Tokenizer,
    corpus: &[String],
) -> f64 {
    let mut total = 0.0;
    let mut texts = 0usize;
    for text in corpus {
        let golden: Vec<u32> = tok_v
            .aligned_tokens(&tok_v.encode(text))
            .into_iter()
            .map(|e| e.0)
            .collect();
        if golden.is_empty() {
            continue;
        }
        let mut mapped: BTreeMap<u32, usize> = BTreeMap::new();
        for (id, _) in tok_b.aligned_tokens(&tok_b.encode(text)) {
            if (id as usize) < map.rows() {
                if let Some(c) = map.argmax_col(id) {
                    *mapped.entry(c).or_default() += 1;
                }
            }
        }
        let mut golden_counts: BTreeMap<u32, usize> = BTreeMap::new();
        for g in &golden {
            *golden_counts.entry(*g).or_default() += 1;
        }
        let inter: usize = golden_counts
            .iter()
            .map(|(id, &n)| n.min(mapped.get(id).copied().unwrap_or(0)))
            .sum();
        total += inter as f64 / golden.len() as f64;
        texts += 1;
    }
    if texts == 0 {
        0.0
    } else {
        total / texts as f64
    }
}
