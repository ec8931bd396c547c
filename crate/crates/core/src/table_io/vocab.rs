//! Frequency vocabulary and the cell-value frequency table used for
//! corruption sampling.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::tokenize::{detokenize, tokenize, PAD_TOKEN, UNK_TOKEN};
use super::{RawTable, Table};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub type TokenId = u32;
pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRecord {
    pub token: String,
    pub id: TokenId,
    pub count: u64,
}

/// Dense token ↔ id map. Ids 0 and 1 are always `[pad]` and `[unk]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    /// Keeps the `size − 2` most frequent tokens (ties broken by token text)
    /// plus the two reserved ids.
    pub fn build<'a, I>(corpus: I, size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a RawTable>,
    {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut seen_any = false;
        for table in corpus {
            seen_any = true;
            for text in table.texts() {
                for tok in tokenize(text) {
                    if tok != PAD_TOKEN && tok != UNK_TOKEN {
                        *counts.entry(tok).or_default() += 1;
                    }
                }
            }
        }
        if !seen_any {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(size - 2);
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut freq = vec![0, 0];
        for (t, c) in ranked {
            tokens.push(t);
            freq.push(c);
        }
        Ok(Self::from_parts(tokens, freq))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    /// Tokenizes and maps out-of-vocabulary tokens to `UNK`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect();
        detokenize(&toks)
    }

    pub fn records(&self) -> Vec<VocabRecord> {
        self.tokens
            .iter()
            .zip(&self.counts)
            .enumerate()
            .map(|(i, (t, &c))| VocabRecord {
                token: t.clone(),
                id: i as TokenId,
                count: c,
            })
            .collect()
    }

    /// Rebuilds from records; ids must be dense and start with the reserved tokens.
    pub fn from_records(mut records: Vec<VocabRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.id);
        for (i, r) in records.iter().enumerate() {
            if r.id as usize != i {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary ids are not dense: expected {i}, found {}",
                    r.id
                )));
            }
        }
        if records.len() < 2 || records[0].token != PAD_TOKEN || records[1].token != UNK_TOKEN {
            return Err(Error::InvalidArgument(
                "vocabulary must start with [pad], [unk]".into(),
            ));
        }
        let (tokens, counts) = records.into_iter().map(|r| (r.token, r.count)).unzip();
        Ok(Self::from_parts(tokens, counts))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::BadRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?);
        }
        Self::from_records(records)
    }
}

/// Corpus frequency of every distinct non-empty cell or header value.
#[derive(Debug, Clone)]
pub struct ValueFrequencies {
    values: Vec<Vec<TokenId>>,
    counts: Vec<u64>,
    sampler: WeightedIndex<u64>,
}

impl ValueFrequencies {
    pub fn from_counts(counts: BTreeMap<Vec<TokenId>, u64>) -> Result<Self> {
        let (values, counts): (Vec<_>, Vec<_>) = counts.into_iter().filter(|(_, c)| *c > 0).unzip();
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two distinct cell values to sample replacements".into(),
            ));
        }
        let sampler = WeightedIndex::new(counts.iter().copied())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(Self {
            values,
            counts,
            sampler,
        })
    }

    pub fn from_tables<'a, I>(tables: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Table>,
    {
        let mut counts: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
        for t in tables {
            for h in &t.headers {
                if !h.is_empty() {
                    *counts.entry(h.clone()).or_default() += 1;
                }
            }
            for row in &t.rows {
                for cell in row {
                    if !cell.is_empty() {
                        *counts.entry(cell.clone()).or_default() += 1;
                    }
                }
            }
        }
        Self::from_counts(counts)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count_of(&self, value: &[TokenId]) -> u64 {
        self.values
            .iter()
            .position(|v| v == value)
            .map_or(0, |i| self.counts[i])
    }

    /// One draw proportional to corpus frequency.
    pub fn sample(&self, rng: &mut Rng) -> &[TokenId] {
        &self.values[self.sampler.sample(rng)]
    }

    /// Draws until the value differs from `original`.
    pub fn sample_different(&self, original: &[TokenId], rng: &mut Rng) -> &[TokenId] {
        loop {
            let v = self.sample(rng);
            if v != original {
                return v;
            }
        }
    }
}
