//! Corpus records, tokenization and the in-memory table model.

mod tokenize;
mod vocab;

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use tokenize::{detokenize, tokenize, truncate_text, PAD_TOKEN, UNK_TOKEN};
pub use vocab::{TokenId, ValueFrequencies, VocabRecord, Vocabulary, PAD, UNK};

/// One line of the JSONL corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTable {
    pub id: String,
    #[serde(default)]
    pub caption: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    /// Caption, headers, then cells in row-major order.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.caption.as_str())
            .chain(self.headers.iter().map(String::as_str))
            .chain(self.rows.iter().flatten().map(String::as_str))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationLimits {
    pub max_rows: usize,
    pub max_cols: usize,
    /// Shared by captions, headers and cells.
    pub max_tokens_per_text: usize,
}

impl Default for TruncationLimits {
    fn default() -> Self {
        Self {
            max_rows: 30,
            max_cols: 20,
            max_tokens_per_text: 64,
        }
    }
}

impl TruncationLimits {
    pub const UNLIMITED: TruncationLimits = TruncationLimits {
        max_rows: usize::MAX,
        max_cols: usize::MAX,
        max_tokens_per_text: usize::MAX,
    };

    pub fn validate(&self) -> Result<()> {
        if self.max_rows == 0 || self.max_cols == 0 || self.max_tokens_per_text == 0 {
            return Err(Error::InvalidArgument(
                "truncation limits must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Tokenized table: caption, `m` headers and an `n × m` grid of cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Table {
    pub id: String,
    pub caption: Vec<TokenId>,
    pub headers: Vec<Vec<TokenId>>,
    pub rows: Vec<Vec<Vec<TokenId>>>,
}

impl Table {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn m(&self) -> usize {
        self.headers.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> &[TokenId] {
        &self.rows[i][j]
    }

    /// Non-empty and rectangular.
    pub fn check_shape(&self) -> Result<()> {
        let bad = |reason: String| Error::MalformedTable {
            id: self.id.clone(),
            reason,
        };
        if self.n() == 0 || self.m() == 0 {
            return Err(bad(format!("empty grid {}x{}", self.n(), self.m())));
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != self.m()) {
            return Err(bad(format!(
                "row {i} has {} cells, expected {}",
                self.rows[i].len(),
                self.m()
            )));
        }
        Ok(())
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.check_shape()?;
        let bad = |reason: String| Error::MalformedTable {
            id: self.id.clone(),
            reason,
        };
        let all_tokens = self
            .caption
            .iter()
            .chain(self.headers.iter().flatten())
            .chain(self.rows.iter().flatten().flatten());
        if let Some(t) = all_tokens.copied().find(|&t| t as usize >= vocab_size) {
            return Err(bad(format!("token id {t} outside vocabulary of {vocab_size}")));
        }
        Ok(())
    }

    /// Drops rows, columns and tokens beyond `limits`.
    pub fn truncate(&self, limits: &TruncationLimits) -> Table {
        let cut = |s: &Vec<TokenId>| s[..s.len().min(limits.max_tokens_per_text)].to_vec();
        let m = self.m().min(limits.max_cols);
        Table {
            id: self.id.clone(),
            caption: cut(&self.caption),
            headers: self.headers[..m].iter().map(cut).collect(),
            rows: self.rows[..self.n().min(limits.max_rows)]
                .iter()
                .map(|r| r[..m].iter().map(cut).collect())
                .collect(),
        }
    }
}

/// Applies `limits` at the text level, without any vocabulary.
pub fn truncate_raw(raw: &RawTable, limits: &TruncationLimits) -> RawTable {
    let cut = |s: &String| truncate_text(s, limits.max_tokens_per_text);
    let m = raw.headers.len().min(limits.max_cols);
    RawTable {
        id: raw.id.clone(),
        caption: cut(&raw.caption),
        headers: raw.headers[..m].iter().map(cut).collect(),
        rows: raw
            .rows
            .iter()
            .take(limits.max_rows)
            .map(|r| r.iter().take(m).map(cut).collect())
            .collect(),
    }
}

/// Tokenizes a corpus record into a rectangular [`Table`].
///
/// The column count is fixed by the header list: short rows are padded with
/// empty cells, surplus cells are dropped. Rows beyond `max_rows`, columns
/// beyond `max_cols` and tokens beyond `max_tokens_per_text` are cut.
pub fn parse_table(raw: &RawTable, vocab: &Vocabulary, limits: &TruncationLimits) -> Result<Table> {
    limits.validate()?;
    let malformed = |reason: &str| Error::MalformedTable {
        id: raw.id.clone(),
        reason: reason.to_string(),
    };
    if raw.headers.is_empty() {
        return Err(malformed("no headers"));
    }
    if raw.rows.is_empty() {
        return Err(malformed("no rows"));
    }
    let encode = |s: &str| {
        let mut ids = vocab.encode(s);
        ids.truncate(limits.max_tokens_per_text);
        ids
    };
    let m = raw.headers.len().min(limits.max_cols);
    let headers = raw.headers[..m].iter().map(|h| encode(h)).collect();
    let rows = raw
        .rows
        .iter()
        .take(limits.max_rows)
        .map(|r| {
            (0..m)
                .map(|j| r.get(j).map_or_else(Vec::new, |c| encode(c)))
                .collect()
        })
        .collect();
    Ok(Table {
        id: raw.id.clone(),
        caption: encode(&raw.caption),
        headers,
        rows,
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<RawTable>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::BadRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, tables: &[RawTable]) -> Result<()> {
    write_jsonl(path, tables)
}

pub(crate) fn write_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut buf = Vec::new();
    for t in items {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Parses every record with a shared vocabulary.
pub fn parse_corpus(
    raws: &[RawTable],
    vocab: &Vocabulary,
    limits: &TruncationLimits,
) -> Result<Vec<Table>> {
    raws.iter().map(|r| parse_table(r, vocab, limits)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(caption: &str, headers: &[&str], rows: &[&[&str]]) -> RawTable {
        RawTable {
            id: "t".into(),
            caption: caption.into(),
            headers: headers.iter().map(|s| s.to_string()).collect(),
            rows: rows
                .iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        }
    }

    #[test]
    fn vocab_keeps_most_frequent() {
        let corpus = [raw("a b", &["a"], &[&["x"]])];
        let v = Vocabulary::build(&corpus, 3).unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("[pad]"), Some(PAD));
        assert_eq!(v.id("[unk]"), Some(UNK));
        assert_eq!(v.id("a"), Some(2));
        assert_eq!(v.count(2), 2);
    }

    #[test]
    fn vocab_smaller_than_requested_when_few_uniques() {
        let corpus = [raw("", &["x"], &[&[""]])];
        let v = Vocabulary::build(&corpus, 10).unwrap();
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn vocab_errors() {
        let empty: [RawTable; 0] = [];
        assert!(matches!(Vocabulary::build(&empty, 10), Err(Error::EmptyCorpus)));
        let corpus = [raw("", &["x"], &[&[""]])];
        assert!(Vocabulary::build(&corpus, 1).is_err());
    }

    #[test]
    fn vocab_jsonl_round_trip() {
        let corpus = [raw("alpha beta", &["gamma"], &[&["alpha"]])];
        let v = Vocabulary::build(&corpus, 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.jsonl");
        v.save_jsonl(&p).unwrap();
        assert_eq!(Vocabulary::load_jsonl(&p).unwrap(), v);
    }

    #[test]
    fn parse_simple_record() {
        let r: RawTable =
            serde_json::from_str(r#"{"id":"x","caption":"c","headers":["h1","h2"],"rows":[["a","b"]]}"#)
                .unwrap();
        let v = Vocabulary::build([&r], 100).unwrap();
        let t = parse_table(&r, &v, &TruncationLimits::default()).unwrap();
        assert_eq!((t.n(), t.m()), (1, 2));
        t.validate(v.len()).unwrap();
    }

    #[test]
    fn missing_caption_is_empty() {
        let r: RawTable =
            serde_json::from_str(r#"{"id":"x","headers":["h"],"rows":[["a"]]}"#).unwrap();
        assert_eq!(r.caption, "");
    }

    #[test]
    fn ragged_rows_are_padded() {
        let r = raw("", &["h1", "h2"], &[&["a"]]);
        let v = Vocabulary::build([&r], 100).unwrap();
        let t = parse_table(&r, &v, &TruncationLimits::default()).unwrap();
        assert_eq!(t.rows[0][1], Vec::<TokenId>::new());
        assert_eq!(v.decode(&t.rows[0][0]), "a");
    }

    #[test]
    fn default_limits_cut_large_tables() {
        let headers: Vec<String> = (0..25).map(|j| format!("h{j}")).collect();
        let rows: Vec<Vec<String>> = (0..40)
            .map(|i| (0..25).map(|j| format!("c{i} {j}")).collect())
            .collect();
        let r = RawTable {
            id: "big".into(),
            caption: "cap".into(),
            headers,
            rows,
        };
        let v = Vocabulary::build([&r], 1000).unwrap();
        let t = parse_table(&r, &v, &TruncationLimits::default()).unwrap();
        assert_eq!((t.n(), t.m()), (30, 20));
        // lifting the limits keeps the whole table
        let full = parse_table(&r, &v, &TruncationLimits::UNLIMITED).unwrap();
        assert_eq!((full.n(), full.m()), (40, 25));
    }

    #[test]
    fn token_limit_applies_to_every_text() {
        let long = vec!["w"; 100].join(" ");
        let r = raw(&long, &[&long], &[&[&long]]);
        let v = Vocabulary::build([&r], 10).unwrap();
        let t = parse_table(&r, &v, &TruncationLimits::default()).unwrap();
        assert_eq!(t.caption.len(), 64);
        assert_eq!(t.headers[0].len(), 64);
        assert_eq!(t.rows[0][0].len(), 64);
    }

    #[test]
    fn malformed_tables_rejected() {
        let v = Vocabulary::build([&raw("", &["h"], &[&["a"]])], 10).unwrap();
        let no_rows = raw("", &["h"], &[]);
        assert!(matches!(
            parse_table(&no_rows, &v, &TruncationLimits::default()),
            Err(Error::MalformedTable { .. })
        ));
        let no_headers = raw("", &[], &[&["a"]]);
        assert!(parse_table(&no_headers, &v, &TruncationLimits::default()).is_err());
    }

    #[test]
    fn unknown_tokens_map_to_unk() {
        let v = Vocabulary::build([&raw("", &["h"], &[&["a"]])], 10).unwrap();
        assert_eq!(v.encode("a zzz"), vec![v.id("a").unwrap(), UNK]);
        assert_eq!(v.decode(&[UNK]), "[unk]");
        assert_eq!(v.encode(&v.decode(&[UNK])), vec![UNK]);
    }
}
