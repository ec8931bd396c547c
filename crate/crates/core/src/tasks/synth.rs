//! Seeded synthetic datasets built from typed value generators.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{LabelRecord, PairTarget, SimilarityTarget, TaskDataset, TaskKind, Targets};
use crate::error::{Error, Result};
use crate::rng::{stable_hash, substream, Rng};
use crate::table_io::{parse_corpus, RawTable, TruncationLimits, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Integer,
    Date,
    Person,
    City,
    Company,
    Product,
}

impl ValueType {
    pub const ALL: [ValueType; 6] = [
        ValueType::Integer,
        ValueType::Date,
        ValueType::Person,
        ValueType::City,
        ValueType::Company,
        ValueType::Product,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ValueType::Integer => "integer",
            ValueType::Date => "date",
            ValueType::Person => "person",
            ValueType::City => "city",
            ValueType::Company => "company",
            ValueType::Product => "product",
        }
    }

    fn headers(self) -> &'static [&'static str] {
        match self {
            ValueType::Integer => &["count", "number", "total", "quantity", "amount"],
            ValueType::Date => &["date", "day", "founded", "released", "opened"],
            ValueType::Person => &["name", "person", "player", "author", "owner"],
            ValueType::City => &["city", "town", "location", "venue", "place"],
            ValueType::Company => &["company", "firm", "employer", "maker", "brand"],
            ValueType::Product => &["product", "item", "model", "article", "goods"],
        }
    }
}

const FIRST: &[&str] = &[
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas", "keiko",
    "lars", "maya", "nikolai", "olga", "pedro", "quinn", "rosa", "samir", "tessa", "umar", "vera",
    "wendell", "xenia", "yusuf", "zora", "amir", "bianca", "cyril", "dalia", "emil", "fiona",
];
const LAST: &[&str] = &[
    "moreno", "schmidt", "okafor", "tanaka", "novak", "haddad", "lindqvist", "costa", "ivanova",
    "brennan", "fischer", "kowalski", "mendes", "nakamura", "oduya", "petrov", "quintero", "rossi",
    "sato", "thorne", "ueda", "varga", "weber", "xu", "yilmaz", "zeller", "abara", "bauer", "castro",
    "dumont", "eriksen", "ferrari",
];
const CITY_PREFIX: &[&str] = &["port", "lake", "north", "south", "east", "west", "new", "fort", "mount", "glen"];
const CITY_STEM: &[&str] = &[
    "ashford", "brenton", "calder", "dunmore", "elmwood", "fairhaven", "granby", "holloway",
    "ivybridge", "kestrel", "larkspur", "marlow", "norbury", "oakridge", "pendle", "quarry",
    "rivermouth", "stanton", "thornbury", "upton", "valewick", "westmere", "yarrow", "zennor",
    "alder", "birchley", "coldwater", "deepdale", "eastleigh", "foxton",
];
const COMPANY_STEM: &[&str] = &[
    "acme", "globex", "initech", "vertex", "nimbus", "orbital", "pinnacle", "quantum", "redwood",
    "summit", "tandem", "umbra", "vantage", "wavelength", "zenith", "apex", "boreal", "cobalt",
    "delta", "ember", "fulcrum", "granite", "helix", "ionic",
];
const COMPANY_SUFFIX: &[&str] = &["corp", "inc", "ltd", "group", "labs", "systems"];
const COLOR: &[&str] = &["red", "blue", "green", "black", "white", "silver", "golden", "amber", "violet", "teal"];
const ITEM: &[&str] = &[
    "chair", "lamp", "kettle", "jacket", "backpack", "bicycle", "camera", "guitar", "watch", "sofa",
    "helmet", "blender",
];
const NEUTRAL_HEADERS: &[&str] = &["value", "field", "entry", "data", "info", "detail", "attribute", "record"];
const NEUTRAL_CAPTIONS: &[&str] = &["table", "records", "list", "overview", "data", "summary", "listing", "register"];

/// One random value of type `ty`, as cell text.
pub fn value_of(ty: ValueType, rng: &mut Rng) -> String {
    match ty {
        ValueType::Integer => rng.random_range(0..1000u32).to_string(),
        ValueType::Date => format!(
            "{:04}-{:02}-{:02}",
            rng.random_range(1900..2025u32),
            rng.random_range(1..=12u32),
            rng.random_range(1..=28u32)
        ),
        ValueType::Person => format!("{} {}", pick(FIRST, rng), pick(LAST, rng)),
        ValueType::City => {
            if rng.random_bool(0.5) {
                format!("{} {}", pick(CITY_PREFIX, rng), pick(CITY_STEM, rng))
            } else {
                pick(CITY_STEM, rng).to_string()
            }
        }
        ValueType::Company => format!("{} {}", pick(COMPANY_STEM, rng), pick(COMPANY_SUFFIX, rng)),
        ValueType::Product => format!("{} {}", pick(COLOR, rng), pick(ITEM, rng)),
    }
}

fn pick<'a>(pool: &[&'a str], rng: &mut Rng) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

/// Relations between a person subject column and one attribute column.
const RELATIONS: [(&str, ValueType); 5] = [
    ("born_on", ValueType::Date),
    ("born_in", ValueType::City),
    ("age", ValueType::Integer),
    ("works_for", ValueType::Company),
    ("owns", ValueType::Product),
];

/// Table classes, each a distinct multiset of column types.
const TEMPLATES: [(&str, [ValueType; 3]); 5] = [
    ("people", [ValueType::Person, ValueType::Date, ValueType::City]),
    ("places", [ValueType::City, ValueType::Integer, ValueType::Integer]),
    ("companies", [ValueType::Company, ValueType::City, ValueType::Integer]),
    ("products", [ValueType::Product, ValueType::Integer, ValueType::Company]),
    ("events", [ValueType::Date, ValueType::City, ValueType::Product]),
];

const CTA_TYPES: [ValueType; 4] = [ValueType::Integer, ValueType::Date, ValueType::Person, ValueType::City];

/// Generated tables plus their label sidecar records.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub kind: TaskKind,
    pub label_names: Vec<String>,
    pub tables: Vec<RawTable>,
    pub labels: Vec<LabelRecord>,
}

impl SynthDataset {
    /// Tokenizes the tables and joins them with the labels.
    pub fn parse(&self, vocab: &Vocabulary, limits: &TruncationLimits) -> Result<TaskDataset> {
        let tables = parse_corpus(&self.tables, vocab, limits)?;
        TaskDataset::assemble(self.kind, &tables, &self.labels, Some(self.label_names.len()))
    }
}

fn column(ty: ValueType, n: usize, rng: &mut Rng) -> Vec<String> {
    (0..n).map(|_| value_of(ty, rng)).collect()
}

fn neutral_header(rng: &mut Rng) -> String {
    pick(NEUTRAL_HEADERS, rng).to_string()
}

fn typed_header(ty: ValueType, rng: &mut Rng) -> String {
    pick(ty.headers(), rng).to_string()
}

fn from_columns(id: String, caption: String, headers: Vec<String>, cols: Vec<Vec<String>>) -> RawTable {
    let n = cols.first().map_or(0, Vec::len);
    RawTable {
        id,
        caption,
        headers,
        rows: (0..n).map(|i| cols.iter().map(|c| c[i].clone()).collect()).collect(),
    }
}

/// A table of the given column types, in shuffled column order; returns the order.
fn template_table(
    id: String,
    types: &[ValueType],
    typed_headers: bool,
    rng: &mut Rng,
) -> (RawTable, Vec<ValueType>) {
    let n = rng.random_range(3..=6);
    let mut order = types.to_vec();
    order.shuffle(rng);
    let headers = order
        .iter()
        .map(|&t| if typed_headers { typed_header(t, rng) } else { neutral_header(rng) })
        .collect();
    let cols = order.iter().map(|&t| column(t, n, rng)).collect();
    let caption = pick(NEUTRAL_CAPTIONS, rng).to_string();
    (from_columns(id, caption, headers, cols), order)
}

/// Deterministic dataset of `size` examples.
pub fn synth_dataset(kind: TaskKind, size: usize, seed: u64) -> Result<SynthDataset> {
    if size == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let mut rng = substream(seed, &format!("synth-{kind}"), 0);
    let id = |k: usize| format!("{kind}-{seed}-{k:05}");
    let names = |xs: &mut dyn Iterator<Item = &str>| xs.map(str::to_string).collect::<Vec<_>>();
    let mut tables = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    let label_names = match kind {
        TaskKind::Cta => {
            // types dealt from shuffled decks so label counts stay balanced
            let mut deck: Vec<usize> = Vec::new();
            for k in 0..size {
                let m = rng.random_range(2..=5);
                let n = rng.random_range(3..=6);
                let mut types = Vec::with_capacity(m);
                for _ in 0..m {
                    if deck.is_empty() {
                        deck = (0..CTA_TYPES.len()).collect();
                        deck.shuffle(&mut rng);
                    }
                    types.push(deck.pop().expect("refilled"));
                }
                let headers = (0..m).map(|_| neutral_header(&mut rng)).collect();
                let cols = types.iter().map(|&t| column(CTA_TYPES[t], n, &mut rng)).collect();
                let caption = pick(NEUTRAL_CAPTIONS, &mut rng).to_string();
                tables.push(from_columns(id(k), caption, headers, cols));
                labels.push(LabelRecord {
                    table_id: id(k),
                    task: kind,
                    targets: Targets::Columns(types.iter().map(|&t| vec![t]).collect()),
                });
            }
            names(&mut CTA_TYPES.iter().map(|t| t.name()))
        }
        TaskKind::Cpa => {
            for k in 0..size {
                let n = rng.random_range(3..=6);
                let count = rng.random_range(1..=3);
                let rels: Vec<usize> = rand::seq::index::sample(&mut rng, RELATIONS.len(), count).into_vec();
                let subjects = column(ValueType::Person, n, &mut rng);
                // attribute values are a fixed function of the subject
                let attr = |rel: usize, subject: &str| {
                    let h = stable_hash(&[b"cpa".as_slice(), &[rel as u8], subject.as_bytes()]);
                    value_of(RELATIONS[rel].1, &mut substream(h, "attr", 0))
                };
                let mut cols = vec![subjects.clone()];
                cols.extend(rels.iter().map(|&r| subjects.iter().map(|s| attr(r, s)).collect()));
                let mut order: Vec<usize> = (0..cols.len()).collect();
                order.shuffle(&mut rng);
                let subject_at = order.iter().position(|&c| c == 0).expect("subject present");
                let headers = order.iter().map(|_| neutral_header(&mut rng)).collect();
                let cols = order.iter().map(|&c| cols[c].clone()).collect();
                let pairs = order
                    .iter()
                    .enumerate()
                    .filter(|&(_, &c)| c != 0)
                    .map(|(j, &c)| PairTarget {
                        left: subject_at,
                        right: j,
                        labels: vec![rels[c - 1]],
                    })
                    .collect();
                let caption = pick(NEUTRAL_CAPTIONS, &mut rng).to_string();
                tables.push(from_columns(id(k), caption, headers, cols));
                labels.push(LabelRecord {
                    table_id: id(k),
                    task: kind,
                    targets: Targets::Pairs(pairs),
                });
            }
            names(&mut RELATIONS.iter().map(|r| r.0))
        }
        TaskKind::Ttd => {
            for k in 0..size {
                let class = k % TEMPLATES.len();
                let (t, _) = template_table(id(k), &TEMPLATES[class].1, false, &mut rng);
                tables.push(t);
                labels.push(LabelRecord {
                    table_id: id(k),
                    task: kind,
                    targets: Targets::Class(class),
                });
            }
            // classes cycle, so shuffle the presentation order
            let mut idx: Vec<usize> = (0..size).collect();
            idx.shuffle(&mut rng);
            tables = idx.iter().map(|&i| tables[i].clone()).collect();
            labels = idx.iter().map(|&i| labels[i].clone()).collect();
            names(&mut TEMPLATES.iter().map(|t| t.0))
        }
        TaskKind::Tsp => {
            for k in 0..size {
                let similar = k % 2 == 0;
                let a = rng.random_range(0..TEMPLATES.len());
                let b = if similar {
                    a
                } else {
                    (a + rng.random_range(1..TEMPLATES.len())) % TEMPLATES.len()
                };
                let (ta, _) = template_table(format!("{}a", id(k)), &TEMPLATES[a].1, false, &mut rng);
                let (tb, _) = template_table(format!("{}b", id(k)), &TEMPLATES[b].1, false, &mut rng);
                labels.push(LabelRecord {
                    table_id: ta.id.clone(),
                    task: kind,
                    targets: Targets::Similarity(SimilarityTarget {
                        other: tb.id.clone(),
                        similar,
                    }),
                });
                tables.push(ta);
                tables.push(tb);
            }
            vec!["similar".to_string()]
        }
    };
    Ok(SynthDataset {
        kind,
        label_names,
        tables,
        labels,
    })
}

/// Unlabelled pretraining corpus: template tables and free-form typed
/// tables, with descriptive headers most of the time.
pub fn synth_corpus(size: usize, seed: u64) -> Result<Vec<RawTable>> {
    if size == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let mut rng = substream(seed, "synth-corpus", 0);
    Ok((0..size)
        .map(|k| {
            let id = format!("corpus-{seed}-{k:05}");
            let types: Vec<ValueType> = if rng.random_bool(0.5) {
                TEMPLATES[rng.random_range(0..TEMPLATES.len())].1.to_vec()
            } else {
                let m = rng.random_range(2..=5);
                ValueType::ALL.choose_multiple(&mut rng, m).copied().collect()
            };
            let typed = rng.random_bool(0.7);
            template_table(id, &types, typed, &mut rng).0
        })
        .collect())
}
