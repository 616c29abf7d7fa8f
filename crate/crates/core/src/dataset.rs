//! Factual-QA dataset ingestion and answer matching.
//!
//! Three input layouts are understood: PopQA-style TSV (`question`,
//! `possible_answers` as a serialized list, optional `o_pop`), generic JSONL
//! (`id`, `question`, `references`, `popularity`) and generic CSV with the
//! same columns as JSONL. Correctness is decided by normalized substring
//! containment in either direction.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_general_category::get_general_category;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate question id {0:?}")]
    DuplicateId(String),
    #[error("reference list is empty")]
    EmptyReferences,
    #[error("question {0:?} has no popularity value")]
    MissingPopularity(String),
    #[error("unknown dataset format {0:?} (expected popqa-tsv, jsonl or csv)")]
    UnknownFormat(String),
    #[error("write failed: {0}")]
    Write(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    PopqaTsv,
    Jsonl,
    Csv,
}

impl FromStr for DatasetFormat {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "popqa-tsv" | "popqa" | "tsv" => Ok(Self::PopqaTsv),
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(DatasetError::UnknownFormat(other.to_string())),
        }
    }
}

/// One factual question with its accepted reference answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tags: BTreeSet<String>,
}

impl QuestionRecord {
    /// Builds a record, dropping references that are blank or punctuation-only.
    pub fn new(
        id: impl Into<String>,
        question: impl Into<String>,
        references: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, DatasetError> {
        let references = clean_references(references.into_iter().map(Into::into));
        if references.is_empty() {
            return Err(DatasetError::EmptyReferences);
        }
        Ok(Self {
            id: id.into(),
            question: question.into(),
            references,
            popularity: None,
            tags: BTreeSet::new(),
        })
    }

    pub fn with_popularity(mut self, popularity: f64) -> Self {
        self.popularity = Some(popularity);
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tags.insert(tag.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSet {
    records: Vec<QuestionRecord>,
    source: String,
}

impl QuestionSet {
    pub fn new(
        records: Vec<QuestionRecord>,
        source: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self {
            records,
            source: source.into(),
        })
    }

    pub fn records(&self) -> &[QuestionRecord] {
        &self.records
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&QuestionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Canonical JSONL dump, one record per line in set order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DatasetError> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loads a dataset file into a [`QuestionSet`].
pub fn ingest_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
) -> Result<QuestionSet, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DatasetError::FileUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| DatasetError::FileUnreadable {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })?;
    parse_dataset(&text, format, &path.display().to_string())
}

/// Parses dataset text already in memory. `source` is recorded as provenance.
pub fn parse_dataset(
    text: &str,
    format: DatasetFormat,
    source: &str,
) -> Result<QuestionSet, DatasetError> {
    let records = match format {
        DatasetFormat::Jsonl => parse_jsonl(text)?,
        DatasetFormat::PopqaTsv => parse_delimited(text, b'\t', "popqa")?,
        DatasetFormat::Csv => parse_delimited(text, b',', "csv")?,
    };
    QuestionSet::new(records, source)
}

#[derive(Deserialize)]
struct JsonlRow {
    #[serde(default)]
    id: Option<serde_json::Value>,
    question: String,
    #[serde(alias = "possible_answers", alias = "answers")]
    references: Vec<String>,
    #[serde(default, alias = "o_pop")]
    popularity: Option<f64>,
    #[serde(default)]
    tags: BTreeSet<String>,
}

fn parse_jsonl(text: &str) -> Result<Vec<QuestionRecord>, DatasetError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let row = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlRow =
            serde_json::from_str(line).map_err(|e| DatasetError::MalformedRow {
                row,
                reason: e.to_string(),
            })?;
        let id = match parsed.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            None => row.to_string(),
            Some(other) => {
                return Err(DatasetError::MalformedRow {
                    row,
                    reason: format!("id must be a string or number, got {other}"),
                })
            }
        };
        let mut rec = build_record(
            row,
            id,
            parsed.question,
            parsed.references,
            parsed.popularity,
        )?;
        rec.tags = parsed.tags;
        out.push(rec);
    }
    Ok(out)
}

fn parse_delimited(
    text: &str,
    delimiter: u8,
    tag: &str,
) -> Result<Vec<QuestionRecord>, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::MalformedRow {
            row: 1,
            reason: e.to_string(),
        })?
        .clone();
    let column = |names: &[&str]| {
        names
            .iter()
            .find_map(|n| headers.iter().position(|h| h.trim() == *n))
    };
    let question_col = column(&["question"]).ok_or_else(|| DatasetError::MalformedRow {
        row: 1,
        reason: "missing `question` column".into(),
    })?;
    let refs_col = column(&["possible_answers", "references", "answers"]).ok_or_else(|| {
        DatasetError::MalformedRow {
            row: 1,
            reason: "missing `possible_answers` or `references` column".into(),
        }
    })?;
    let id_col = column(&["id"]);
    let pop_col = column(&["o_pop", "popularity"]);

    let mut out = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        // header is row 1
        let row = idx + 2;
        let rec = rec.map_err(|e| DatasetError::MalformedRow {
            row,
            reason: e.to_string(),
        })?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let id = id_col
            .map(|c| field(c).trim().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| (row - 1).to_string());
        let refs = parse_reference_list(field(refs_col))
            .map_err(|reason| DatasetError::MalformedRow { row, reason })?;
        let popularity = match pop_col.map(|c| field(c).trim()) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<f64>().map_err(|e| DatasetError::MalformedRow {
                row,
                reason: format!("popularity {s:?}: {e}"),
            })?),
        };
        out.push(
            build_record(row, id, field(question_col).to_string(), refs, popularity)?.with_tag(tag),
        );
    }
    Ok(out)
}

/// A JSON list (`["a", "b"]`), or a `|`-separated list when the cell does not
/// start with `[`.
fn parse_reference_list(cell: &str) -> Result<Vec<String>, String> {
    let cell = cell.trim();
    if cell.starts_with('[') {
        serde_json::from_str::<Vec<String>>(cell)
            .map_err(|e| format!("reference list {cell:?}: {e}"))
    } else if cell.is_empty() {
        Ok(Vec::new())
    } else {
        Ok(cell.split('|').map(str::to_string).collect())
    }
}

fn build_record(
    row: usize,
    id: String,
    question: String,
    references: Vec<String>,
    popularity: Option<f64>,
) -> Result<QuestionRecord, DatasetError> {
    let malformed = |reason: &str| DatasetError::MalformedRow {
        row,
        reason: reason.to_string(),
    };
    if question.trim().is_empty() {
        return Err(malformed("empty question"));
    }
    if let Some(p) = popularity {
        if !(p.is_finite() && p >= 0.0) {
            return Err(malformed("popularity must be a nonnegative number"));
        }
    }
    let mut rec = QuestionRecord::new(id, question.trim(), references)
        .map_err(|_| malformed("empty reference list"))?;
    rec.popularity = popularity;
    Ok(rec)
}

fn clean_references(refs: impl Iterator<Item = String>) -> Vec<String> {
    refs.map(|r| r.trim().to_string())
        .filter(|r| !normalize_answer(r).is_empty())
        .collect()
}

fn is_stripped(c: char) -> bool {
    matches!(
        get_general_category(c).abbreviation().as_bytes()[0],
        b'P' | b'S'
    )
}

/// Lowercases, removes Unicode punctuation and symbols, trims, and collapses
/// internal whitespace runs to one space.
pub fn normalize_answer(text: &str) -> String {
    let stripped: String = text
        .to_lowercase()
        .chars()
        .filter(|&c| !is_stripped(c))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff the normalized prediction is a substring of some normalized
/// reference or vice versa. An empty normalized prediction never matches.
pub fn match_answer<S: AsRef<str>>(
    prediction: &str,
    references: &[S],
) -> Result<bool, DatasetError> {
    if references.is_empty() {
        return Err(DatasetError::EmptyReferences);
    }
    let pred = normalize_answer(prediction);
    if pred.is_empty() {
        return Ok(false);
    }
    Ok(references.iter().any(|r| {
        let r = normalize_answer(r.as_ref());
        !r.is_empty() && (r.contains(&pred) || pred.contains(&r))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityTier {
    Common,
    Middle,
    Rare,
}

impl PopularityTier {
    pub const ALL: [PopularityTier; 3] = [Self::Common, Self::Middle, Self::Rare];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Common => "common",
            Self::Middle => "middle",
            Self::Rare => "rare",
        }
    }
}

/// Record ids split into popularity terciles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Terciles {
    pub common: Vec<String>,
    pub middle: Vec<String>,
    pub rare: Vec<String>,
}

impl Terciles {
    pub fn tier_of(&self, id: &str) -> Option<PopularityTier> {
        if self.common.iter().any(|x| x == id) {
            Some(PopularityTier::Common)
        } else if self.middle.iter().any(|x| x == id) {
            Some(PopularityTier::Middle)
        } else if self.rare.iter().any(|x| x == id) {
            Some(PopularityTier::Rare)
        } else {
            None
        }
    }

    pub fn get(&self, tier: PopularityTier) -> &[String] {
        match tier {
            PopularityTier::Common => &self.common,
            PopularityTier::Middle => &self.middle,
            PopularityTier::Rare => &self.rare,
        }
    }
}

/// Splits records by popularity, most popular first.
///
/// The common and rare cells each get `round(n / 3)` records and the middle
/// cell takes the rest, so two records give one common, one rare and an empty
/// middle. Ties keep input order.
pub fn popularity_terciles(set: &QuestionSet) -> Result<Terciles, DatasetError> {
    let mut ranked = set
        .records()
        .iter()
        .map(|r| {
            r.popularity
                .map(|p| (p, r.id.clone()))
                .ok_or_else(|| DatasetError::MissingPopularity(r.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // stable sort keeps input order among ties
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n = ranked.len();
    let outer = (n as f64 / 3.0).round() as usize;
    let mut ids = ranked.into_iter().map(|(_, id)| id);
    let common: Vec<_> = ids.by_ref().take(outer).collect();
    let middle: Vec<_> = ids.by_ref().take(n - 2 * outer).collect();
    let rare: Vec<_> = ids.collect();
    Ok(Terciles {
        common,
        middle,
        rare,
    })
}
