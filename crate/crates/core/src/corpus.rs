//! Researcher materials: codebook, protocol exemplars, related-paper
//! abstracts and prior human annotations, plus rating-matrix assembly for
//! reliability analysis.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::SegmentAssessment;

/// Rater label used for the automated coder in rating matrices.
pub const AGENT_RATER: &str = "agent";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate codebook item {0}")]
    DuplicateItem(String),
    #[error("item {0} needs at least two answer options")]
    EmptyOptions(String),
    #[error("exemplar {index} references unknown item {item_id}")]
    UnknownItem { index: usize, item_id: String },
    #[error("exemplar {index}: image {} not found", path.display())]
    MissingImage { index: usize, path: PathBuf },
    #[error("exemplar {index}: answer {answer} is not an option of item {item_id}")]
    AnswerOutOfRange {
        index: usize,
        item_id: String,
        answer: i64,
    },
    #[error("abstracts document has no entries")]
    EmptyAbstracts,
    #[error("line {line}: rating {value:?} is not numeric")]
    NonNumericRating { line: u64, value: String },
    #[error("duplicate rating for segment {segment_id}, item {item_id}, coder {coder_id}")]
    DuplicateCell {
        segment_id: String,
        item_id: String,
        coder_id: String,
    },
    #[error("rating matrix for item {item_id} is empty: {reason}")]
    EmptyMatrix { item_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Unknown,
    Perception,
    ObjectDetection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionDef {
    pub ordinal: u32,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookItem {
    pub item_id: String,
    pub measure_name: String,
    #[serde(rename = "question")]
    pub question_text: String,
    pub options: Vec<OptionDef>,
    #[serde(default, skip_serializing_if = "is_unknown")]
    pub task_kind: TaskKind,
}

fn is_unknown(kind: &TaskKind) -> bool {
    *kind == TaskKind::Unknown
}

impl CodebookItem {
    pub fn option(&self, ordinal: i64) -> Option<&OptionDef> {
        usize::try_from(ordinal).ok().and_then(|i| self.options.get(i))
    }

    pub fn has_ordinal(&self, ordinal: i64) -> bool {
        self.option(ordinal).is_some()
    }

    fn validate(&mut self) -> Result<(), CorpusError> {
        if self.item_id.trim().is_empty() {
            return Err(CorpusError::SchemaViolation("item with empty item_id".into()));
        }
        if self.options.len() < 2 {
            return Err(CorpusError::EmptyOptions(self.item_id.clone()));
        }
        self.options.sort_by_key(|o| o.ordinal);
        if self
            .options
            .iter()
            .enumerate()
            .any(|(i, o)| o.ordinal as usize != i)
        {
            return Err(CorpusError::SchemaViolation(format!(
                "item {}: option ordinals must be unique and dense from 0",
                self.item_id
            )));
        }
        Ok(())
    }
}

/// The coding manual: one entry per measure, in document order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Codebook {
    pub items: Vec<CodebookItem>,
}

impl Codebook {
    pub fn item(&self, item_id: &str) -> Option<&CodebookItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codebook serializes")
    }

    fn validated(mut self) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for item in &mut self.items {
            item.validate()?;
            if !seen.insert(item.item_id.clone()) {
                return Err(CorpusError::DuplicateItem(item.item_id.clone()));
            }
        }
        Ok(self)
    }
}

/// Parses `codebook.json`.
pub fn parse_codebook(doc: &str) -> Result<Codebook, CorpusError> {
    let codebook: Codebook =
        serde_json::from_str(doc).map_err(|e| CorpusError::SchemaViolation(e.to_string()))?;
    codebook.validated()
}

#[derive(Debug, Deserialize)]
struct CodebookCsvRow {
    item_id: String,
    measure_name: String,
    question: String,
    ordinal: u32,
    label: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    task_kind: Option<TaskKind>,
}

/// Imports a codebook from CSV with one row per answer option.
///
/// Columns: `item_id,measure_name,question,ordinal,label[,description][,task_kind]`.
/// Rows of one item must be contiguous.
pub fn parse_codebook_csv(reader: impl Read) -> Result<Codebook, CorpusError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut items: Vec<CodebookItem> = Vec::new();
    for row in rdr.deserialize::<CodebookCsvRow>() {
        let row = row.map_err(|e| CorpusError::SchemaViolation(e.to_string()))?;
        let option = OptionDef {
            ordinal: row.ordinal,
            label: row.label,
            description: row.description.filter(|d| !d.is_empty()),
        };
        match items.last_mut() {
            Some(last) if last.item_id == row.item_id => last.options.push(option),
            _ => items.push(CodebookItem {
                item_id: row.item_id,
                measure_name: row.measure_name,
                question_text: row.question,
                options: vec![option],
                task_kind: row.task_kind.unwrap_or_default(),
            }),
        }
    }
    Codebook { items }.validated()
}

/// An image-answer pair from the coder training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolExemplar {
    pub item_id: String,
    #[serde(rename = "images")]
    pub image_paths: Vec<PathBuf>,
    pub answer_ordinal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

#[derive(Deserialize)]
struct RawExemplar {
    item_id: String,
    images: Vec<PathBuf>,
    answer_ordinal: i64,
    #[serde(default)]
    rationale: Option<String>,
}

#[derive(Deserialize)]
struct RawManifest {
    exemplars: Vec<RawExemplar>,
}

/// Parses `exemplars.json`, resolving relative image paths against `base_dir`.
pub fn parse_exemplar_manifest(
    doc: &str,
    codebook: &Codebook,
    base_dir: &Path,
) -> Result<Vec<ProtocolExemplar>, CorpusError> {
    let manifest: RawManifest =
        serde_json::from_str(doc).map_err(|e| CorpusError::SchemaViolation(e.to_string()))?;
    manifest
        .exemplars
        .into_iter()
        .enumerate()
        .map(|(index, raw)| {
            let item = codebook.item(&raw.item_id).ok_or_else(|| CorpusError::UnknownItem {
                index,
                item_id: raw.item_id.clone(),
            })?;
            if raw.images.is_empty() {
                return Err(CorpusError::SchemaViolation(format!(
                    "exemplar {index} lists no images"
                )));
            }
            if !item.has_ordinal(raw.answer_ordinal) {
                return Err(CorpusError::AnswerOutOfRange {
                    index,
                    item_id: raw.item_id,
                    answer: raw.answer_ordinal,
                });
            }
            let image_paths = raw
                .images
                .into_iter()
                .map(|p| {
                    let path = if p.is_absolute() { p } else { base_dir.join(p) };
                    if path.is_file() {
                        Ok(path)
                    } else {
                        Err(CorpusError::MissingImage { index, path })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ProtocolExemplar {
                item_id: raw.item_id,
                image_paths,
                answer_ordinal: raw.answer_ordinal as u32,
                rationale: raw.rationale,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractEntry {
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractsDoc {
    pub entries: Vec<AbstractEntry>,
}

/// Parses `abstracts.json`.
pub fn parse_abstracts(doc: &str) -> Result<AbstractsDoc, CorpusError> {
    let parsed: AbstractsDoc =
        serde_json::from_str(doc).map_err(|e| CorpusError::SchemaViolation(e.to_string()))?;
    if parsed.entries.is_empty() {
        return Err(CorpusError::EmptyAbstracts);
    }
    if let Some(i) = parsed
        .entries
        .iter()
        .position(|e| e.abstract_text.trim().is_empty())
    {
        return Err(CorpusError::SchemaViolation(format!("entry {i} has an empty abstract")));
    }
    Ok(parsed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub segment_id: String,
    pub item_id: String,
    pub coder_id: String,
    pub rating: f64,
}

/// Prior human codes, one rating per (segment, item, coder).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    /// Coders in order of first appearance.
    pub coder_ids: Vec<String>,
    pub rows: Vec<AnnotationRow>,
}

const ANNOTATION_COLUMNS: [&str; 4] = ["segment_id", "item_id", "coder_id", "rating"];

/// Reads `human_annotations.csv` (`segment_id,item_id,coder_id,rating`).
pub fn load_human_annotations(reader: impl Read) -> Result<AnnotationTable, CorpusError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::SchemaViolation(e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CorpusError::SchemaViolation(format!("missing column {name}")))
    };
    let idx: Vec<usize> = ANNOTATION_COLUMNS
        .iter()
        .map(|c| column(c))
        .collect::<Result<_, _>>()?;

    let mut table = AnnotationTable::default();
    let mut keys = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CorpusError::SchemaViolation(e.to_string()))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| record.get(idx[i]).unwrap_or("").to_string();
        let (segment_id, item_id, coder_id, raw) = (field(0), field(1), field(2), field(3));
        if segment_id.is_empty() || item_id.is_empty() || coder_id.is_empty() {
            return Err(CorpusError::SchemaViolation(format!("line {line}: empty key field")));
        }
        let rating = raw
            .parse::<f64>()
            .ok()
            .filter(|r| r.is_finite())
            .ok_or_else(|| CorpusError::NonNumericRating {
                line,
                value: raw.clone(),
            })?;
        if !keys.insert((segment_id.clone(), item_id.clone(), coder_id.clone())) {
            return Err(CorpusError::DuplicateCell {
                segment_id,
                item_id,
                coder_id,
            });
        }
        if !table.coder_ids.contains(&coder_id) {
            table.coder_ids.push(coder_id.clone());
        }
        table.rows.push(AnnotationRow {
            segment_id,
            item_id,
            coder_id,
            rating,
        });
    }
    Ok(table)
}

/// Subjects (rows) by raters (columns), complete cases only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub item_id: String,
    pub subjects: Vec<String>,
    pub raters: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl RatingMatrix {
    /// Checks shape only; the n >= 2 / k >= 2 requirement belongs to the
    /// statistics that need it.
    pub fn new(
        item_id: impl Into<String>,
        subjects: Vec<String>,
        raters: Vec<String>,
        cells: Vec<Vec<f64>>,
    ) -> Result<Self, String> {
        if cells.len() != subjects.len() {
            return Err(format!("{} rows for {} subjects", cells.len(), subjects.len()));
        }
        if let Some(row) = cells.iter().find(|r| r.len() != raters.len()) {
            return Err(format!("row of length {} for {} raters", row.len(), raters.len()));
        }
        if cells.iter().flatten().any(|x| !x.is_finite()) {
            return Err("non-finite rating".into());
        }
        Ok(Self {
            item_id: item_id.into(),
            subjects,
            raters,
            cells,
        })
    }

    /// Anonymous matrix, handy for numeric work.
    pub fn from_rows(cells: Vec<Vec<f64>>) -> Result<Self, String> {
        let k = cells.first().map_or(0, Vec::len);
        let subjects = (0..cells.len()).map(|i| format!("s{i}")).collect();
        let raters = (0..k).map(|j| format!("r{j}")).collect();
        Self::new("", subjects, raters, cells)
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_raters(&self) -> usize {
        self.raters.len()
    }

    /// Copy without rater column `j`.
    pub fn without_rater(&self, j: usize) -> Self {
        let mut raters = self.raters.clone();
        raters.remove(j);
        let cells = self
            .cells
            .iter()
            .map(|row| {
                let mut r = row.clone();
                r.remove(j);
                r
            })
            .collect();
        Self {
            item_id: self.item_id.clone(),
            subjects: self.subjects.clone(),
            raters,
            cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrixBuild {
    pub matrix: RatingMatrix,
    pub dropped_subjects: usize,
}

/// Joins human codes with agent scores for one item.
///
/// Raters are the human coders sorted by id followed by [`AGENT_RATER`];
/// subjects are segment ids (sorted) rated by every rater.
pub fn build_rating_matrix(
    table: &AnnotationTable,
    agent_scores: &[SegmentAssessment],
    item_id: &str,
) -> Result<RatingMatrixBuild, CorpusError> {
    let empty = |reason: String| CorpusError::EmptyMatrix {
        item_id: item_id.to_string(),
        reason,
    };
    // rater -> segment -> rating
    let mut by_rater: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for row in table.rows.iter().filter(|r| r.item_id == item_id) {
        by_rater
            .entry(row.coder_id.as_str())
            .or_default()
            .insert(row.segment_id.as_str(), row.rating);
    }
    if by_rater.contains_key(AGENT_RATER) {
        return Err(CorpusError::SchemaViolation(format!(
            "human coder id {AGENT_RATER:?} is reserved for the automated coder"
        )));
    }
    let mut agent: BTreeMap<&str, f64> = BTreeMap::new();
    for a in agent_scores.iter().filter(|a| a.item_id == item_id) {
        if agent
            .insert(a.segment_id.as_str(), f64::from(a.score_ordinal))
            .is_some()
        {
            return Err(CorpusError::DuplicateCell {
                segment_id: a.segment_id.clone(),
                item_id: item_id.to_string(),
                coder_id: AGENT_RATER.to_string(),
            });
        }
    }

    let mut raters: Vec<String> = by_rater.keys().map(|s| s.to_string()).collect();
    raters.push(AGENT_RATER.to_string());
    let mut columns: Vec<&BTreeMap<&str, f64>> = by_rater.values().collect();
    columns.push(&agent);
    if raters.len() < 2 {
        return Err(empty("fewer than 2 raters".into()));
    }

    let all_subjects: BTreeSet<&str> = columns.iter().flat_map(|c| c.keys().copied()).collect();
    let complete: Vec<&str> = all_subjects
        .iter()
        .copied()
        .filter(|s| columns.iter().all(|c| c.contains_key(s)))
        .collect();
    if complete.len() < 2 {
        return Err(empty(format!(
            "{} complete subject(s), need at least 2",
            complete.len()
        )));
    }
    let cells = complete
        .iter()
        .map(|s| columns.iter().map(|c| c[s]).collect())
        .collect();
    let matrix = RatingMatrix::new(
        item_id,
        complete.iter().map(|s| s.to_string()).collect(),
        raters,
        cells,
    )
    .map_err(empty)?;
    Ok(RatingMatrixBuild {
        matrix,
        dropped_subjects: all_subjects.len() - complete.len(),
    })
}
