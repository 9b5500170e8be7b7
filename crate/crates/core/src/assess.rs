//! Multimodal assessment with in-context exemplars.
//!
//! Each (segment, item) pair is scored from the segment's capped image set.
//! The request replays the protocol exemplars as prior user/assistant turns
//! before asking about the target images, and the reply must be a bare
//! option number.

use std::collections::{BTreeMap, HashMap};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatMessage, ChatRequest, ImageRef};
use crate::corpus::{Codebook, CodebookItem, ProtocolExemplar};
use crate::gateway::{BackendConfig, Gateway, GatewayError};
use crate::prompt::{chat_with_repair, PromptBundle, RepairError};

pub const ANSWER_INSTRUCTION: &str = "Return only the option number.";
pub const ANSWER_CORRECTION: &str = "Return only the option number, nothing else.";
pub const DEFAULT_EXEMPLAR_COUNT: usize = 3;
pub const DEFAULT_IMAGE_CAP: usize = 8;
const ANSWER_MAX_TOKENS: u32 = 16;
const MAX_REPAIRS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssessError {
    #[error("exemplar for item {exemplar_item} used with item {item}")]
    ExemplarItemMismatch { item: String, exemplar_item: String },
    #[error("exemplar answer {answer} is not an option of item {item}")]
    ExemplarAnswerOutOfRange { item: String, answer: u32 },
    #[error("no target images")]
    NoImages,
    #[error("format violation: {0:?} is not a bare option number")]
    FormatViolation(String),
    #[error("answer {answer} is not an option of item {item}")]
    OutOfRange { item: String, answer: i64 },
    #[error("no answers to aggregate")]
    EmptyAnswers,
    #[error("answer for item {found} aggregated under item {expected}")]
    AnswerItemMismatch { expected: String, found: String },
    #[error("prompt bundle has no entry for item {0}")]
    MissingPrompt(String),
    #[error("gateway configuration error: {0}")]
    Gateway(GatewayError),
}

/// One model answer about one target image set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAnswer {
    pub image_id: String,
    pub item_id: String,
    pub answer_ordinal: u32,
    pub raw_text: String,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAssessment {
    pub segment_id: String,
    pub item_id: String,
    pub score_ordinal: u32,
    pub support: Vec<ImageAnswer>,
    pub n_images: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedImage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

impl SegmentAssessment {
    /// Post-hoc check that every supporting answer is a valid option.
    pub fn support_is_valid(&self, item: &CodebookItem) -> bool {
        self.n_images == self.support.len()
            && !self.support.is_empty()
            && item.has_ordinal(i64::from(self.score_ordinal))
            && self
                .support
                .iter()
                .all(|a| a.item_id == item.item_id && item.has_ordinal(i64::from(a.answer_ordinal)))
    }
}

/// A (segment, item) pair for which every image failed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentFailure {
    pub segment_id: String,
    pub item_id: String,
    pub skipped: Vec<SkippedImage>,
    pub error: String,
}

/// One line of `assessments.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum AssessmentRecord {
    Scored(SegmentAssessment),
    Failed(SegmentFailure),
}

impl AssessmentRecord {
    pub fn segment_id(&self) -> &str {
        match self {
            Self::Scored(a) => &a.segment_id,
            Self::Failed(f) => &f.segment_id,
        }
    }

    pub fn item_id(&self) -> &str {
        match self {
            Self::Scored(a) => &a.item_id,
            Self::Failed(f) => &f.item_id,
        }
    }

    pub fn scored(&self) -> Option<&SegmentAssessment> {
        match self {
            Self::Scored(a) => Some(a),
            Self::Failed(_) => None,
        }
    }

    pub fn skipped(&self) -> &[SkippedImage] {
        match self {
            Self::Scored(a) => &a.skipped,
            Self::Failed(f) => &f.skipped,
        }
    }
}

/// Renders records as JSONL, one object per line.
pub fn records_to_jsonl(records: &[AssessmentRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<AssessmentRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// An exemplar with its images loaded.
#[derive(Debug, Clone)]
pub struct ExemplarShot {
    pub exemplar: ProtocolExemplar,
    pub images: Vec<ImageRef>,
}

/// System role prompt, then one user/assistant exchange per exemplar, then
/// the target images with the item prompt.
pub fn build_assessment_request(
    bundle: &PromptBundle,
    item: &CodebookItem,
    exemplars: &[ExemplarShot],
    images: &[ImageRef],
) -> Result<ChatRequest, AssessError> {
    if images.is_empty() {
        return Err(AssessError::NoImages);
    }
    let item_prompt = bundle
        .item_prompt(&item.item_id)
        .ok_or_else(|| AssessError::MissingPrompt(item.item_id.clone()))?;
    let user_turn = |imgs: &[ImageRef]| {
        ChatMessage::user_with_images(imgs, [item_prompt.to_string(), ANSWER_INSTRUCTION.to_string()])
    };

    let mut messages = vec![ChatMessage::system(bundle.role_prompt.clone())];
    for shot in exemplars {
        let ex = &shot.exemplar;
        if ex.item_id != item.item_id {
            return Err(AssessError::ExemplarItemMismatch {
                item: item.item_id.clone(),
                exemplar_item: ex.item_id.clone(),
            });
        }
        if !item.has_ordinal(i64::from(ex.answer_ordinal)) {
            return Err(AssessError::ExemplarAnswerOutOfRange {
                item: item.item_id.clone(),
                answer: ex.answer_ordinal,
            });
        }
        if shot.images.is_empty() {
            return Err(AssessError::NoImages);
        }
        messages.push(user_turn(&shot.images));
        messages.push(ChatMessage::assistant(ex.answer_ordinal.to_string()));
    }
    messages.push(user_turn(images));
    Ok(ChatRequest {
        messages,
        temperature: 0.0,
        max_tokens: ANSWER_MAX_TOKENS,
        model_hint: "vlm".into(),
    })
}

/// Accepts only a bare (optionally signed) integer that names an option.
pub fn parse_answer(text: &str, item: &CodebookItem) -> Result<u32, AssessError> {
    let t = text.trim();
    let digits = t.strip_prefix(['-', '+']).unwrap_or(t);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(AssessError::FormatViolation(text.to_string()));
    }
    let out_of_range = || AssessError::OutOfRange {
        item: item.item_id.clone(),
        answer: t.parse().unwrap_or(i64::MAX),
    };
    let value: i64 = t.parse().map_err(|_| out_of_range())?;
    if item.has_ordinal(value) {
        Ok(value as u32)
    } else {
        Err(out_of_range())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Most frequent ordinal; ties go to the lowest.
    #[default]
    Majority,
    /// Mean ordinal rounded to nearest; exact halves go to the lower ordinal.
    MeanRound,
}

pub fn aggregate(
    answers: &[ImageAnswer],
    item: &CodebookItem,
    rule: Aggregation,
) -> Result<u32, AssessError> {
    if answers.is_empty() {
        return Err(AssessError::EmptyAnswers);
    }
    if let Some(a) = answers.iter().find(|a| a.item_id != item.item_id) {
        return Err(AssessError::AnswerItemMismatch {
            expected: item.item_id.clone(),
            found: a.item_id.clone(),
        });
    }
    let ordinals = answers.iter().map(|a| a.answer_ordinal);
    Ok(match rule {
        Aggregation::Majority => majority(ordinals),
        Aggregation::MeanRound => {
            let (sum, n) = ordinals.fold((0u64, 0u64), |(s, n), o| (s + u64::from(o), n + 1));
            // ceil(2*sum/n) - 1, halved: rounds to nearest with halves down
            let twice = 2 * sum;
            let q = twice / n;
            let r = twice % n;
            let lower = (q / 2) as u32;
            if q % 2 == 1 && r > 0 {
                lower + 1
            } else {
                lower
            }
        }
    })
}

/// Most frequent value; ties resolve to the smallest.
pub fn majority(values: impl IntoIterator<Item = u32>) -> u32 {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(v).or_default() += 1;
    }
    // BTreeMap iterates ascending, and max_by_key keeps the last maximum, so
    // iterate in reverse to keep the lowest ordinal on ties.
    counts
        .into_iter()
        .rev()
        .max_by_key(|&(_, c)| c)
        .map(|(v, _)| v)
        .expect("non-empty input")
}

/// Picks at most `cap` entries at an even stride, preserving order.
pub fn stride_select<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    let n = items.len();
    if cap == 0 || n <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * n / cap].clone()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// One request per (segment, item) with every selected image in one
    /// user message.
    #[default]
    Joint,
    /// One request per image; answers are aggregated.
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssessmentConfig {
    pub exemplar_count: usize,
    pub image_cap: usize,
    pub query_mode: QueryMode,
    pub aggregation: Aggregation,
}

impl Default for AssessmentConfig {
    fn default() -> Self {
        Self {
            exemplar_count: DEFAULT_EXEMPLAR_COUNT,
            image_cap: DEFAULT_IMAGE_CAP,
            query_mode: QueryMode::default(),
            aggregation: Aggregation::default(),
        }
    }
}

/// Images gathered for one segment, plus those that could not be fetched.
#[derive(Debug, Clone)]
pub struct SegmentImages {
    pub segment_id: String,
    pub images: Vec<ImageRef>,
    pub fetch_failures: Vec<SkippedImage>,
}

/// Exemplars per item, already capped and loaded.
pub type ExemplarIndex = HashMap<String, Vec<ExemplarShot>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReport {
    pub skipped_images: usize,
    pub failed_pairs: usize,
}

#[derive(Debug, Clone)]
pub struct AssessRun {
    /// Sorted by segment order, then codebook item order.
    pub records: Vec<AssessmentRecord>,
    pub skips: SkipReport,
}

pub struct AssessInputs<'a> {
    pub segments: &'a [SegmentImages],
    pub codebook: &'a Codebook,
    pub bundle: &'a PromptBundle,
    pub exemplars: &'a ExemplarIndex,
    pub gateway: &'a Gateway,
    pub backend: &'a BackendConfig,
    pub config: AssessmentConfig,
}

enum Query {
    Answered(ImageAnswer),
    Failed(String),
}

async fn query(
    inputs: &AssessInputs<'_>,
    item: &CodebookItem,
    images: &[ImageRef],
    answer_image_id: &str,
) -> Result<Query, AssessError> {
    let shots = inputs
        .exemplars
        .get(&item.item_id)
        .map(Vec::as_slice)
        .unwrap_or_default();
    let request = build_assessment_request(inputs.bundle, item, shots, images)?;
    match chat_with_repair(
        inputs.gateway,
        inputs.backend,
        &request,
        ANSWER_CORRECTION,
        MAX_REPAIRS,
        |text| parse_answer(text, item),
    )
    .await
    {
        Ok(r) => Ok(Query::Answered(ImageAnswer {
            image_id: answer_image_id.to_string(),
            item_id: item.item_id.clone(),
            answer_ordinal: r.value,
            raw_text: r.raw_text,
            attempt_count: r.attempts,
        })),
        Err(RepairError::Gateway(g)) if g.is_configuration() => Err(AssessError::Gateway(g)),
        Err(RepairError::Gateway(g)) => Ok(Query::Failed(g.to_string())),
        Err(RepairError::Exhausted { attempts, last }) => {
            Ok(Query::Failed(format!("{last} (after {attempts} attempts)")))
        }
    }
}

async fn assess_pair(
    inputs: &AssessInputs<'_>,
    segment: &SegmentImages,
    item: &CodebookItem,
) -> Result<AssessmentRecord, AssessError> {
    let images = stride_select(&segment.images, inputs.config.image_cap);
    let mut skipped = segment.fetch_failures.clone();
    let mut support = Vec::new();

    match inputs.config.query_mode {
        QueryMode::Joint if !images.is_empty() => {
            let joint_id = images
                .iter()
                .map(|i| i.image_id.as_str())
                .collect::<Vec<_>>()
                .join("+");
            match query(inputs, item, &images, &joint_id).await? {
                Query::Answered(answer) => {
                    support = images
                        .iter()
                        .map(|img| ImageAnswer {
                            image_id: img.image_id.clone(),
                            ..answer.clone()
                        })
                        .collect();
                }
                Query::Failed(reason) => skipped.extend(images.iter().map(|img| SkippedImage {
                    image_id: img.image_id.clone(),
                    reason: reason.clone(),
                })),
            }
        }
        QueryMode::Joint => {}
        QueryMode::PerImage => {
            for img in &images {
                match query(inputs, item, std::slice::from_ref(img), &img.image_id).await? {
                    Query::Answered(answer) => support.push(answer),
                    Query::Failed(reason) => skipped.push(SkippedImage {
                        image_id: img.image_id.clone(),
                        reason,
                    }),
                }
            }
        }
    }

    if support.is_empty() {
        return Ok(AssessmentRecord::Failed(SegmentFailure {
            segment_id: segment.segment_id.clone(),
            item_id: item.item_id.clone(),
            error: if images.is_empty() {
                "no images available".into()
            } else {
                "every image failed".into()
            },
            skipped,
        }));
    }
    let score_ordinal = aggregate(&support, item, inputs.config.aggregation)?;
    Ok(AssessmentRecord::Scored(SegmentAssessment {
        segment_id: segment.segment_id.clone(),
        item_id: item.item_id.clone(),
        score_ordinal,
        n_images: support.len(),
        support,
        skipped,
        explanation: None,
    }))
}

/// Scores every (segment, item) pair. `on_record` sees each record as soon
/// as it completes; the returned list is in stable order regardless of
/// completion order. Only gateway configuration errors abort the run.
pub async fn assess_run(
    inputs: &AssessInputs<'_>,
    mut on_record: impl FnMut(&AssessmentRecord),
) -> Result<AssessRun, AssessError> {
    for item in &inputs.codebook.items {
        if inputs.bundle.item_prompt(&item.item_id).is_none() {
            return Err(AssessError::MissingPrompt(item.item_id.clone()));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..inputs.segments.len())
        .flat_map(|s| (0..inputs.codebook.items.len()).map(move |i| (s, i)))
        .collect();
    let parallelism = inputs.backend.max_concurrency.max(1);

    let mut results = stream::iter(pairs)
        .map(|(s, i)| async move {
            let record = assess_pair(inputs, &inputs.segments[s], &inputs.codebook.items[i]).await;
            ((s, i), record)
        })
        .buffer_unordered(parallelism);

    let mut done: Vec<((usize, usize), AssessmentRecord)> = Vec::new();
    while let Some((key, record)) = results.next().await {
        let record = record?;
        on_record(&record);
        done.push((key, record));
    }
    done.sort_by_key(|(key, _)| *key);

    let mut skips = SkipReport::default();
    let records: Vec<AssessmentRecord> = done.into_iter().map(|(_, r)| r).collect();
    for r in &records {
        skips.skipped_images += r.skipped().len();
        if matches!(r, AssessmentRecord::Failed(_)) {
            skips.failed_pairs += 1;
        }
    }
    Ok(AssessRun { records, skips })
}
