//! Explanations for scored assessments and the run report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assess::{AssessmentRecord, SegmentAssessment};
use crate::chat::{ChatMessage, ChatRequest, ImageRef};
use crate::corpus::{Codebook, CodebookItem};
use crate::gateway::{BackendConfig, Gateway, GatewayError};
use crate::prompt::PromptBundle;
use crate::reliability::ReliabilityReport;

pub const EXPLAIN_INSTRUCTION: &str =
    "Explain in one to two sentences the visible evidence for this answer.";
pub const REPORT_EXPLANATIONS_PER_ITEM: usize = 3;
const EXPLAIN_MAX_TOKENS: u32 = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("assessment has no supporting images")]
    NoImages,
    #[error("image {0} is not available")]
    MissingImage(String),
    #[error("prompt bundle has no entry for item {0}")]
    MissingPrompt(String),
    #[error("score {score} is not an option of item {item}")]
    UnknownScore { item: String, score: u32 },
    #[error("gateway configuration error: {0}")]
    Gateway(GatewayError),
    #[error("run has no assessments")]
    EmptyRun,
}

/// The line stating the agent's answer, e.g. `You answered: 1. Slight`.
pub fn answer_line(item: &CodebookItem, score: u32) -> Result<String, FeedbackError> {
    let option = item
        .option(i64::from(score))
        .ok_or_else(|| FeedbackError::UnknownScore {
            item: item.item_id.clone(),
            score,
        })?;
    Ok(format!("You answered: {score}. {}", option.label))
}

pub fn build_feedback_request(
    assessment: &SegmentAssessment,
    images: &[ImageRef],
    bundle: &PromptBundle,
    item: &CodebookItem,
) -> Result<ChatRequest, FeedbackError> {
    if assessment.support.is_empty() || images.is_empty() {
        return Err(FeedbackError::NoImages);
    }
    let item_prompt = bundle
        .item_prompt(&item.item_id)
        .ok_or_else(|| FeedbackError::MissingPrompt(item.item_id.clone()))?;
    let user = ChatMessage::user_with_images(
        images,
        [
            item_prompt.to_string(),
            answer_line(item, assessment.score_ordinal)?,
            EXPLAIN_INSTRUCTION.to_string(),
        ],
    );
    Ok(ChatRequest {
        messages: vec![ChatMessage::system(bundle.role_prompt.clone()), user],
        temperature: 0.0,
        max_tokens: EXPLAIN_MAX_TOKENS,
        model_hint: "vlm".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationFailure {
    pub segment_id: String,
    pub item_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackDiagnostics {
    pub requested: usize,
    pub explained: usize,
    pub failures: Vec<ExplanationFailure>,
}

pub struct FeedbackInputs<'a> {
    pub codebook: &'a Codebook,
    pub bundle: &'a PromptBundle,
    /// Every image a support entry may name, keyed by image id.
    pub images: &'a HashMap<String, ImageRef>,
    pub gateway: &'a Gateway,
    pub backend: &'a BackendConfig,
}

async fn explain(inputs: &FeedbackInputs<'_>, a: &SegmentAssessment) -> Result<String, FeedbackError> {
    let item = inputs
        .codebook
        .item(&a.item_id)
        .ok_or_else(|| FeedbackError::MissingPrompt(a.item_id.clone()))?;
    let mut images = Vec::with_capacity(a.support.len());
    for answer in &a.support {
        let img = inputs
            .images
            .get(&answer.image_id)
            .ok_or_else(|| FeedbackError::MissingImage(answer.image_id.clone()))?;
        images.push(img.clone());
    }
    let request = build_feedback_request(a, &images, inputs.bundle, item)?;
    let reply = inputs
        .gateway
        .chat(&request, inputs.backend)
        .await
        .map_err(FeedbackError::Gateway)?;
    Ok(reply.text.trim().to_string())
}

/// Fills `explanation` on every scored record. Per-record failures leave the
/// explanation absent and are listed in the diagnostics; only gateway
/// configuration errors abort.
pub async fn attach_explanations(
    records: &mut [AssessmentRecord],
    inputs: &FeedbackInputs<'_>,
) -> Result<FeedbackDiagnostics, FeedbackError> {
    let targets: Vec<(usize, SegmentAssessment)> = records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.scored().map(|a| (i, a.clone())))
        .collect();
    let parallelism = inputs.backend.max_concurrency.max(1);
    let mut outcomes: Vec<(usize, Result<String, FeedbackError>)> = stream::iter(targets)
        .map(|(i, a)| async move { (i, explain(inputs, &a).await) })
        .buffer_unordered(parallelism)
        .collect()
        .await;
    outcomes.sort_by_key(|(i, _)| *i);

    let mut diag = FeedbackDiagnostics {
        requested: outcomes.len(),
        ..Default::default()
    };
    for (i, outcome) in outcomes {
        let AssessmentRecord::Scored(a) = &mut records[i] else {
            unreachable!("only scored records are targeted");
        };
        match outcome {
            Ok(text) if !text.is_empty() => {
                a.explanation = Some(text);
                diag.explained += 1;
            }
            Err(FeedbackError::Gateway(g)) if g.is_configuration() => {
                return Err(FeedbackError::Gateway(g));
            }
            other => {
                a.explanation = None;
                diag.failures.push(ExplanationFailure {
                    segment_id: a.segment_id.clone(),
                    item_id: a.item_id.clone(),
                    reason: match other {
                        Ok(_) => "empty explanation".into(),
                        Err(e) => e.to_string(),
                    },
                });
            }
        }
    }
    Ok(diag)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub ordinal: u32,
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleExplanation {
    pub segment_id: String,
    pub score_ordinal: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSummary {
    pub item_id: String,
    pub measure_name: String,
    pub n_segments: usize,
    pub n_failed: usize,
    pub histogram: Vec<HistogramRow>,
    pub icc_variant: Option<String>,
    pub icc: Option<f64>,
    pub exact_agreement: Option<f64>,
    pub explanations: Vec<ExampleExplanation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutlierFlag {
    pub item_id: String,
    pub coder_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    pub skipped_images: usize,
    pub failed_pairs: usize,
    pub missing_explanations: usize,
    pub outliers: Vec<OutlierFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub items: Vec<ItemSummary>,
    pub diagnostics: ReportDiagnostics,
}

pub struct ReportInputs<'a> {
    pub run_id: &'a str,
    pub codebook: &'a Codebook,
    pub records: &'a [AssessmentRecord],
    pub reliability: Option<&'a ReliabilityReport>,
    pub feedback: Option<&'a FeedbackDiagnostics>,
    /// Stamped into the JSON only; the Markdown stays timestamp-free.
    pub generated_at: Option<String>,
}

fn summarize_item(item: &CodebookItem, inputs: &ReportInputs<'_>) -> ItemSummary {
    let records: Vec<&AssessmentRecord> = inputs
        .records
        .iter()
        .filter(|r| r.item_id() == item.item_id)
        .collect();
    let mut scored: Vec<&SegmentAssessment> = records.iter().filter_map(|r| r.scored()).collect();
    scored.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));

    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for a in &scored {
        *counts.entry(a.score_ordinal).or_default() += 1;
    }
    let histogram = item
        .options
        .iter()
        .map(|o| HistogramRow {
            ordinal: o.ordinal,
            label: o.label.clone(),
            count: counts.get(&o.ordinal).copied().unwrap_or(0),
        })
        .collect();

    let rel = inputs.reliability.and_then(|r| r.item(&item.item_id));
    ItemSummary {
        item_id: item.item_id.clone(),
        measure_name: item.measure_name.clone(),
        n_segments: scored.len(),
        n_failed: records.len() - scored.len(),
        histogram,
        icc_variant: rel.map(|r| r.variant.to_string()),
        icc: rel.and_then(|r| r.icc),
        exact_agreement: rel.map(|r| r.exact_agreement),
        explanations: scored
            .iter()
            .filter_map(|a| {
                a.explanation.as_ref().map(|text| ExampleExplanation {
                    segment_id: a.segment_id.clone(),
                    score_ordinal: a.score_ordinal,
                    text: text.clone(),
                })
            })
            .take(REPORT_EXPLANATIONS_PER_ITEM)
            .collect(),
    }
}

/// Builds the report and renders it as Markdown. Numbers in the Markdown
/// are printed with full precision so they match the JSON exactly.
pub fn render_report(inputs: &ReportInputs<'_>) -> Result<(String, RunReport), FeedbackError> {
    if inputs.records.is_empty() {
        return Err(FeedbackError::EmptyRun);
    }
    let items: Vec<ItemSummary> = inputs
        .codebook
        .items
        .iter()
        .filter(|item| inputs.records.iter().any(|r| r.item_id() == item.item_id))
        .map(|item| summarize_item(item, inputs))
        .collect();

    let diagnostics = ReportDiagnostics {
        skipped_images: inputs.records.iter().map(|r| r.skipped().len()).sum(),
        failed_pairs: inputs.records.iter().filter(|r| r.scored().is_none()).count(),
        missing_explanations: inputs.feedback.map_or(0, |f| f.failures.len()),
        outliers: inputs
            .reliability
            .map(|r| {
                r.items
                    .iter()
                    .flat_map(|i| {
                        i.outliers.iter().map(|c| OutlierFlag {
                            item_id: i.item_id.clone(),
                            coder_id: c.clone(),
                        })
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let report = RunReport {
        run_id: inputs.run_id.to_string(),
        generated_at: inputs.generated_at.clone(),
        items,
        diagnostics,
    };
    Ok((render_markdown(&report), report))
}

fn render_markdown(report: &RunReport) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Run report: {}\n", report.run_id);
    for item in &report.items {
        let _ = writeln!(md, "## {} (`{}`)\n", item.measure_name, item.item_id);
        let _ = writeln!(
            md,
            "Segments scored: {} (failed: {})\n",
            item.n_segments, item.n_failed
        );
        md.push_str("| Score | Label | Count |\n|---:|---|---:|\n");
        for row in &item.histogram {
            let _ = writeln!(md, "| {} | {} | {} |", row.ordinal, row.label, row.count);
        }
        md.push('\n');
        let variant = item.icc_variant.as_deref().unwrap_or("ICC(2,1)");
        match item.icc {
            Some(v) => {
                let _ = writeln!(md, "{variant}: {v}");
            }
            None => {
                let _ = writeln!(md, "{variant}: n/a");
            }
        }
        match item.exact_agreement {
            Some(v) => {
                let _ = writeln!(md, "Exact agreement: {v}\n");
            }
            None => md.push_str("Exact agreement: n/a\n\n"),
        }
        if !item.explanations.is_empty() {
            md.push_str("Explanations:\n\n");
            for e in &item.explanations {
                let _ = writeln!(
                    md,
                    "- Segment {} (score {}): {}",
                    e.segment_id,
                    e.score_ordinal,
                    e.text.replace('\n', " ")
                );
            }
            md.push('\n');
        }
    }
    let d = &report.diagnostics;
    md.push_str("## Diagnostics\n\n");
    let _ = writeln!(md, "- Skipped images: {}", d.skipped_images);
    let _ = writeln!(md, "- Failed segment/item pairs: {}", d.failed_pairs);
    let _ = writeln!(md, "- Missing explanations: {}", d.missing_explanations);
    if d.outliers.is_empty() {
        md.push_str("- Outlier coders: none\n");
    } else {
        for o in &d.outliers {
            let _ = writeln!(md, "- Outlier coder: {} on {}", o.coder_id, o.item_id);
        }
    }
    md
}
