//! Domain-informed prompt tuning.
//!
//! Three fixed templates drive the language model: one turns related-paper
//! abstracts into a second-person role prompt, one classifies each codebook
//! item as a perception or object-detection task, and one rewrites each item
//! into a self-contained codebook prompt. Responses are parsed strictly; a
//! malformed reply is retried with a corrective turn before surfacing.

use std::collections::BTreeMap;

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatMessage, ChatRequest};
use crate::corpus::{AbstractsDoc, Codebook, CodebookItem, TaskKind};
use crate::gateway::{BackendConfig, Gateway, GatewayError};

pub const ABSTRACTS_SLOT: &str = "[I2. Abstracts of related papers]";
pub const CODEBOOK_SLOT: &str = "[I4. Question and answer options from codebook]";

pub const ROLE_TEMPLATE: &str = "You are an expert in the following fields and the author of the paper abstracts provided here: [I2. Abstracts of related papers]. Based on the expertise demonstrated, generate a general professional role description of yourself in one to two sentences, starting with \"You are\" written in the second person. This will be used as a system prompt introduction.";

pub const CLASSIFIER_TEMPLATE: &str = "You are a classifier of annotation tasks.
Given a question and its answer options, decide if the task is perception (holistic/qualitative scene judgment such as condition/quality/intensity ratings) or object_detection (presence, counting, or localization of specific object instances).
Rules: If it asks to rate/assess overall condition or quality (e.g., Good/Fair/Poor), label as perception.
If it asks to detect, count, or verify specific objects (e.g., cars, signs, pedestrians), label as object_detection.
[I4. Question and answer options from codebook] Return only a single integer: 0 if perception, 1 if object_detection.
Do not include any words, JSON, spaces, or punctuation.";

pub const REWRITE_TEMPLATE: &str = "Instruction: Rewrite the question as a clear, self-contained sentence, prefixed with \"Question:\". Then, rewrite each answer option as a full sentence explaining the meaning, starting with its number. Keep all numbers and meaning intact. Output plain text only, one sentence per line. [I4. Question and answer options from codebook]";

/// Corrective turn appended after a reply that breaks the output contract.
pub const FORMAT_CORRECTION: &str =
    "Your previous reply violated the output format. Follow the format exactly.";

pub const DEFAULT_MAX_REPAIRS: usize = 2;
const ROLE_MAX_TOKENS: u32 = 512;
const REWRITE_MAX_TOKENS: u32 = 512;
const CLASSIFIER_MAX_TOKENS: u32 = 4;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no abstracts supplied")]
    EmptyAbstracts,
    #[error("format violation: {0}")]
    FormatViolation(String),
    #[error("item {0}: no keyword rule applies; a model call is required")]
    RequiresModel(String),
    #[error("incomplete prompt bundle: {0}")]
    IncompleteBundle(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn llm_request(text: String, max_tokens: u32) -> ChatRequest {
    ChatRequest {
        messages: vec![ChatMessage::user_text(text)],
        temperature: 0.0,
        max_tokens,
        model_hint: "llm".into(),
    }
}

/// Renders abstracts as `Title: <title>\n<abstract>` blocks separated by one
/// blank line.
pub fn render_abstracts(abstracts: &AbstractsDoc) -> String {
    abstracts
        .entries
        .iter()
        .map(|e| format!("Title: {}\n{}", e.title.trim(), e.abstract_text.trim()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_role_request(abstracts: &AbstractsDoc) -> Result<ChatRequest, PromptError> {
    if abstracts.entries.is_empty() {
        return Err(PromptError::EmptyAbstracts);
    }
    let text = ROLE_TEMPLATE.replace(ABSTRACTS_SLOT, &render_abstracts(abstracts));
    Ok(llm_request(text, ROLE_MAX_TOKENS))
}

pub fn parse_role_response(text: &str) -> Result<String, PromptError> {
    let trimmed = text.trim();
    if trimmed.starts_with("You are") {
        Ok(trimmed.to_string())
    } else {
        Err(PromptError::FormatViolation(
            "role description must start with \"You are\"".into(),
        ))
    }
}

/// `Question: <question>` followed by `Options:` and one `<ordinal>. <label>`
/// line per option.
pub fn render_item_slot(item: &CodebookItem) -> String {
    let mut out = format!("Question: {}\nOptions:", item.question_text.trim());
    for option in &item.options {
        out.push_str(&format!("\n{}. {}", option.ordinal, option.label.trim()));
    }
    out
}

pub fn build_classifier_request(item: &CodebookItem) -> ChatRequest {
    llm_request(
        CLASSIFIER_TEMPLATE.replace(CODEBOOK_SLOT, &render_item_slot(item)),
        CLASSIFIER_MAX_TOKENS,
    )
}

pub fn parse_classifier_response(text: &str) -> Result<TaskKind, PromptError> {
    match text.trim() {
        "0" => Ok(TaskKind::Perception),
        "1" => Ok(TaskKind::ObjectDetection),
        other => Err(PromptError::FormatViolation(format!(
            "expected a bare 0 or 1, got {other:?}"
        ))),
    }
}

const PERCEPTION_STEMS: &[&str] = &[
    "rate", "rating", "assess", "condition", "quality", "good", "fair", "poor",
];
const DETECTION_STEMS: &[&str] = &["detect", "count", "presence", "verify", "verifie"];
const STEM_SUFFIXES: &[&str] = &["", "s", "d", "ed", "ing", "ment", "ments", "ion", "ions"];

fn matches_stem(token: &str, stem: &str) -> bool {
    token
        .strip_prefix(stem)
        .is_some_and(|rest| STEM_SUFFIXES.contains(&rest))
}

/// Offline keyword classifier mirroring the classifier prompt's rules.
/// Perception wins when both rule sets fire.
pub fn heuristic_classify(item: &CodebookItem) -> Result<TaskKind, PromptError> {
    let mut text = item.question_text.to_lowercase();
    for option in &item.options {
        text.push(' ');
        text.push_str(&option.label.to_lowercase());
    }
    let tokens: Vec<&str> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect();
    let any = |stems: &[&str]| tokens.iter().any(|t| stems.iter().any(|s| matches_stem(t, s)));
    let how_many = tokens.windows(2).any(|w| w == ["how", "many"]);
    if any(PERCEPTION_STEMS) {
        Ok(TaskKind::Perception)
    } else if how_many || any(DETECTION_STEMS) {
        Ok(TaskKind::ObjectDetection)
    } else {
        Err(PromptError::RequiresModel(item.item_id.clone()))
    }
}

pub fn build_rewrite_request(item: &CodebookItem) -> ChatRequest {
    llm_request(
        REWRITE_TEMPLATE.replace(CODEBOOK_SLOT, &render_item_slot(item)),
        REWRITE_MAX_TOKENS,
    )
}

/// Checks a codebook prompt: a `Question:` line followed by one line per
/// option, each starting with its ordinal. Blank lines are dropped.
pub fn parse_rewrite_response(text: &str, item: &CodebookItem) -> Result<String, PromptError> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let expected = 1 + item.options.len();
    if lines.len() != expected {
        return Err(PromptError::FormatViolation(format!(
            "expected {expected} lines, got {}",
            lines.len()
        )));
    }
    if !lines[0].starts_with("Question:") {
        return Err(PromptError::FormatViolation(
            "first line must start with \"Question:\"".into(),
        ));
    }
    for (line, option) in lines[1..].iter().zip(&item.options) {
        let ordinal = option.ordinal.to_string();
        let starts = line
            .strip_prefix(ordinal.as_str())
            .is_some_and(|rest| !rest.starts_with(|c: char| c.is_ascii_digit()));
        if !starts {
            return Err(PromptError::FormatViolation(format!(
                "option line {line:?} does not start with {ordinal}"
            )));
        }
    }
    Ok(lines.join("\n"))
}

/// Persisted per-item prompt entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleItem {
    pub item_id: String,
    pub task_kind: TaskKind,
    pub item_prompt: String,
}

/// Role prompt plus one codebook prompt and task kind per item, in codebook
/// order. Serializes to the `prompts.json` artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub role_prompt: String,
    pub items: Vec<BundleItem>,
}

impl PromptBundle {
    pub fn item(&self, item_id: &str) -> Option<&BundleItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn item_prompt(&self, item_id: &str) -> Option<&str> {
        self.item(item_id).map(|i| i.item_prompt.as_str())
    }

    pub fn task_kind(&self, item_id: &str) -> Option<TaskKind> {
        self.item(item_id).map(|i| i.task_kind)
    }

    /// Bundle invariants against a codebook: exact item coverage, a
    /// `You are` role, resolved task kinds and option-count agreement.
    pub fn validate(&self, codebook: &Codebook) -> Result<(), PromptError> {
        let incomplete = |msg: String| PromptError::IncompleteBundle(msg);
        if !self.role_prompt.starts_with("You are") {
            return Err(incomplete("role prompt must start with \"You are\"".into()));
        }
        let ids: Vec<&str> = self.items.iter().map(|i| i.item_id.as_str()).collect();
        let expected: Vec<&str> = codebook.item_ids().collect();
        if ids != expected {
            return Err(incomplete(format!(
                "bundle items {ids:?} do not match codebook items {expected:?}"
            )));
        }
        for (entry, item) in self.items.iter().zip(&codebook.items) {
            if entry.task_kind == TaskKind::Unknown {
                return Err(incomplete(format!("item {} is unclassified", item.item_id)));
            }
            parse_rewrite_response(&entry.item_prompt, item)
                .map_err(|e| incomplete(format!("item {}: {e}", item.item_id)))?;
        }
        Ok(())
    }
}

/// Combines per-item artifacts into a bundle in codebook order.
pub fn assemble_bundle(
    role_prompt: &str,
    classifications: &BTreeMap<String, TaskKind>,
    item_prompts: &BTreeMap<String, String>,
    codebook: &Codebook,
) -> Result<PromptBundle, PromptError> {
    let items = codebook
        .items
        .iter()
        .map(|item| {
            let id = &item.item_id;
            let task_kind = *classifications
                .get(id)
                .ok_or_else(|| PromptError::IncompleteBundle(format!("item {id} not classified")))?;
            let item_prompt = item_prompts
                .get(id)
                .ok_or_else(|| PromptError::IncompleteBundle(format!("item {id} not rewritten")))?
                .clone();
            Ok(BundleItem {
                item_id: id.clone(),
                task_kind,
                item_prompt,
            })
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let bundle = PromptBundle {
        role_prompt: role_prompt.to_string(),
        items,
    };
    bundle.validate(codebook)?;
    Ok(bundle)
}

/// A parsed reply plus bookkeeping about how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Repaired<T> {
    pub value: T,
    pub raw_text: String,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum RepairError<E> {
    #[error("gateway: {0}")]
    Gateway(GatewayError),
    #[error("reply still malformed after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: E },
}

/// Sends `request`, parses the reply, and on a parse failure re-asks up to
/// `max_repairs` times with the bad reply and `correction` appended.
pub async fn chat_with_repair<T, E>(
    gateway: &Gateway,
    backend: &BackendConfig,
    request: &ChatRequest,
    correction: &str,
    max_repairs: usize,
    parse: impl Fn(&str) -> Result<T, E>,
) -> Result<Repaired<T>, RepairError<E>> {
    let mut current = request.clone();
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        let reply = gateway
            .chat(&current, backend)
            .await
            .map_err(RepairError::Gateway)?;
        match parse(&reply.text) {
            Ok(value) => {
                return Ok(Repaired {
                    value,
                    raw_text: reply.text,
                    attempts,
                })
            }
            Err(err) if attempts as usize > max_repairs => {
                return Err(RepairError::Exhausted {
                    attempts,
                    last: err,
                })
            }
            Err(_) => current = current.with_correction(&reply.text, correction),
        }
    }
}

fn flatten(err: RepairError<PromptError>) -> PromptError {
    match err {
        RepairError::Gateway(g) => PromptError::Gateway(g),
        RepairError::Exhausted { last, .. } => last,
    }
}

async fn classify_item(
    gateway: &Gateway,
    backend: &BackendConfig,
    item: &CodebookItem,
) -> Result<TaskKind, PromptError> {
    let kind = chat_with_repair(
        gateway,
        backend,
        &build_classifier_request(item),
        FORMAT_CORRECTION,
        DEFAULT_MAX_REPAIRS,
        parse_classifier_response,
    )
    .await
    .map_err(flatten)?
    .value;
    if let Ok(guess) = heuristic_classify(item) {
        if guess != kind {
            tracing::warn!(
                item = %item.item_id,
                model = ?kind,
                heuristic = ?guess,
                "task classification disagrees with keyword rules; keeping model answer"
            );
        }
    }
    Ok(kind)
}

async fn rewrite_item(
    gateway: &Gateway,
    backend: &BackendConfig,
    item: &CodebookItem,
) -> Result<String, PromptError> {
    Ok(chat_with_repair(
        gateway,
        backend,
        &build_rewrite_request(item),
        FORMAT_CORRECTION,
        DEFAULT_MAX_REPAIRS,
        |text| parse_rewrite_response(text, item),
    )
    .await
    .map_err(flatten)?
    .value)
}

/// Full tuning pass: role prompt, then classification and rewriting of every
/// item (items are processed concurrently).
pub async fn tune_prompts(
    abstracts: &AbstractsDoc,
    codebook: &Codebook,
    gateway: &Gateway,
    backend: &BackendConfig,
) -> Result<PromptBundle, PromptError> {
    let role = chat_with_repair(
        gateway,
        backend,
        &build_role_request(abstracts)?,
        FORMAT_CORRECTION,
        DEFAULT_MAX_REPAIRS,
        parse_role_response,
    )
    .await
    .map_err(flatten)?
    .value;

    let per_item = try_join_all(codebook.items.iter().map(|item| async move {
        let kind = classify_item(gateway, backend, item).await?;
        let prompt = rewrite_item(gateway, backend, item).await?;
        Ok::<_, PromptError>((item.item_id.clone(), kind, prompt))
    }))
    .await?;

    let mut kinds = BTreeMap::new();
    let mut prompts = BTreeMap::new();
    for (id, kind, prompt) in per_item {
        kinds.insert(id.clone(), kind);
        prompts.insert(id, prompt);
    }
    assemble_bundle(&role, &kinds, &prompts, codebook)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AbstractEntry, OptionDef};

    fn item(question: &str, labels: &[&str]) -> CodebookItem {
        CodebookItem {
            item_id: "q".into(),
            measure_name: "Q".into(),
            question_text: question.into(),
            options: labels
                .iter()
                .enumerate()
                .map(|(i, l)| OptionDef {
                    ordinal: i as u32,
                    label: l.to_string(),
                    description: None,
                })
                .collect(),
            task_kind: TaskKind::Unknown,
        }
    }

    fn abstracts(entries: &[(&str, &str)]) -> AbstractsDoc {
        AbstractsDoc {
            entries: entries
                .iter()
                .map(|(t, a)| AbstractEntry {
                    title: t.to_string(),
                    abstract_text: a.to_string(),
                })
                .collect(),
        }
    }

    #[test]
    fn role_request() {
        let req = build_role_request(&abstracts(&[("T", "A")])).unwrap();
        assert_eq!(req.messages.len(), 1);
        assert_eq!(req.temperature, 0.0);
        let text = req.messages[0].text();
        assert!(text.contains("Title: T\nA"));
        let (head, tail) = ROLE_TEMPLATE.split_once(ABSTRACTS_SLOT).unwrap();
        assert!(text.starts_with(head) && text.ends_with(tail));

        let two = build_role_request(&abstracts(&[("T1", "A1"), ("T2", "A2")])).unwrap();
        assert!(two.messages[0].text().contains("Title: T1\nA1\n\nTitle: T2\nA2"));
        assert!(matches!(
            build_role_request(&abstracts(&[])),
            Err(PromptError::EmptyAbstracts)
        ));
    }

    #[test]
    fn role_response() {
        let ok = "You are an expert in family social science...";
        assert_eq!(parse_role_response(ok).unwrap(), ok);
        assert_eq!(parse_role_response("  You are X. ").unwrap(), "You are X.");
        assert!(parse_role_response("An expert you are").is_err());
    }

    #[test]
    fn classifier_request_slot() {
        let it = item("  Is there graffiti?  ", &["None", "Some", "Lots"]);
        let text = build_classifier_request(&it).messages[0].text();
        assert!(text.contains("Return only a single integer: 0 if perception, 1 if object_detection"));
        assert!(text.contains("Question: Is there graffiti?\nOptions:\n0. None\n1. Some\n2. Lots"));
        let option_lines = text
            .lines()
            .filter(|l| l.starts_with(|c: char| c.is_ascii_digit()) && l.contains(". "))
            .count();
        assert_eq!(option_lines, 3);
    }

    #[test]
    fn classifier_response() {
        assert_eq!(parse_classifier_response("0").unwrap(), TaskKind::Perception);
        assert_eq!(parse_classifier_response(" 1\n").unwrap(), TaskKind::ObjectDetection);
        for bad in ["perception", "0.", "", "01", "2"] {
            assert!(parse_classifier_response(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn heuristic_rules() {
        let cond = item("Rate the overall condition of the street (Good/Fair/Poor)", &["Good", "Bad"]);
        assert_eq!(heuristic_classify(&cond).unwrap(), TaskKind::Perception);
        let cars = item("How many cars are visible?", &["0", "1-2", "3+"]);
        assert_eq!(heuristic_classify(&cars).unwrap(), TaskKind::ObjectDetection);
        let weather = item("Describe the weather", &["Sunny", "Cloudy"]);
        assert!(matches!(heuristic_classify(&weather), Err(PromptError::RequiresModel(_))));
        let both = item("Count and rate the benches", &["None", "Some"]);
        assert_eq!(heuristic_classify(&both).unwrap(), TaskKind::Perception);
        // substrings do not count as keywords
        let separate = item("Is the separate lane visible?", &["Yes", "No"]);
        assert!(heuristic_classify(&separate).is_err());
    }

    #[test]
    fn rewrite_request_and_response() {
        let it = item("Condition?", &["Good", "Fair", "Poor", "Very poor"]);
        let text = build_rewrite_request(&it).messages[0].text();
        assert!(text.contains("prefixed with \"Question:\""));
        assert!(text.contains("Keep all numbers and meaning intact"));
        assert_eq!(text.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 4);

        let two = item("Condition?", &["Good", "Poor"]);
        let reply = "Question: What is the condition?\n\n0. The street is good.\n1. The street is poor.\n";
        assert_eq!(
            parse_rewrite_response(reply, &two).unwrap(),
            "Question: What is the condition?\n0. The street is good.\n1. The street is poor."
        );
        let three = item("Condition?", &["a", "b", "c"]);
        assert!(parse_rewrite_response("Question: x\n0. a", &three).is_err());
        assert!(parse_rewrite_response("Q: x\n0. a\n1. b", &two).is_err());
        assert!(parse_rewrite_response("Question: x\n0. a\n10. b", &two).is_err());
    }

    #[test]
    fn bundle_assembly() {
        let mut cb = Codebook {
            items: vec![item("Condition?", &["Good", "Poor"]), item("Count cars", &["0", "1"])],
        };
        cb.items[1].item_id = "cars".into();
        let kinds: BTreeMap<_, _> = [
            ("q".to_string(), TaskKind::Perception),
            ("cars".to_string(), TaskKind::ObjectDetection),
        ]
        .into();
        let mut prompts: BTreeMap<_, _> = [
            ("q".to_string(), "Question: a\n0. x\n1. y".to_string()),
            ("cars".to_string(), "Question: b\n0. x\n1. y".to_string()),
        ]
        .into();
        let bundle = assemble_bundle("You are a coder.", &kinds, &prompts, &cb).unwrap();
        assert_eq!(bundle.items.len(), 2);
        assert_eq!(bundle.items[1].item_id, "cars");
        assert!(matches!(
            assemble_bundle("A coder.", &kinds, &prompts, &cb),
            Err(PromptError::IncompleteBundle(_))
        ));
        prompts.remove("cars");
        assert!(matches!(
            assemble_bundle("You are a coder.", &kinds, &prompts, &cb),
            Err(PromptError::IncompleteBundle(_))
        ));
    }
}
