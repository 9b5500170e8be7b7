//! Multimodal chat request types shared by every model-facing module.

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hex-encoded sha256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

/// Where an image payload came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageSource {
    Local { path: PathBuf },
    /// Request URL with credentials stripped.
    Remote { url: String },
}

/// An image payload plus its content digest.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub source: ImageSource,
    pub content_digest: String,
    #[serde(skip)]
    pub bytes: Arc<[u8]>,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, source: ImageSource, bytes: Vec<u8>) -> Self {
        Self {
            image_id: image_id.into(),
            source,
            content_digest: sha256_hex(&bytes),
            bytes: bytes.into(),
        }
    }

    pub fn digest_matches(&self) -> bool {
        sha256_hex(&self.bytes) == self.content_digest
    }

    /// Best-effort MIME type from magic bytes.
    pub fn media_type(&self) -> &'static str {
        media_type(&self.bytes)
    }
}

pub fn media_type(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else {
        "image/jpeg"
    }
}

impl std::fmt::Debug for ImageRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageRef")
            .field("image_id", &self.image_id)
            .field("source", &self.source)
            .field("content_digest", &self.content_digest)
            .field("len", &self.bytes.len())
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    /// Images first, then text parts, in the given order.
    pub fn user_with_images<'a>(
        images: impl IntoIterator<Item = &'a ImageRef>,
        texts: impl IntoIterator<Item = String>,
    ) -> Self {
        let mut parts: Vec<ContentPart> = images.into_iter().cloned().map(ContentPart::Image).collect();
        parts.extend(texts.into_iter().map(ContentPart::Text));
        Self {
            role: ChatRole::User,
            parts,
        }
    }

    /// All text parts joined by newlines.
    pub fn text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text(t) => Some(t.as_str()),
                ContentPart::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::Image(img) => Some(img),
            ContentPart::Text(_) => None,
        })
    }

    pub fn is_valid(&self) -> bool {
        !self.parts.is_empty()
            && (self.role != ChatRole::System
                || self.parts.iter().all(|p| matches!(p, ContentPart::Text(_))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Which backend role this request is meant for (`"llm"` or `"vlm"`).
    pub model_hint: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.messages.is_empty() {
            return Err("request has no messages".into());
        }
        if let Some(i) = self.messages.iter().position(|m| !m.is_valid()) {
            return Err(format!("message {i} is empty or a system message carries images"));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(format!("temperature {} is negative", self.temperature));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        Ok(())
    }

    /// Copy of this request with a failed reply and a corrective instruction
    /// appended as a new exchange.
    pub fn with_correction(&self, bad_reply: &str, correction: &str) -> Self {
        let mut next = self.clone();
        next.messages.push(ChatMessage::assistant(bad_reply));
        next.messages.push(ChatMessage::user_text(correction));
        next
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
}
