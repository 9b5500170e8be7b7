//! Chat-completions wire format and request canonicalization.
//!
//! Request body:
//! `{"model","messages":[{"role","content":[{"type":"text","text"}|{"type":"image","data":<base64>}]}],"temperature","max_tokens"}`.
//! Response body: `{"choices":[{"message":{"content"}}]}`.

use base64::Engine;
use serde_json::{json, Map, Value};

use crate::chat::{sha256_hex, ChatRequest, ContentPart};

use super::BackendConfig;

fn body(request: &ChatRequest, backend: &BackendConfig, image: impl Fn(&[u8], &str) -> Value) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let content: Vec<Value> = m
                .parts
                .iter()
                .map(|p| match p {
                    ContentPart::Text(text) => json!({"type": "text", "text": text}),
                    ContentPart::Image(img) => image(&img.bytes, &img.content_digest),
                })
                .collect();
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({
        "model": backend.model_id,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

/// The JSON body sent over the wire, images inlined as base64.
pub fn request_body(request: &ChatRequest, backend: &BackendConfig) -> Value {
    body(request, backend, |bytes, _| {
        json!({"type": "image", "data": base64::engine::general_purpose::STANDARD.encode(bytes)})
    })
}

/// The body with image payloads replaced by their sha256 digests. This is
/// what request digests are computed over.
pub fn digest_view(request: &ChatRequest, backend: &BackendConfig) -> Value {
    body(request, backend, |_, digest| {
        json!({"type": "image", "sha256": digest})
    })
}

/// Compact JSON with object keys sorted recursively.
pub fn canonical_json(value: &Value) -> String {
    fn sorted(value: &Value) -> Value {
        match value {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                let mut out = Map::new();
                for k in keys {
                    out.insert(k.clone(), sorted(&map[k]));
                }
                Value::Object(out)
            }
            Value::Array(items) => Value::Array(items.iter().map(sorted).collect()),
            other => other.clone(),
        }
    }
    // serde_json's default Map is ordered by key; `sorted` keeps that true
    // even if a dependency turns on `preserve_order`.
    serde_json::to_string(&sorted(value)).expect("JSON value serializes")
}

pub fn digest_value(value: &Value) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

/// Cassette key for a request against a backend.
pub fn request_digest(request: &ChatRequest, backend: &BackendConfig) -> String {
    digest_value(&digest_view(request, backend))
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

/// Text of the first choice. String content or an array of text parts are
/// both accepted.
pub fn parse_response(body: &[u8]) -> Result<(String, Usage), String> {
    let value: Value = serde_json::from_slice(body).map_err(|e| format!("invalid JSON: {e}"))?;
    let content = value
        .pointer("/choices/0/message/content")
        .ok_or("missing choices[0].message.content")?;
    let text = match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        Value::Null => String::new(),
        other => return Err(format!("unexpected content type: {other}")),
    };
    let usage = Usage {
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64),
    };
    Ok((text, usage))
}

/// A minimal successful response body carrying `text`.
pub fn completion_body(text: &str) -> Value {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]})
}
