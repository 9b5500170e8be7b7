//! The network edge. [`HttpTransport`] is the production implementation;
//! [`ScriptedTransport`] answers from a closure for offline runs and tests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use futures::future::BoxFuture;
use futures::FutureExt;
use serde_json::Value;
use thiserror::Error;

use super::wire::completion_body;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpReply {
    pub fn ok_json(value: &Value) -> Self {
        Self {
            status: 200,
            body: serde_json::to_vec(value).expect("JSON serializes"),
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn body_text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("operation not supported by this transport: {0}")]
    Unsupported(&'static str),
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError>;

    async fn get(&self, url: &str) -> Result<HttpReply, TransportError>;
}

#[derive(Debug, Clone, Default)]
pub struct HttpTransport {
    client: reqwest::Client,
}

impl HttpTransport {
    pub fn new() -> Self {
        Self::default()
    }
}

async fn into_reply(resp: reqwest::Response) -> Result<HttpReply, TransportError> {
    let status = resp.status().as_u16();
    let body = resp
        .bytes()
        .await
        .map_err(|e| TransportError::Connect(e.to_string()))?;
    Ok(HttpReply {
        status,
        body: body.to_vec(),
    })
}

#[async_trait]
impl Transport for HttpTransport {
    async fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = bearer {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        into_reply(resp).await
    }

    async fn get(&self, url: &str) -> Result<HttpReply, TransportError> {
        let resp = self
            .client
            .get(url)
            .send()
            .await
            .map_err(|e| TransportError::Connect(e.to_string()))?;
        into_reply(resp).await
    }
}

type Handler = dyn Fn(Value) -> BoxFuture<'static, Result<HttpReply, TransportError>> + Send + Sync;

/// Answers chat posts from a closure and counts how often it was called.
pub struct ScriptedTransport {
    handler: Arc<Handler>,
    calls: AtomicUsize,
}

impl ScriptedTransport {
    /// Full control over status codes and timing.
    pub fn from_fn<F, Fut>(f: F) -> Self
    where
        F: Fn(Value) -> Fut + Send + Sync + 'static,
        Fut: std::future::Future<Output = Result<HttpReply, TransportError>> + Send + 'static,
    {
        Self {
            handler: Arc::new(move |body| f(body).boxed()),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always succeeds with the text the closure picks for a request body.
    pub fn replies<F>(f: F) -> Self
    where
        F: Fn(&Value) -> String + Send + Sync + 'static,
    {
        Self::from_fn(move |body| {
            let text = f(&body);
            async move { Ok(HttpReply::ok_json(&completion_body(&text))) }
        })
    }

    /// A transport that must never be reached.
    pub fn unreachable() -> Self {
        Self::from_fn(|_| async { Err(TransportError::Unsupported("network access disabled")) })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Transport for ScriptedTransport {
    async fn post_json(
        &self,
        _url: &str,
        _bearer: Option<&str>,
        body: &Value,
    ) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        (self.handler)(body.clone()).await
    }

    async fn get(&self, _url: &str) -> Result<HttpReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Unsupported("GET"))
    }
}

/// Text parts of every message in a wire request body, in order.
pub fn body_texts(body: &Value) -> Vec<String> {
    body.get("messages")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .flat_map(|m| m.get("content").and_then(Value::as_array).cloned().unwrap_or_default())
        .filter_map(|part| part.get("text").and_then(Value::as_str).map(str::to_string))
        .collect()
}
