//! Single chokepoint for external I/O: chat backends and imagery providers.
//!
//! A [`Gateway`] runs in one of three modes. `Live` talks to the network,
//! `Record` does the same but stores every response in a cassette keyed by
//! request digest, and `Replay` answers only from the cassette and never
//! touches the network. Live traffic passes per-backend admission control
//! (concurrency cap and token bucket) and retries transient failures with
//! jittered exponential backoff.

mod backend;
pub mod cassette;
mod limiter;
pub mod transcript;
pub mod transport;
pub mod wire;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::time::Instant;

pub use backend::{BackendConfig, RetryPolicy};
pub use cassette::{Cassette, CassetteStore, RecordedResponse};
pub use limiter::Admission;
pub use transcript::{Transcript, TranscriptEntry};
pub use transport::{HttpReply, HttpTransport, ScriptedTransport, Transport, TransportError};

use crate::chat::{sha256_hex, ChatRequest, ChatResponse, ImageRef, ImageSource};
use crate::geo::ViewSpec;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("backend returned status {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no cassette entry for request digest {0}")]
    CassetteMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    InvalidBackend(String),
    #[error("credential environment variable {0} is not set")]
    MissingCredential(String),
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("imagery provider returned status {status}")]
    ProviderError { status: u16 },
    #[error("cassette I/O: {0}")]
    Cassette(String),
}

impl GatewayError {
    /// Errors that no amount of retrying a single request will fix; callers
    /// abort the batch on these.
    pub fn is_configuration(&self) -> bool {
        matches!(
            self,
            Self::CassetteMiss(_)
                | Self::InvalidBackend(_)
                | Self::MissingCredential(_)
                | Self::Cassette(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    #[default]
    Live,
    Record,
    Replay,
}

/// Where street imagery comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageryProvider {
    /// Static street-imagery HTTP API taking
    /// `location,heading,fov,pitch,size,key` query parameters.
    StaticApi {
        endpoint_url: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        auth_env_var: Option<String>,
        #[serde(default = "default_image_timeout")]
        timeout_s: f64,
    },
    /// Pre-downloaded files at `<root>/<segment_id>/pNNN_hHHH.jpg`.
    Local { root: PathBuf },
}

fn default_image_timeout() -> f64 {
    30.0
}

/// Replaces characters outside `[A-Za-z0-9._-]` with `_`.
pub fn sanitize_id(raw: &str) -> String {
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Stable id for the image of a view.
pub fn view_image_id(view: &ViewSpec) -> String {
    format!(
        "{}_p{:03}_h{:03}",
        sanitize_id(&view.sample.segment_id),
        view.sample.index,
        view.heading_whole_deg()
    )
}

/// Path of a view's image under a local provider root.
pub fn local_image_path(root: &std::path::Path, view: &ViewSpec) -> PathBuf {
    root.join(&view.sample.segment_id).join(format!(
        "p{:03}_h{:03}.jpg",
        view.sample.index,
        view.heading_whole_deg()
    ))
}

fn trim_number(x: f64) -> String {
    let s = format!("{x:.6}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Query string for a static imagery request, without the key.
pub fn static_api_query(view: &ViewSpec) -> String {
    format!(
        "location={},{}&heading={}&fov={}&pitch={}&size={}x{}",
        trim_number(view.sample.position.lat),
        trim_number(view.sample.position.lon),
        trim_number(view.heading_deg),
        trim_number(view.fov_deg),
        trim_number(view.pitch_deg),
        view.width_px,
        view.height_px
    )
}

#[derive(Debug)]
struct Clock {
    wall: DateTime<Utc>,
    start: Instant,
}

impl Clock {
    fn new() -> Self {
        Self {
            wall: Utc::now(),
            start: Instant::now(),
        }
    }

    /// Wall time advanced by the tokio clock, so paused-time tests see
    /// virtual timestamps.
    fn now(&self) -> DateTime<Utc> {
        self.wall + chrono::Duration::from_std(self.start.elapsed()).unwrap_or_default()
    }
}

pub struct Gateway {
    mode: GatewayMode,
    transport: Arc<dyn Transport>,
    cassette: Option<Arc<CassetteStore>>,
    transcript: Arc<Transcript>,
    retry: RetryPolicy,
    admissions: Mutex<HashMap<String, Arc<Admission>>>,
    rng: Mutex<ChaCha8Rng>,
    clock: Clock,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("cassette", &self.cassette.as_ref().map(|c| c.path().to_path_buf()))
            .finish_non_exhaustive()
    }
}

pub struct GatewayBuilder {
    mode: GatewayMode,
    cassette_path: Option<PathBuf>,
    transport: Option<Arc<dyn Transport>>,
    transcript: Option<Arc<Transcript>>,
    retry: RetryPolicy,
    seed: u64,
}

impl GatewayBuilder {
    pub fn cassette(mut self, path: impl Into<PathBuf>) -> Self {
        self.cassette_path = Some(path.into());
        self
    }

    pub fn transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = Some(transport);
        self
    }

    pub fn transcript(mut self, transcript: Arc<Transcript>) -> Self {
        self.transcript = Some(transcript);
        self
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Seed for backoff jitter.
    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(self) -> Result<Gateway, GatewayError> {
        let cassette = match (self.mode, self.cassette_path) {
            (GatewayMode::Live, _) => None,
            (mode, Some(path)) => Some(Arc::new(
                CassetteStore::open(path, mode == GatewayMode::Record)
                    .map_err(GatewayError::Cassette)?,
            )),
            (mode, None) => {
                return Err(GatewayError::Cassette(format!(
                    "{mode:?} mode requires a cassette path"
                )))
            }
        };
        Ok(Gateway {
            mode: self.mode,
            transport: self
                .transport
                .unwrap_or_else(|| Arc::new(HttpTransport::new())),
            cassette,
            transcript: self
                .transcript
                .unwrap_or_else(|| Arc::new(Transcript::in_memory())),
            retry: self.retry,
            admissions: Mutex::default(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(self.seed)),
            clock: Clock::new(),
        })
    }
}

enum Attempt {
    Done(ChatResponse),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl Gateway {
    pub fn builder(mode: GatewayMode) -> GatewayBuilder {
        GatewayBuilder {
            mode,
            cassette_path: None,
            transport: None,
            transcript: None,
            retry: RetryPolicy::default(),
            seed: 0,
        }
    }

    /// A live gateway over real HTTP.
    pub fn live() -> Self {
        Self::builder(GatewayMode::Live).build().expect("live gateway needs no cassette")
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    pub fn transcript(&self) -> &Arc<Transcript> {
        &self.transcript
    }

    pub fn cassette(&self) -> Option<&Arc<CassetteStore>> {
        self.cassette.as_ref()
    }

    fn admission(&self, backend: &BackendConfig) -> Arc<Admission> {
        self.admissions
            .lock()
            .unwrap()
            .entry(backend.limiter_key())
            .or_insert_with(|| {
                Arc::new(Admission::new(
                    backend.max_concurrency,
                    backend.requests_per_minute,
                    backend.max_concurrency,
                ))
            })
            .clone()
    }

    fn log(&self, digest: &str, started: Instant, status: Value, kind: &str, attempt: Option<u32>) {
        self.transcript.record(TranscriptEntry {
            ts: self.clock.now(),
            digest: digest.to_string(),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            status,
            kind: Some(kind.into()),
            attempt,
            prompt_tokens: None,
            completion_tokens: None,
        });
    }

    /// Sends a chat request and returns the first choice's text.
    pub async fn chat(
        &self,
        request: &ChatRequest,
        backend: &BackendConfig,
    ) -> Result<ChatResponse, GatewayError> {
        request.validate().map_err(GatewayError::InvalidRequest)?;
        backend.validate().map_err(GatewayError::InvalidBackend)?;
        let digest = wire::request_digest(request, backend);

        if let Some(cassette) = &self.cassette {
            if let Some(hit) = cassette.get(&digest) {
                self.log(&digest, Instant::now(), json!("replay"), "chat", None);
                return Ok(ChatResponse { text: hit.text });
            }
            if self.mode == GatewayMode::Replay {
                return Err(GatewayError::CassetteMiss(digest));
            }
        }

        let response = self.chat_live(request, backend, &digest).await?;
        if let Some(cassette) = &self.cassette {
            let stored = cassette
                .insert(
                    &digest,
                    RecordedResponse {
                        text: response.text.clone(),
                    },
                )
                .map_err(|e| GatewayError::Cassette(e.to_string()))?;
            return Ok(ChatResponse { text: stored.text });
        }
        Ok(response)
    }

    async fn chat_live(
        &self,
        request: &ChatRequest,
        backend: &BackendConfig,
        digest: &str,
    ) -> Result<ChatResponse, GatewayError> {
        let bearer = match &backend.auth_env_var {
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::MissingCredential(var.clone()))?,
            ),
            None => None,
        };
        let body = wire::request_body(request, backend);
        let admission = self.admission(backend);

        let mut attempt = 0u32;
        loop {
            let outcome = {
                let _permit = admission.acquire().await;
                self.attempt_once(backend, &body, bearer.as_deref(), digest, attempt)
                    .await
            };
            match outcome {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fail(err) => return Err(err),
                Attempt::Retry(err) if attempt >= backend.max_retries => return Err(err),
                Attempt::Retry(err) => {
                    let delay = self.backoff(attempt);
                    tracing::debug!(%digest, attempt, ?delay, error = %err, "retrying backend request");
                    tokio::time::sleep(delay).await;
                    attempt += 1;
                }
            }
        }
    }

    async fn attempt_once(
        &self,
        backend: &BackendConfig,
        body: &Value,
        bearer: Option<&str>,
        digest: &str,
        attempt: u32,
    ) -> Attempt {
        let started = Instant::now();
        let sent = tokio::time::timeout(
            backend.timeout(),
            self.transport.post_json(&backend.endpoint_url, bearer, body),
        )
        .await;
        let reply = match sent {
            Err(_) => {
                self.log(digest, started, json!("timeout"), "chat", Some(attempt));
                return Attempt::Retry(GatewayError::Timeout);
            }
            Ok(Err(e)) => {
                self.log(digest, started, json!("transport_error"), "chat", Some(attempt));
                return match e {
                    TransportError::Unsupported(_) => Attempt::Fail(GatewayError::Transport(e.to_string())),
                    TransportError::Connect(_) => Attempt::Retry(GatewayError::Transport(e.to_string())),
                };
            }
            Ok(Ok(reply)) => reply,
        };

        let mut entry = TranscriptEntry {
            ts: self.clock.now(),
            digest: digest.to_string(),
            latency_ms: started.elapsed().as_secs_f64() * 1000.0,
            status: json!(reply.status),
            kind: Some("chat".into()),
            attempt: Some(attempt),
            prompt_tokens: None,
            completion_tokens: None,
        };
        let outcome = match reply.status {
            s if (200..300).contains(&s) => match wire::parse_response(&reply.body) {
                Ok((text, usage)) => {
                    entry.prompt_tokens = usage.prompt_tokens;
                    entry.completion_tokens = usage.completion_tokens;
                    Attempt::Done(ChatResponse { text })
                }
                Err(e) => Attempt::Fail(GatewayError::MalformedResponse(e)),
            },
            429 => Attempt::Retry(GatewayError::RateLimited {
                attempts: attempt + 1,
            }),
            s @ (408 | 500..=599) => Attempt::Retry(GatewayError::BackendError {
                status: s,
                body: reply.body_text(),
            }),
            s => Attempt::Fail(GatewayError::BackendError {
                status: s,
                body: reply.body_text(),
            }),
        };
        self.transcript.record(entry);
        outcome
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ceiling = self.retry.ceiling(attempt).as_secs_f64();
        let fraction: f64 = self.rng.lock().unwrap().random();
        Duration::from_secs_f64(ceiling * fraction)
    }

    /// Retrieves the image for a planned view.
    pub async fn fetch_image(
        &self,
        view: &ViewSpec,
        provider: &ImageryProvider,
    ) -> Result<ImageRef, GatewayError> {
        let image_id = view_image_id(view);
        match provider {
            ImageryProvider::Local { root } => {
                let path = local_image_path(root, view);
                let bytes = tokio::fs::read(&path).await.map_err(|e| {
                    GatewayError::ImageUnavailable(format!("{}: {e}", path.display()))
                })?;
                Ok(ImageRef::new(image_id, ImageSource::Local { path }, bytes))
            }
            ImageryProvider::StaticApi {
                endpoint_url,
                auth_env_var,
                timeout_s,
            } => {
                if self.mode == GatewayMode::Replay {
                    return Err(GatewayError::ImageUnavailable(format!(
                        "{image_id}: network access is disabled in replay mode"
                    )));
                }
                let query = static_api_query(view);
                let public_url = format!("{endpoint_url}?{query}");
                let url = match auth_env_var {
                    Some(var) => {
                        let key = std::env::var(var)
                            .map_err(|_| GatewayError::MissingCredential(var.clone()))?;
                        let key: String = url::form_urlencoded::byte_serialize(key.as_bytes()).collect();
                        format!("{public_url}&key={key}")
                    }
                    None => public_url.clone(),
                };
                let started = Instant::now();
                let digest = sha256_hex(public_url.as_bytes());
                let reply = tokio::time::timeout(
                    Duration::from_secs_f64(timeout_s.max(0.001)),
                    self.transport.get(&url),
                )
                .await;
                let reply = match reply {
                    Err(_) => {
                        self.log(&digest, started, json!("timeout"), "image", None);
                        return Err(GatewayError::Timeout);
                    }
                    Ok(Err(e)) => {
                        self.log(&digest, started, json!("transport_error"), "image", None);
                        return Err(GatewayError::Transport(e.to_string()));
                    }
                    Ok(Ok(reply)) => reply,
                };
                self.log(&digest, started, json!(reply.status), "image", None);
                match reply.status {
                    s if (200..300).contains(&s) => Ok(ImageRef::new(
                        image_id,
                        ImageSource::Remote { url: public_url },
                        reply.body,
                    )),
                    404 => Err(GatewayError::ImageUnavailable(image_id)),
                    status => Err(GatewayError::ProviderError { status }),
                }
            }
        }
    }
}
