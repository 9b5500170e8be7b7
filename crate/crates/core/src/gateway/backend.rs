use std::time::Duration;

use serde::{Deserialize, Serialize};

/// One chat-completions endpoint and its admission limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_id: String,
    /// Name of the environment variable holding a bearer token, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_rpm")]
    pub requests_per_minute: u32,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

fn default_concurrency() -> usize {
    4
}
fn default_rpm() -> u32 {
    60
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}

impl BackendConfig {
    pub fn new(endpoint_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            model_id: model_id.into(),
            auth_env_var: None,
            max_concurrency: default_concurrency(),
            requests_per_minute: default_rpm(),
            timeout_s: default_timeout(),
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        url::Url::parse(&self.endpoint_url)
            .map_err(|e| format!("endpoint_url {:?}: {e}", self.endpoint_url))?;
        if self.model_id.is_empty() {
            return Err("model_id is empty".into());
        }
        if self.max_concurrency == 0 {
            return Err("max_concurrency must be at least 1".into());
        }
        if self.requests_per_minute == 0 {
            return Err("requests_per_minute must be at least 1".into());
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(format!("timeout_s {} must be positive", self.timeout_s));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    /// Key under which admission limits are shared.
    pub(crate) fn limiter_key(&self) -> String {
        format!("{}#{}", self.endpoint_url, self.model_id)
    }
}

/// Exponential backoff with full jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            factor: 2.0,
            cap: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the jitter window before retry number `attempt` (0-based).
    pub fn ceiling(&self, attempt: u32) -> Duration {
        let raw = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        Duration::from_secs_f64(raw.min(self.cap.as_secs_f64()))
    }
}
