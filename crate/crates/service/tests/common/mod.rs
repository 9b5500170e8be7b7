//! Shared helpers for the service integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use streetlens_core::gateway::ScriptedTransport;
use streetlens_core::pipeline::RunService;
use streetlens_service::http::AppState;

pub fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

pub fn fixture_config_json() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(corpus().join("run.json")).unwrap()).unwrap()
}

/// A store under `root` whose gateways can never reach the network.
pub fn offline_service(root: &std::path::Path) -> (RunService, Arc<ScriptedTransport>) {
    let transport = Arc::new(ScriptedTransport::unreachable());
    let service = RunService::open_with(root, Some(transport.clone())).unwrap();
    (service, transport)
}

pub fn app_state(service: RunService) -> AppState {
    AppState {
        service,
        base_dir: corpus(),
    }
}
