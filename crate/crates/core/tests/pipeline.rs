use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use base64::Engine;
use serde_json::Value;
use streetlens_core::assess::{AssessmentRecord, QueryMode};
use streetlens_core::feedback::EXPLAIN_INSTRUCTION;
use streetlens_core::gateway::transport::body_texts;
use streetlens_core::gateway::wire::completion_body;
use streetlens_core::gateway::{GatewayMode, HttpReply, ScriptedTransport, Transport};
use streetlens_core::pipeline::{
    ModeConfig, ModuleId, ModuleStatus, PipelineError, RunConfig, RunService, RunState, ViewManifest,
    DEFAULT_INTERVAL_M,
};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

fn fixture_json() -> Value {
    serde_json::from_str(&std::fs::read_to_string(corpus().join("run.json")).unwrap()).unwrap()
}

fn fixture_config() -> RunConfig {
    serde_json::from_value(fixture_json()).unwrap()
}

/// Live-mode config answered by a scripted transport instead of the cassette.
fn live_config(run_id: &str) -> RunConfig {
    let mut config = fixture_config();
    config.run_id = run_id.into();
    config.mode = ModeConfig::default();
    for backend in [&mut config.backends.llm, &mut config.backends.vlm] {
        backend.requests_per_minute = 60_000;
    }
    config
}

fn store(transport: Option<Arc<dyn Transport>>) -> (tempfile::TempDir, RunService) {
    let dir = tempfile::tempdir().unwrap();
    let service = RunService::open_with(dir.path(), transport).unwrap();
    (dir, service)
}

fn option_lines(texts: &[String]) -> Vec<String> {
    texts
        .iter()
        .flat_map(|t| t.lines())
        .filter(|l| l.len() > 2 && l.as_bytes()[0].is_ascii_digit() && l[1..].starts_with(". "))
        .map(str::to_string)
        .collect()
}

/// Well-formed replies for every request kind; every image gets option 1.
fn reply_for(body: &Value) -> String {
    let texts = body_texts(body);
    let all = texts.join("\n");
    if all.contains("You are an expert in the following fields") {
        "You are a street auditor.".into()
    } else if all.contains("You are a classifier of annotation tasks") {
        if all.contains("graffiti") { "1" } else { "0" }.into()
    } else if all.contains("Rewrite the question") {
        let mut out = vec!["Question: Which option applies?".to_string()];
        out.extend(option_lines(&texts).iter().map(|l| format!("{l} applies.")));
        out.join("\n")
    } else if all.contains(EXPLAIN_INSTRUCTION) {
        "The surface is visible.".into()
    } else {
        "1".into()
    }
}

fn last_image(body: &Value) -> Option<Vec<u8>> {
    let messages = body["messages"].as_array()?;
    let content = messages.last()?["content"].as_array()?;
    let data = content.iter().rev().find_map(|p| p.get("data").and_then(Value::as_str))?;
    base64::engine::general_purpose::STANDARD.decode(data).ok()
}

fn first_image(body: &Value) -> Option<Vec<u8>> {
    let messages = body["messages"].as_array()?;
    let content = messages.last()?["content"].as_array()?;
    let data = content.iter().find_map(|p| p.get("data").and_then(Value::as_str))?;
    base64::engine::general_purpose::STANDARD.decode(data).ok()
}

async fn run_all(service: &RunService, run_id: &str, modules: &[ModuleId]) -> RunState {
    let mut state = None;
    for m in modules {
        state = Some(service.execute(run_id, *m).await.unwrap());
    }
    state.unwrap()
}

const FULL: [ModuleId; 5] = [ModuleId::M1, ModuleId::M2, ModuleId::M3, ModuleId::M4, ModuleId::Reliability];

#[test]
fn sampling_interval_defaults_to_five_meters() {
    let mut doc = fixture_json();
    doc.as_object_mut().unwrap().remove("sampling");
    let config: RunConfig = serde_json::from_value(doc).unwrap();
    assert_eq!(config.sampling.interval_m, 5.0);
    assert_eq!(DEFAULT_INTERVAL_M, 5.0);
}

#[test]
fn missing_codebook_is_invalid_config() {
    let (_tmp, service) = store(None);
    let mut config = fixture_config();
    config.codebook_path = "no_such_codebook.json".into();
    let err = service.create_run(config, Some(&corpus())).unwrap_err();
    assert!(matches!(err, PipelineError::InvalidConfig(ref m) if m.contains("codebook_path")), "{err}");
    assert!(service.list_runs().unwrap().is_empty());
}

#[test]
fn run_ids_are_unique() {
    let (_tmp, service) = store(None);
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    let err = service.create_run(fixture_config(), Some(&corpus())).unwrap_err();
    assert_eq!(err, PipelineError::DuplicateRun("demo".into()));
    let mut bad = fixture_config();
    bad.run_id = "../escape".into();
    assert!(matches!(service.create_run(bad, Some(&corpus())), Err(PipelineError::InvalidConfig(_))));
}

#[tokio::test]
async fn modules_wait_for_their_inputs() {
    let (_tmp, service) = store(Some(Arc::new(ScriptedTransport::unreachable())));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    let err = service.execute("demo", ModuleId::M3).await.unwrap_err();
    assert!(matches!(err, PipelineError::DependencyNotMet { module: ModuleId::M3, .. }));
    assert_eq!(service.state("demo").unwrap().status(ModuleId::M3), ModuleStatus::Pending);
    assert!(matches!(
        service.execute("nope", ModuleId::M1).await,
        Err(PipelineError::RunNotFound(_))
    ));
}

#[tokio::test]
async fn replay_pipeline_runs_offline() {
    let offline = Arc::new(ScriptedTransport::unreachable());
    let (_tmp, service) = store(Some(offline.clone()));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    let state = run_all(&service, "demo", &FULL).await;
    for m in FULL {
        assert_eq!(state.status(m), ModuleStatus::Done, "{m}");
    }
    assert_eq!(offline.calls(), 0);

    let records = service.assessments("demo", None).unwrap();
    assert_eq!(records.len(), 12);
    assert!(records.iter().all(|r| r.scored().is_some_and(|s| s.explanation.is_some())));
    assert_eq!(service.assessments("demo", Some("disorder_3")).unwrap().len(), 6);

    let dir = service.run_dir("demo");
    for artifact in [
        "sampling.geojson",
        "views.json",
        "prompts.json",
        "assessments.jsonl",
        "feedback.json",
        "reliability.json",
        "report.md",
        "report.json",
        "transcripts.jsonl",
    ] {
        assert!(dir.join(artifact).is_file(), "{artifact}");
    }
    let segments = service.segments("demo").unwrap();
    assert_eq!(segments.len(), 6);
    assert!(segments.iter().all(|s| !s.image_ids.is_empty() && s.failed_images.is_empty()));
    let image = service.image("demo", &segments[0].image_ids[0]).unwrap();
    assert_eq!(&image[..2], &[0xFF, 0xD8]);
    assert!(matches!(service.image("demo", "../config"), Err(PipelineError::NotFound(_))));
}

#[tokio::test]
async fn rerunning_upstream_marks_downstream_stale() {
    let (_tmp, service) = store(Some(Arc::new(ScriptedTransport::unreachable())));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    run_all(&service, "demo", &FULL).await;
    let state = service.execute("demo", ModuleId::M2).await.unwrap();
    assert_eq!(state.status(ModuleId::M1), ModuleStatus::Done);
    assert_eq!(state.status(ModuleId::M2), ModuleStatus::Done);
    for m in [ModuleId::M3, ModuleId::M4, ModuleId::Reliability] {
        assert_eq!(state.status(m), ModuleStatus::Stale, "{m}");
    }
    // Stale inputs do not satisfy dependencies.
    assert!(matches!(
        service.execute("demo", ModuleId::M4).await,
        Err(PipelineError::DependencyNotMet { .. })
    ));
}

#[tokio::test]
async fn prompt_edits_mark_downstream_stale() {
    let (_tmp, service) = store(Some(Arc::new(ScriptedTransport::unreachable())));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    assert!(matches!(
        service.update_prompts("demo", serde_json::from_str(r#"{"role_prompt":"You are x.","items":[]}"#).unwrap()),
        Err(PipelineError::DependencyNotMet { .. })
    ));
    run_all(&service, "demo", &[ModuleId::M1, ModuleId::M2, ModuleId::M3, ModuleId::M4]).await;

    let mut bundle = service.prompts("demo").unwrap();
    bundle.role_prompt = "You are a meticulous urban planner.".into();
    let state = service.update_prompts("demo", bundle.clone()).unwrap();
    assert_eq!(state.status(ModuleId::M3), ModuleStatus::Stale);
    assert_eq!(state.status(ModuleId::M4), ModuleStatus::Stale);
    assert_eq!(state.status(ModuleId::Reliability), ModuleStatus::Pending);
    assert_eq!(service.prompts("demo").unwrap(), bundle);

    bundle.items.pop();
    assert!(matches!(service.update_prompts("demo", bundle), Err(PipelineError::InvalidRequest(_))));
}

#[tokio::test]
async fn reliability_needs_human_annotations() {
    let transport = Arc::new(ScriptedTransport::replies(reply_for));
    let (_tmp, service) = store(Some(transport));
    let mut config = live_config("nohuman");
    config.human_annotations_path = None;
    service.create_run(config, Some(&corpus())).unwrap();
    run_all(&service, "nohuman", &[ModuleId::M1, ModuleId::M2, ModuleId::M3]).await;
    let err = service.execute("nohuman", ModuleId::Reliability).await.unwrap_err();
    assert!(matches!(err, PipelineError::DependencyNotMet { module: ModuleId::Reliability, .. }));
    // The report still renders without a reliability section.
    let (md, report) = service.report("nohuman", false).unwrap();
    assert!(report.items.iter().all(|i| i.icc.is_none()));
    assert!(md.contains("ICC(2,1): n/a"));
}

/// Bytes of a view in `segment` whose image appears nowhere else in the run.
fn image_of_segment(service: &RunService, run_id: &str, segment: &str) -> Vec<u8> {
    let dir = service.run_dir(run_id);
    let manifest: ViewManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("views.json")).unwrap()).unwrap();
    let count = |sha: &Option<String>| manifest.views.iter().filter(|v| &v.sha256 == sha).count();
    let view = manifest
        .views
        .iter()
        .find(|v| v.segment_id == segment && count(&v.sha256) == 1)
        .expect("segment has a unique image");
    std::fs::read(dir.join("images").join(format!("{}.jpg", view.image_id))).unwrap()
}

#[tokio::test]
async fn per_image_failure_drops_one_image() {
    let poisoned: Arc<Mutex<Option<Vec<u8>>>> = Arc::default();
    let target = poisoned.clone();
    let transport = Arc::new(ScriptedTransport::from_fn(move |body| {
        let hit = target.lock().unwrap().as_ref().is_some_and(|p| last_image(&body).as_ref() == Some(p));
        async move {
            if hit {
                Ok(HttpReply {
                    status: 400,
                    body: b"unreadable image".to_vec(),
                })
            } else {
                Ok(HttpReply::ok_json(&completion_body(&reply_for(&body))))
            }
        }
    }));
    let (_tmp, service) = store(Some(transport));
    let mut config = live_config("perimage");
    config.assessment.query_mode = QueryMode::PerImage;
    service.create_run(config, Some(&corpus())).unwrap();
    run_all(&service, "perimage", &[ModuleId::M1, ModuleId::M2]).await;
    *poisoned.lock().unwrap() = Some(image_of_segment(&service, "perimage", "283"));

    run_all(&service, "perimage", &[ModuleId::M3]).await;
    let segments = service.segments("perimage").unwrap();
    for record in service.assessments("perimage", None).unwrap() {
        let n_images = segments.iter().find(|s| s.segment_id == record.segment_id()).unwrap().image_ids.len();
        let scored = record.scored().expect("one bad image does not fail the pair");
        if record.segment_id() == "283" {
            assert_eq!(scored.n_images, n_images - 1, "{:?}", scored.skipped);
            assert_eq!(scored.skipped.len(), 1);
        } else {
            assert_eq!(scored.n_images, n_images);
            assert!(scored.skipped.is_empty());
        }
        assert_eq!(scored.score_ordinal, 1);
    }
}

#[tokio::test]
async fn feedback_timeout_leaves_explanation_absent() {
    let slow: Arc<Mutex<Option<Vec<u8>>>> = Arc::default();
    let target = slow.clone();
    let transport = Arc::new(ScriptedTransport::from_fn(move |body| {
        let texts = body_texts(&body).join("\n");
        let stall = texts.contains(EXPLAIN_INSTRUCTION)
            && texts.contains("graffiti")
            && target.lock().unwrap().as_ref().is_some_and(|p| first_image(&body).as_ref() == Some(p));
        async move {
            if stall {
                tokio::time::sleep(Duration::from_secs(30)).await;
            }
            Ok(HttpReply::ok_json(&completion_body(&reply_for(&body))))
        }
    }));
    let (_tmp, service) = store(Some(transport));
    let mut config = live_config("slow");
    config.backends.vlm.timeout_s = 0.2;
    config.backends.vlm.max_retries = 0;
    service.create_run(config, Some(&corpus())).unwrap();
    run_all(&service, "slow", &[ModuleId::M1, ModuleId::M2, ModuleId::M3]).await;
    *slow.lock().unwrap() = Some(image_of_segment(&service, "slow", "284"));

    let state = service.execute("slow", ModuleId::M4).await.unwrap();
    assert_eq!(state.status(ModuleId::M4), ModuleStatus::Done);
    let records = service.assessments("slow", None).unwrap();
    let missing: Vec<&AssessmentRecord> = records
        .iter()
        .filter(|r| r.scored().is_some_and(|s| s.explanation.is_none()))
        .collect();
    assert_eq!(missing.len(), 1);
    assert_eq!((missing[0].segment_id(), missing[0].item_id()), ("284", "disorder_3"));
    let (_, report) = service.report("slow", false).unwrap();
    assert_eq!(report.diagnostics.missing_explanations, 1);
}

#[tokio::test]
async fn cassette_miss_fails_the_module() {
    let offline = Arc::new(ScriptedTransport::unreachable());
    let (_tmp, service) = store(Some(offline.clone()));
    let mut config = fixture_config();
    config.assessment.exemplar_count = 1;
    service.create_run(config, Some(&corpus())).unwrap();
    run_all(&service, "demo", &[ModuleId::M1, ModuleId::M2]).await;
    let err = service.execute("demo", ModuleId::M3).await.unwrap_err();
    assert!(matches!(err, PipelineError::ModuleFailed { module: ModuleId::M3, ref detail } if detail.contains("cassette")), "{err}");
    let state = service.state("demo").unwrap();
    assert_eq!(state.status(ModuleId::M3), ModuleStatus::Failed);
    assert_eq!(offline.calls(), 0);
    assert_eq!(service.config("demo").unwrap().mode.kind, GatewayMode::Replay);
}

#[tokio::test]
async fn one_module_at_a_time_per_run() {
    let (_tmp, service) = store(Some(Arc::new(ScriptedTransport::unreachable())));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    let job = service.begin("demo", ModuleId::M1).unwrap();
    assert_eq!(job.state().status(ModuleId::M1), ModuleStatus::Running);
    assert_eq!(
        service.begin("demo", ModuleId::M1).err(),
        Some(PipelineError::RunBusy("demo".into()))
    );
    job.run().await.unwrap();
    assert!(service.begin("demo", ModuleId::M2).is_ok());
}

#[tokio::test]
async fn interrupted_module_is_reported_failed() {
    let (_tmp, service) = store(Some(Arc::new(ScriptedTransport::unreachable())));
    service.create_run(fixture_config(), Some(&corpus())).unwrap();
    let job = service.begin("demo", ModuleId::M1).unwrap();
    // A crash: state.json still says running and no process holds the lock.
    std::mem::forget(job);
    assert_eq!(service.state("demo").unwrap().status(ModuleId::M1), ModuleStatus::Running);

    let reopened = RunService::open_with(service.root(), Some(Arc::new(ScriptedTransport::unreachable()))).unwrap();
    let state = reopened.state("demo").unwrap();
    assert_eq!(state.status(ModuleId::M1), ModuleStatus::Failed);
    assert_eq!(state.modules[&ModuleId::M1].detail.as_deref(), Some("interrupted"));
    let state = reopened.execute("demo", ModuleId::M1).await.unwrap();
    assert_eq!(state.status(ModuleId::M1), ModuleStatus::Done);
}
