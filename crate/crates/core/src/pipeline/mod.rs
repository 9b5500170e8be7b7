//! Run lifecycle: configuration, the per-run module state machine and the
//! on-disk run store. The CLI and the HTTP API both drive runs through
//! [`RunService`].
//!
//! Layout of one run:
//!
//! ```text
//! <store>/runs/<run_id>/
//!   config.json  state.json  sampling.geojson  views.json  images/
//!   prompts.json  assessments.jsonl  feedback.json  reliability.json
//!   report.md  report.json  transcripts.jsonl
//! ```

mod config;
mod state;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use futures::stream::{self, StreamExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::OwnedMutexGuard;

pub use config::{Backends, ModeConfig, ReliabilityConfig, RunConfig, SamplingConfig, DEFAULT_INTERVAL_M};
pub use state::{ModuleId, ModuleState, ModuleStatus, RunState};

use crate::assess::{
    assess_run, records_from_jsonl, records_to_jsonl, stride_select, AssessInputs, AssessmentRecord,
    ExemplarIndex, ExemplarShot, SegmentImages, SkippedImage,
};
use crate::chat::{sha256_hex, ImageRef, ImageSource};
use crate::corpus::{
    build_rating_matrix, load_human_annotations, parse_abstracts, parse_codebook, parse_codebook_csv,
    parse_exemplar_manifest, AnnotationTable, Codebook,
};
use crate::feedback::{attach_explanations, render_report, FeedbackDiagnostics, FeedbackInputs, ReportInputs, RunReport};
use crate::fsutil::write_atomic;
use crate::gateway::{view_image_id, Gateway, GatewayMode, Transcript, Transport};
use crate::geo::{load_roads, plan_views, sample_segment, samples_from_geojson, samples_to_geojson};
use crate::prompt::{tune_prompts, PromptBundle};
use crate::reliability::{analyze_item, ItemReliability, ReliabilityReport};

const IMAGE_FETCH_PARALLELISM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("run {0} already exists")]
    DuplicateRun(String),
    #[error("run {0} not found")]
    RunNotFound(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{module} cannot run yet: {detail}")]
    DependencyNotMet { module: ModuleId, detail: String },
    #[error("run {0} is busy with another module")]
    RunBusy(String),
    #[error("{module} failed: {detail}")]
    ModuleFailed { module: ModuleId, detail: String },
    #[error("storage error: {0}")]
    Io(String),
}

impl PipelineError {
    /// Stable machine-readable name.
    pub fn code(&self) -> &'static str {
        match self {
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::InvalidRequest(_) => "InvalidRequest",
            Self::DuplicateRun(_) => "DuplicateRun",
            Self::RunNotFound(_) => "RunNotFound",
            Self::NotFound(_) => "NotFound",
            Self::DependencyNotMet { .. } => "DependencyNotMet",
            Self::RunBusy(_) => "RunBusy",
            Self::ModuleFailed { .. } => "ModuleFailed",
            Self::Io(_) => "StorageError",
        }
    }
}

fn io_err(context: &Path, e: io::Error) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", context.display()))
}

/// One planned view and whether its image was retrieved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image_id: String,
    pub segment_id: String,
    pub point_index: usize,
    pub heading_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `views.json`: segments in road-file order and the views selected for
/// each.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ViewManifest {
    pub segments: Vec<String>,
    pub views: Vec<ViewRecord>,
}

/// One row of `GET /runs/{id}/segments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentView {
    pub segment_id: String,
    pub n_points: usize,
    pub image_ids: Vec<String>,
    pub failed_images: Vec<SkippedImage>,
    /// item id -> coder id -> rating.
    pub human: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDetail {
    pub config: RunConfig,
    pub state: RunState,
}

type Artifacts = BTreeMap<String, String>;

struct Inner {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    transport: Option<Arc<dyn Transport>>,
}

/// Handle to a run store; cheap to clone.
#[derive(Clone)]
pub struct RunService {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for RunService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunService").field("root", &self.inner.root).finish()
    }
}

/// A module execution that holds the run lock. Created by
/// [`RunService::begin`]; the state is already persisted as `running`.
pub struct ModuleJob {
    service: RunService,
    module: ModuleId,
    state: RunState,
    _guard: OwnedMutexGuard<()>,
}

impl RunService {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        Self::open_with(root, None)
    }

    /// Store whose gateways use `transport` instead of real HTTP.
    ///
    /// Modules left `running` by a previous process are marked failed.
    pub fn open_with(
        root: impl Into<PathBuf>,
        transport: Option<Arc<dyn Transport>>,
    ) -> Result<Self, PipelineError> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(|e| io_err(&runs, e))?;
        let service = Self {
            inner: Arc::new(Inner {
                root,
                locks: Mutex::default(),
                transport,
            }),
        };
        for state in service.list_runs()? {
            if state.modules.values().any(|m| m.status == ModuleStatus::Running) {
                let mut state = state;
                state.recover_interrupted();
                tracing::warn!(run = %state.run_id, "recovered interrupted module");
                write_json(&service.run_dir(&state.run_id).join("state.json"), &state)?;
            }
        }
        Ok(service)
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.inner.root.join("runs").join(run_id)
    }

    fn lock_for(&self, run_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.inner
            .locks
            .lock()
            .unwrap()
            .entry(run_id.to_string())
            .or_default()
            .clone()
    }

    fn try_lock(&self, run_id: &str) -> Result<OwnedMutexGuard<()>, PipelineError> {
        self.lock_for(run_id)
            .try_lock_owned()
            .map_err(|_| PipelineError::RunBusy(run_id.to_string()))
    }

    fn existing_dir(&self, run_id: &str) -> Result<PathBuf, PipelineError> {
        let dir = self.run_dir(run_id);
        let valid_id = !run_id.is_empty() && !run_id.contains(['/', '\\']) && !run_id.starts_with('.');
        if valid_id && dir.join("config.json").is_file() {
            Ok(dir)
        } else {
            Err(PipelineError::RunNotFound(run_id.to_string()))
        }
    }

    /// Validates and stores a new run. Relative paths in `config` are
    /// resolved against `base` (or the working directory).
    pub fn create_run(&self, mut config: RunConfig, base: Option<&Path>) -> Result<RunState, PipelineError> {
        let base = match base {
            Some(b) => b.to_path_buf(),
            None => std::env::current_dir().map_err(|e| PipelineError::Io(e.to_string()))?,
        };
        config.resolve_paths(&base);
        config.validate().map_err(PipelineError::InvalidConfig)?;
        let _guard = self.try_lock(&config.run_id)?;
        let dir = self.run_dir(&config.run_id);
        if dir.exists() {
            return Err(PipelineError::DuplicateRun(config.run_id));
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        write_json(&dir.join("config.json"), &config)?;
        let state = RunState::new(&config.run_id);
        write_json(&dir.join("state.json"), &state)?;
        tracing::info!(run = %config.run_id, "created run");
        Ok(state)
    }

    pub fn list_runs(&self) -> Result<Vec<RunState>, PipelineError> {
        let runs = self.inner.root.join("runs");
        let mut ids: Vec<String> = fs::read_dir(&runs)
            .map_err(|e| io_err(&runs, e))?
            .filter_map(Result::ok)
            .filter(|e| e.path().join("state.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        ids.iter().map(|id| self.state(id)).collect()
    }

    pub fn state(&self, run_id: &str) -> Result<RunState, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        read_json(&dir.join("state.json"))
    }

    pub fn config(&self, run_id: &str) -> Result<RunConfig, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        read_json(&dir.join("config.json"))
    }

    pub fn detail(&self, run_id: &str) -> Result<RunDetail, PipelineError> {
        Ok(RunDetail {
            config: self.config(run_id)?,
            state: self.state(run_id)?,
        })
    }

    /// Takes the run lock, checks dependencies and persists `running`.
    pub fn begin(&self, run_id: &str, module: ModuleId) -> Result<ModuleJob, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        let guard = self.try_lock(run_id)?;
        let mut state: RunState = read_json(&dir.join("state.json"))?;
        state.recover_interrupted();
        let unmet = state.unmet_dependencies(module);
        if !unmet.is_empty() {
            let names: Vec<&str> = unmet.iter().map(|m| m.as_str()).collect();
            return Err(PipelineError::DependencyNotMet {
                module,
                detail: format!("requires {} to be done", names.join(", ")),
            });
        }
        if module == ModuleId::Reliability {
            let config: RunConfig = read_json(&dir.join("config.json"))?;
            if config.human_annotations_path.is_none() {
                return Err(PipelineError::DependencyNotMet {
                    module,
                    detail: "no human annotations configured".into(),
                });
            }
        }
        state.set_running(module);
        write_json(&dir.join("state.json"), &state)?;
        Ok(ModuleJob {
            service: self.clone(),
            module,
            state,
            _guard: guard,
        })
    }

    pub async fn execute(&self, run_id: &str, module: ModuleId) -> Result<RunState, PipelineError> {
        self.begin(run_id, module)?.run().await
    }

    fn gateway(&self, dir: &Path, config: &RunConfig) -> Result<Gateway, String> {
        let mut builder = Gateway::builder(config.mode.kind)
            .transcript(Arc::new(Transcript::to_file(dir.join("transcripts.jsonl"))))
            .seed(config.seed);
        if let Some(p) = &config.mode.cassette_path {
            builder = builder.cassette(p);
        }
        if let Some(t) = &self.inner.transport {
            builder = builder.transport(t.clone());
        }
        builder.build().map_err(|e| e.to_string())
    }

    pub fn prompts(&self, run_id: &str) -> Result<PromptBundle, PipelineError> {
        read_json(&self.existing_dir(run_id)?.join("prompts.json"))
    }

    /// Replaces `prompts.json` with a researcher-edited bundle. Downstream
    /// modules become stale; nothing is rerun.
    pub fn update_prompts(&self, run_id: &str, bundle: PromptBundle) -> Result<RunState, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        let _guard = self.try_lock(run_id)?;
        let mut state: RunState = read_json(&dir.join("state.json"))?;
        if state.status(ModuleId::M2) == ModuleStatus::Pending {
            return Err(PipelineError::DependencyNotMet {
                module: ModuleId::M2,
                detail: "prompts do not exist yet; run m2 first".into(),
            });
        }
        let config: RunConfig = read_json(&dir.join("config.json"))?;
        let codebook = load_codebook(&config.codebook_path).map_err(PipelineError::InvalidConfig)?;
        bundle
            .validate(&codebook)
            .map_err(|e| PipelineError::InvalidRequest(e.to_string()))?;
        let mut artifacts = Artifacts::new();
        put_json(&dir, "prompts.json", &bundle, &mut artifacts)?;
        state.set_done(ModuleId::M2, artifacts);
        write_json(&dir.join("state.json"), &state)?;
        Ok(state)
    }

    pub fn assessments(&self, run_id: &str, item: Option<&str>) -> Result<Vec<AssessmentRecord>, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        let mut records = load_records(&dir)?;
        if let Some(item) = item {
            records.retain(|r| r.item_id() == item);
        }
        Ok(records)
    }

    pub fn reliability(&self, run_id: &str) -> Result<ReliabilityReport, PipelineError> {
        read_json(&self.existing_dir(run_id)?.join("reliability.json"))
    }

    pub fn segments(&self, run_id: &str) -> Result<Vec<SegmentView>, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        let config: RunConfig = read_json(&dir.join("config.json"))?;
        let manifest: ViewManifest = read_json(&dir.join("views.json"))?;
        let sampling = read_text(&dir.join("sampling.geojson"))?;
        let samples = samples_from_geojson(&sampling).map_err(|e| PipelineError::Io(e.to_string()))?;
        let humans = match &config.human_annotations_path {
            Some(p) => load_annotations(p).map_err(PipelineError::InvalidConfig)?,
            None => AnnotationTable::default(),
        };
        Ok(manifest
            .segments
            .iter()
            .map(|seg| {
                let views = manifest.views.iter().filter(|v| &v.segment_id == seg);
                let mut human: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
                for row in humans.rows.iter().filter(|r| &r.segment_id == seg) {
                    human
                        .entry(row.item_id.clone())
                        .or_default()
                        .insert(row.coder_id.clone(), row.rating);
                }
                SegmentView {
                    segment_id: seg.clone(),
                    n_points: samples.iter().filter(|s| &s.segment_id == seg).count(),
                    image_ids: views
                        .clone()
                        .filter(|v| v.error.is_none())
                        .map(|v| v.image_id.clone())
                        .collect(),
                    failed_images: views
                        .filter_map(|v| {
                            v.error.as_ref().map(|e| SkippedImage {
                                image_id: v.image_id.clone(),
                                reason: e.clone(),
                            })
                        })
                        .collect(),
                    human,
                }
            })
            .collect())
    }

    /// Stored bytes of a fetched street image.
    pub fn image(&self, run_id: &str, image_id: &str) -> Result<Vec<u8>, PipelineError> {
        let dir = self.existing_dir(run_id)?;
        let safe = !image_id.is_empty()
            && image_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            && !image_id.starts_with('.');
        let path = dir.join("images").join(format!("{image_id}.jpg"));
        if !safe || !path.is_file() {
            return Err(PipelineError::NotFound(format!("image {image_id}")));
        }
        fs::read(&path).map_err(|e| io_err(&path, e))
    }

    /// Builds the report from the run's current artifacts. With `write`, also
    /// stores `report.md` and `report.json`.
    pub fn report(&self, run_id: &str, write: bool) -> Result<(String, RunReport), PipelineError> {
        let dir = self.existing_dir(run_id)?;
        build_report(&dir, write)
    }
}

impl ModuleJob {
    pub fn module(&self) -> ModuleId {
        self.module
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    /// Runs the module to completion and persists the outcome.
    pub async fn run(mut self) -> Result<RunState, PipelineError> {
        let run_id = self.state.run_id.clone();
        let dir = self.service.run_dir(&run_id);
        let module = self.module;
        tracing::info!(run = %run_id, %module, "module started");
        let outcome = self.run_inner(&dir).await;
        match outcome {
            Ok(artifacts) => {
                self.state.set_done(module, artifacts);
                write_json(&dir.join("state.json"), &self.state)?;
                if matches!(module, ModuleId::M3 | ModuleId::M4 | ModuleId::Reliability) {
                    if let Err(e) = build_report(&dir, true) {
                        tracing::warn!(run = %run_id, error = %e, "report not rendered");
                    }
                }
                tracing::info!(run = %run_id, %module, "module done");
                Ok(self.state)
            }
            Err(detail) => {
                tracing::warn!(run = %run_id, %module, %detail, "module failed");
                self.state.set_failed(module, detail.clone());
                write_json(&dir.join("state.json"), &self.state)?;
                Err(PipelineError::ModuleFailed { module, detail })
            }
        }
    }

    async fn run_inner(&self, dir: &Path) -> Result<Artifacts, String> {
        let config: RunConfig = read_json(&dir.join("config.json")).map_err(|e| e.to_string())?;
        let gateway = self.service.gateway(dir, &config)?;
        match self.module {
            ModuleId::M1 => run_sampling(dir, &config, &gateway).await,
            ModuleId::M2 => run_tuning(dir, &config, &gateway).await,
            ModuleId::M3 => run_assessment(dir, &config, &gateway).await,
            ModuleId::M4 => run_feedback(dir, &config, &gateway).await,
            ModuleId::Reliability => run_reliability(dir, &config),
        }
    }
}

async fn run_sampling(dir: &Path, config: &RunConfig, gateway: &Gateway) -> Result<Artifacts, String> {
    let roads = load_roads(&read_text(&config.roads_path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let s = &config.sampling;
    let mut samples = Vec::new();
    let mut selected = Vec::new();
    for segment in &roads.segments {
        let points = sample_segment(segment, s.interval_m).map_err(|e| e.to_string())?;
        let views: Vec<_> = points
            .iter()
            .flat_map(|p| plan_views(p, s.view_mode, &s.camera))
            .collect();
        selected.extend(stride_select(&views, config.assessment.image_cap));
        samples.extend(points);
    }
    let mut artifacts = Artifacts::new();
    put_json(dir, "sampling.geojson", &samples_to_geojson(&samples), &mut artifacts).map_err(|e| e.to_string())?;

    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| e.to_string())?;
    let reuse_cached = gateway.mode() == GatewayMode::Replay;
    let images_dir = &images_dir;
    let fetched: Vec<Result<ViewRecord, String>> = stream::iter(selected)
        .map(|view| {
            async move {
                let image_id = view_image_id(&view);
                let path = images_dir.join(format!("{image_id}.jpg"));
                let record = |sha256, error| ViewRecord {
                    image_id: image_id.clone(),
                    segment_id: view.sample.segment_id.clone(),
                    point_index: view.sample.index,
                    heading_deg: view.heading_deg,
                    sha256,
                    error,
                };
                if reuse_cached {
                    if let Ok(bytes) = fs::read(&path) {
                        return Ok(record(Some(sha256_hex(&bytes)), None));
                    }
                }
                match gateway.fetch_image(&view, &config.imagery_provider).await {
                    Ok(img) => {
                        write_atomic(&path, &img.bytes).map_err(|e| e.to_string())?;
                        Ok(record(Some(img.content_digest.clone()), None))
                    }
                    Err(e) if e.is_configuration() => Err(e.to_string()),
                    Err(e) => Ok(record(None, Some(e.to_string()))),
                }
            }
        })
        .buffered(IMAGE_FETCH_PARALLELISM)
        .collect()
        .await;
    let manifest = ViewManifest {
        segments: roads.segments.iter().map(|s| s.id.clone()).collect(),
        views: fetched.into_iter().collect::<Result<_, _>>()?,
    };
    let failed = manifest.views.iter().filter(|v| v.error.is_some()).count();
    if failed > 0 {
        tracing::warn!(failed, "some street images could not be fetched");
    }
    put_json(dir, "views.json", &manifest, &mut artifacts).map_err(|e| e.to_string())?;
    Ok(artifacts)
}

async fn run_tuning(dir: &Path, config: &RunConfig, gateway: &Gateway) -> Result<Artifacts, String> {
    let abstracts = parse_abstracts(&read_text(&config.abstracts_path).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let codebook = load_codebook(&config.codebook_path)?;
    let bundle = tune_prompts(&abstracts, &codebook, gateway, &config.backends.llm)
        .await
        .map_err(|e| e.to_string())?;
    let mut artifacts = Artifacts::new();
    put_json(dir, "prompts.json", &bundle, &mut artifacts).map_err(|e| e.to_string())?;
    Ok(artifacts)
}

fn load_exemplars(config: &RunConfig, codebook: &Codebook) -> Result<ExemplarIndex, String> {
    let base = config.exemplars_path.parent().unwrap_or(Path::new("."));
    let doc = read_text(&config.exemplars_path).map_err(|e| e.to_string())?;
    let exemplars = parse_exemplar_manifest(&doc, codebook, base).map_err(|e| e.to_string())?;
    let mut index = ExemplarIndex::new();
    for ex in exemplars {
        let shots = index.entry(ex.item_id.clone()).or_default();
        if shots.len() >= config.assessment.exemplar_count {
            continue;
        }
        let images = ex
            .image_paths
            .iter()
            .map(|p| {
                let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(ImageRef::new(id, ImageSource::Local { path: p.clone() }, bytes))
            })
            .collect::<Result<Vec<_>, String>>()?;
        shots.push(ExemplarShot { exemplar: ex, images });
    }
    Ok(index)
}

/// Street images by segment, as recorded by the sampling module.
fn load_segment_images(dir: &Path) -> Result<Vec<SegmentImages>, String> {
    let manifest: ViewManifest = read_json(&dir.join("views.json")).map_err(|e| e.to_string())?;
    manifest
        .segments
        .iter()
        .map(|seg| {
            let mut images = Vec::new();
            let mut fetch_failures = Vec::new();
            for v in manifest.views.iter().filter(|v| &v.segment_id == seg) {
                match &v.error {
                    Some(reason) => fetch_failures.push(SkippedImage {
                        image_id: v.image_id.clone(),
                        reason: reason.clone(),
                    }),
                    None => {
                        let path = dir.join("images").join(format!("{}.jpg", v.image_id));
                        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                        images.push(ImageRef::new(v.image_id.clone(), ImageSource::Local { path }, bytes));
                    }
                }
            }
            Ok(SegmentImages {
                segment_id: seg.clone(),
                images,
                fetch_failures,
            })
        })
        .collect()
}

fn load_bundle(dir: &Path, codebook: &Codebook) -> Result<PromptBundle, String> {
    let bundle: PromptBundle = read_json(&dir.join("prompts.json")).map_err(|e| e.to_string())?;
    bundle.validate(codebook).map_err(|e| e.to_string())?;
    Ok(bundle)
}

async fn run_assessment(dir: &Path, config: &RunConfig, gateway: &Gateway) -> Result<Artifacts, String> {
    let codebook = load_codebook(&config.codebook_path)?;
    let bundle = load_bundle(dir, &codebook)?;
    let exemplars = load_exemplars(config, &codebook)?;
    let segments = load_segment_images(dir)?;
    let inputs = AssessInputs {
        segments: &segments,
        codebook: &codebook,
        bundle: &bundle,
        exemplars: &exemplars,
        gateway,
        backend: &config.backends.vlm,
        config: config.assessment,
    };
    let run = assess_run(&inputs, |r| {
        tracing::debug!(segment = r.segment_id(), item = r.item_id(), "assessed");
    })
    .await
    .map_err(|e| e.to_string())?;
    if run.skips.skipped_images > 0 || run.skips.failed_pairs > 0 {
        tracing::warn!(
            skipped_images = run.skips.skipped_images,
            failed_pairs = run.skips.failed_pairs,
            "assessment completed with skips"
        );
    }
    let mut artifacts = Artifacts::new();
    put_bytes(dir, "assessments.jsonl", records_to_jsonl(&run.records).as_bytes(), &mut artifacts)
        .map_err(|e| e.to_string())?;
    // Explanations from an earlier feedback pass no longer apply.
    let _ = fs::remove_file(dir.join("feedback.json"));
    Ok(artifacts)
}

async fn run_feedback(dir: &Path, config: &RunConfig, gateway: &Gateway) -> Result<Artifacts, String> {
    let codebook = load_codebook(&config.codebook_path)?;
    let bundle = load_bundle(dir, &codebook)?;
    let mut records = load_records(dir).map_err(|e| e.to_string())?;
    let images: HashMap<String, ImageRef> = load_segment_images(dir)?
        .into_iter()
        .flat_map(|s| s.images)
        .map(|img| (img.image_id.clone(), img))
        .collect();
    let inputs = FeedbackInputs {
        codebook: &codebook,
        bundle: &bundle,
        images: &images,
        gateway,
        backend: &config.backends.vlm,
    };
    let diag = attach_explanations(&mut records, &inputs)
        .await
        .map_err(|e| e.to_string())?;
    let mut artifacts = Artifacts::new();
    put_bytes(dir, "assessments.jsonl", records_to_jsonl(&records).as_bytes(), &mut artifacts)
        .map_err(|e| e.to_string())?;
    put_json(dir, "feedback.json", &diag, &mut artifacts).map_err(|e| e.to_string())?;
    Ok(artifacts)
}

fn run_reliability(dir: &Path, config: &RunConfig) -> Result<Artifacts, String> {
    let path = config
        .human_annotations_path
        .as_ref()
        .ok_or("no human annotations configured")?;
    let table = load_annotations(path)?;
    let codebook = load_codebook(&config.codebook_path)?;
    let records = load_records(dir).map_err(|e| e.to_string())?;
    let scored: Vec<_> = records.iter().filter_map(|r| r.scored().cloned()).collect();
    let rc = &config.reliability;
    let items = codebook
        .items
        .iter()
        .map(|item| match build_rating_matrix(&table, &scored, &item.item_id) {
            Ok(build) => analyze_item(&build, rc.variant, rc.outlier_threshold),
            Err(e) => ItemReliability {
                item_id: item.item_id.clone(),
                variant: rc.variant,
                icc: None,
                icc_average: None,
                anova: None,
                exact_agreement: 0.0,
                leave_one_out: Default::default(),
                outliers: Vec::new(),
                raters: Vec::new(),
                n_subjects: 0,
                dropped_subjects: 0,
                note: Some(e.to_string()),
            },
        })
        .collect();
    let report = ReliabilityReport {
        variant: rc.variant,
        outlier_threshold: rc.outlier_threshold,
        items,
    };
    let mut artifacts = Artifacts::new();
    put_json(dir, "reliability.json", &report, &mut artifacts).map_err(|e| e.to_string())?;
    Ok(artifacts)
}

fn build_report(dir: &Path, write: bool) -> Result<(String, RunReport), PipelineError> {
    let config: RunConfig = read_json(&dir.join("config.json"))?;
    let state: RunState = read_json(&dir.join("state.json"))?;
    if state.status(ModuleId::M3) == ModuleStatus::Pending {
        return Err(PipelineError::DependencyNotMet {
            module: ModuleId::M3,
            detail: "the report needs assessments".into(),
        });
    }
    let codebook = load_codebook(&config.codebook_path).map_err(PipelineError::InvalidConfig)?;
    let records = load_records(dir)?;
    let reliability: Option<ReliabilityReport> = if state.status(ModuleId::Reliability) == ModuleStatus::Done {
        Some(read_json(&dir.join("reliability.json"))?)
    } else {
        None
    };
    let feedback: Option<FeedbackDiagnostics> = if state.status(ModuleId::M4) == ModuleStatus::Done {
        Some(read_json(&dir.join("feedback.json"))?)
    } else {
        None
    };
    let inputs = ReportInputs {
        run_id: &state.run_id,
        codebook: &codebook,
        records: &records,
        reliability: reliability.as_ref(),
        feedback: feedback.as_ref(),
        generated_at: Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
    };
    let (md, report) = render_report(&inputs).map_err(|e| PipelineError::InvalidRequest(e.to_string()))?;
    if write {
        write_atomic(dir.join("report.md"), md.as_bytes()).map_err(|e| io_err(dir, e))?;
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok((md, report))
}

/// Codebook from JSON, or from CSV when the file ends in `.csv`.
pub fn load_codebook(path: &Path) -> Result<Codebook, String> {
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
        parse_codebook_csv(file)
    } else {
        parse_codebook(&read_text(path).map_err(|e| e.to_string())?)
    };
    parsed.map_err(|e| format!("{}: {e}", path.display()))
}

fn load_annotations(path: &Path) -> Result<AnnotationTable, String> {
    let file = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_human_annotations(file).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_records(dir: &Path) -> Result<Vec<AssessmentRecord>, PipelineError> {
    let path = dir.join("assessments.jsonl");
    records_from_jsonl(&read_text(&path)?).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => PipelineError::NotFound(
            path.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        ),
        _ => io_err(path, e),
    })
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    serde_json::from_str(&read_text(path)?).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))
}

fn to_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
    bytes.push(b'\n');
    bytes
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    write_atomic(path, &to_pretty(value)).map_err(|e| io_err(path, e))
}

fn put_bytes(dir: &Path, name: &str, bytes: &[u8], artifacts: &mut Artifacts) -> Result<(), PipelineError> {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(|e| io_err(&path, e))?;
    artifacts.insert(name.to_string(), sha256_hex(bytes));
    Ok(())
}

fn put_json<T: Serialize>(dir: &Path, name: &str, value: &T, artifacts: &mut Artifacts) -> Result<(), PipelineError> {
    put_bytes(dir, name, &to_pretty(value), artifacts)
}
