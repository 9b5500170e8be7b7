use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assess::AssessmentConfig;
use crate::geo::{CameraDefaults, ViewMode};
use crate::gateway::{BackendConfig, GatewayMode, ImageryProvider};
use crate::reliability::{IccVariant, DEFAULT_OUTLIER_THRESHOLD};

pub const DEFAULT_INTERVAL_M: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub interval_m: f64,
    pub view_mode: ViewMode,
    pub camera: CameraDefaults,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            interval_m: DEFAULT_INTERVAL_M,
            view_mode: ViewMode::default(),
            camera: CameraDefaults::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backends {
    pub llm: BackendConfig,
    pub vlm: BackendConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeConfig {
    #[serde(default)]
    pub kind: GatewayMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cassette_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReliabilityConfig {
    pub variant: IccVariant,
    pub outlier_threshold: f64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            variant: IccVariant::Single,
            outlier_threshold: DEFAULT_OUTLIER_THRESHOLD,
        }
    }
}

/// Everything a run needs. Stored verbatim as `config.json`, with relative
/// paths already resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub roads_path: PathBuf,
    pub codebook_path: PathBuf,
    pub exemplars_path: PathBuf,
    pub abstracts_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_annotations_path: Option<PathBuf>,
    #[serde(default)]
    pub sampling: SamplingConfig,
    pub imagery_provider: ImageryProvider,
    pub backends: Backends,
    #[serde(default)]
    pub assessment: AssessmentConfig,
    #[serde(default)]
    pub reliability: ReliabilityConfig,
    #[serde(default)]
    pub mode: ModeConfig,
    #[serde(default)]
    pub seed: u64,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Joins every relative path onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.roads_path);
        resolve(base, &mut self.codebook_path);
        resolve(base, &mut self.exemplars_path);
        resolve(base, &mut self.abstracts_path);
        if let Some(p) = &mut self.human_annotations_path {
            resolve(base, p);
        }
        if let Some(p) = &mut self.mode.cassette_path {
            resolve(base, p);
        }
        if let ImageryProvider::Local { root } = &mut self.imagery_provider {
            resolve(base, root);
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.run_id.starts_with('.')
        {
            return Err(format!(
                "run_id {:?} must be non-empty and use only [A-Za-z0-9._-]",
                self.run_id
            ));
        }
        let s = &self.sampling;
        if !(s.interval_m.is_finite() && s.interval_m > 0.0) {
            return Err(format!("sampling.interval_m must be positive, got {}", s.interval_m));
        }
        s.camera.validate().map_err(|e| e.to_string())?;
        for (name, path) in [
            ("roads_path", &self.roads_path),
            ("codebook_path", &self.codebook_path),
            ("exemplars_path", &self.exemplars_path),
            ("abstracts_path", &self.abstracts_path),
        ] {
            if !path.is_file() {
                return Err(format!("{name} {} does not exist", path.display()));
            }
        }
        if let Some(p) = &self.human_annotations_path {
            if !p.is_file() {
                return Err(format!("human_annotations_path {} does not exist", p.display()));
            }
        }
        if let ImageryProvider::Local { root } = &self.imagery_provider {
            if !root.is_dir() {
                return Err(format!("imagery root {} does not exist", root.display()));
            }
        }
        self.backends.llm.validate().map_err(|e| format!("backends.llm: {e}"))?;
        self.backends.vlm.validate().map_err(|e| format!("backends.vlm: {e}"))?;
        match (self.mode.kind, &self.mode.cassette_path) {
            (GatewayMode::Live, _) => {}
            (GatewayMode::Record, None) | (GatewayMode::Replay, None) => {
                return Err("record and replay modes need mode.cassette_path".into());
            }
            (GatewayMode::Replay, Some(p)) if !p.is_file() => {
                return Err(format!("cassette {} does not exist", p.display()));
            }
            _ => {}
        }
        if self.assessment.image_cap == 0 {
            return Err("assessment.image_cap must be at least 1".into());
        }
        if !self.reliability.outlier_threshold.is_finite() {
            return Err("reliability.outlier_threshold must be finite".into());
        }
        Ok(())
    }
}
