use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleId {
    M1,
    M2,
    M3,
    M4,
    Reliability,
}

impl ModuleId {
    pub const ALL: [ModuleId; 5] = [Self::M1, Self::M2, Self::M3, Self::M4, Self::Reliability];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::M1 => "m1",
            Self::M2 => "m2",
            Self::M3 => "m3",
            Self::M4 => "m4",
            Self::Reliability => "reliability",
        }
    }

    /// Modules that must be done before this one may run.
    pub fn dependencies(self) -> &'static [ModuleId] {
        match self {
            Self::M1 => &[],
            Self::M2 => &[Self::M1],
            Self::M3 => &[Self::M2],
            Self::M4 => &[Self::M3],
            Self::Reliability => &[Self::M3],
        }
    }

    /// Every module that transitively consumes this module's output.
    pub fn downstream(self) -> &'static [ModuleId] {
        match self {
            Self::M1 => &[Self::M2, Self::M3, Self::M4, Self::Reliability],
            Self::M2 => &[Self::M3, Self::M4, Self::Reliability],
            Self::M3 => &[Self::M4, Self::Reliability],
            Self::M4 | Self::Reliability => &[],
        }
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModuleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown module {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleStatus {
    #[default]
    Pending,
    Running,
    Done,
    Stale,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ModuleState {
    pub status: ModuleStatus,
    /// Failure detail for `failed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Artifact file name to sha256 of its contents, as of the last success.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    pub modules: BTreeMap<ModuleId, ModuleState>,
}

impl RunState {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            modules: ModuleId::ALL
                .into_iter()
                .map(|m| (m, ModuleState::default()))
                .collect(),
        }
    }

    pub fn status(&self, m: ModuleId) -> ModuleStatus {
        self.modules.get(&m).map(|s| s.status).unwrap_or_default()
    }

    pub fn module_mut(&mut self, m: ModuleId) -> &mut ModuleState {
        self.modules.entry(m).or_default()
    }

    /// Dependencies of `m` that are not done.
    pub fn unmet_dependencies(&self, m: ModuleId) -> Vec<ModuleId> {
        m.dependencies()
            .iter()
            .copied()
            .filter(|d| self.status(*d) != ModuleStatus::Done)
            .collect()
    }

    pub fn set_running(&mut self, m: ModuleId) {
        let s = self.module_mut(m);
        s.status = ModuleStatus::Running;
        s.detail = None;
    }

    pub fn set_failed(&mut self, m: ModuleId, detail: impl Into<String>) {
        let s = self.module_mut(m);
        s.status = ModuleStatus::Failed;
        s.detail = Some(detail.into());
    }

    /// Marks `m` done and every downstream module that has run before as
    /// stale.
    pub fn set_done(&mut self, m: ModuleId, artifacts: BTreeMap<String, String>) {
        *self.module_mut(m) = ModuleState {
            status: ModuleStatus::Done,
            detail: None,
            artifacts,
        };
        self.mark_downstream_stale(m);
    }

    pub fn mark_downstream_stale(&mut self, m: ModuleId) {
        for d in m.downstream() {
            let s = self.module_mut(*d);
            if s.status != ModuleStatus::Pending {
                s.status = ModuleStatus::Stale;
            }
        }
    }

    /// A `running` status found without a live execution is left over from
    /// an interrupted process.
    pub fn recover_interrupted(&mut self) {
        for s in self.modules.values_mut() {
            if s.status == ModuleStatus::Running {
                s.status = ModuleStatus::Failed;
                s.detail = Some("interrupted".into());
            }
        }
    }
}
