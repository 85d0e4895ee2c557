//! Session records, the job state machine and their on-disk form.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dragsplat_core::camera::{CameraPose, PointPick};

use crate::store::write_atomic;

pub const SESSION_FILE: &str = "session.json";
pub const EVENTS_FILE: &str = "events.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Lora,
    Drag,
    Refit,
}

impl JobKind {
    pub const ALL: [JobKind; 3] = [JobKind::Lora, JobKind::Drag, JobKind::Refit];

    pub fn name(self) -> &'static str {
        match self {
            JobKind::Lora => "lora",
            JobKind::Drag => "drag",
            JobKind::Refit => "refit",
        }
    }

    /// Stages whose results are built on this one.
    pub fn downstream(self) -> &'static [JobKind] {
        match self {
            JobKind::Lora => &[JobKind::Drag, JobKind::Refit],
            JobKind::Drag => &[JobKind::Refit],
            JobKind::Refit => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    /// Absent until the job is started.
    pub id: Option<String>,
    pub state: JobState,
    /// Fraction of the work done, in [0, 1].
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobError>,
    /// Output name to artifact name.
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl Default for Job {
    fn default() -> Self {
        Job { id: None, state: JobState::Pending, progress: 0.0, error: None, artifacts: BTreeMap::new(), summary: None }
    }
}

impl Job {
    pub fn is_active(&self) -> bool {
        self.id.is_some() && matches!(self.state, JobState::Pending | JobState::Running)
    }

    pub fn is_done(&self) -> bool {
        self.state == JobState::Done
    }

    /// Moves along pending → running → done | failed; any other move is
    /// refused.
    pub fn advance(&mut self, to: JobState) -> Result<(), String> {
        let ok = matches!(
            (self.state, to),
            (JobState::Pending, JobState::Running) | (JobState::Running, JobState::Done) | (JobState::Running, JobState::Failed)
        );
        if !ok {
            return Err(format!("job cannot go from {:?} to {:?}", self.state, to));
        }
        self.state = to;
        if to == JobState::Done {
            self.progress = 1.0;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    /// Artifact holding the uploaded PLY.
    pub cloud: Option<String>,
    pub count: usize,
    pub cameras: Option<Vec<CameraPose>>,
    pub picks: Option<PointPick>,
    pub mask: Vec<usize>,
    pub jobs: BTreeMap<JobKind, Job>,
    /// Sequence number of the last telemetry event.
    pub last_seq: u64,
}

impl Session {
    pub fn new(id: String) -> Self {
        Session {
            id,
            cloud: None,
            count: 0,
            cameras: None,
            picks: None,
            mask: Vec::new(),
            jobs: JobKind::ALL.iter().map(|k| (*k, Job::default())).collect(),
            last_seq: 0,
        }
    }

    pub fn job(&self, kind: JobKind) -> &Job {
        self.jobs.get(&kind).expect("every kind has a job slot")
    }

    pub fn job_mut(&mut self, kind: JobKind) -> &mut Job {
        self.jobs.entry(kind).or_default()
    }

    pub fn active_job(&self) -> Option<JobKind> {
        self.jobs.iter().find(|(_, j)| j.is_active()).map(|(k, _)| *k)
    }

    /// Clears the results of `kinds`, returning them to never-started.
    pub fn reset(&mut self, kinds: &[JobKind]) {
        for k in kinds {
            self.jobs.insert(*k, Job::default());
        }
    }

    pub fn save(&self, dir: &Path) -> io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(io::Error::other)?;
        write_atomic(&dir.join(SESSION_FILE), &bytes)
    }

    pub fn load(dir: &Path) -> io::Result<Self> {
        let bytes = std::fs::read(dir.join(SESSION_FILE))?;
        serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// A telemetry or state-change record streamed to subscribers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    /// `lora`, `drag` or `refit` for loop records, `state` for job moves.
    pub kind: String,
    pub job: Option<String>,
    pub data: serde_json::Value,
}
