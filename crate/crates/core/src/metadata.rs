//! Durable job-record store.
//!
//! The orchestrator's source of truth. Records live in memory behind a lock
//! and every committed write is appended to a line-delimited snapshot log, so
//! a restarted process replays to exactly the pre-crash state. Transitions
//! are compare-and-set: of two racing writers, exactly one wins.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::Mutex;
use thiserror::Error;

use crate::clock::SimTime;
use crate::fleet::NodeId;
use crate::storage::{BlobRef, ContainerRef};

#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct JobId(u64);

impl JobId {
    pub fn from_u64(v: u64) -> Self {
        JobId(v)
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j-{}", self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    AwaitingData,
    DataReady,
    Queued,
    Provisioning,
    Mounting,
    Processing,
    Training,
    Unmounting,
    Completed,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Completed | JobState::Failed)
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::AwaitingData => "awaiting_data",
            JobState::DataReady => "data_ready",
            JobState::Queued => "queued",
            JobState::Provisioning => "provisioning",
            JobState::Mounting => "mounting",
            JobState::Processing => "processing",
            JobState::Training => "training",
            JobState::Unmounting => "unmounting",
            JobState::Completed => "completed",
            JobState::Failed => "failed",
        };
        f.write_str(s)
    }
}

/// The job lifecycle graph. The happy path runs straight through to
/// `Completed`; interrupted phases requeue; anything non-terminal may fail.
/// `Provisioning`/`Mounting` -> `Queued` recovers jobs orphaned by a process
/// restart before any phase ran.
pub fn legal_job_transition(from: JobState, to: JobState) -> bool {
    use JobState::*;
    match (from, to) {
        (AwaitingData, DataReady) => true,
        (DataReady, Queued) => true,
        (Queued, Provisioning) => true,
        (Provisioning, Mounting) => true,
        (Mounting, Processing) => true,
        (Processing, Training) => true,
        (Training, Unmounting) => true,
        (Unmounting, Completed) => true,
        (Processing, Queued) | (Training, Queued) => true,
        (Provisioning, Queued) | (Mounting, Queued) => true,
        (from, Failed) => !from.is_terminal(),
        _ => false,
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    ImageSet,
    Video,
}

/// Client-provided description of the raw input data.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub name: String,
    pub kind: DataKind,
    #[serde(default)]
    pub has_positional_data: bool,
    #[serde(default)]
    pub approx_size_bytes: u64,
    /// Optional URL to POST a completion notification to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub webhook_url: Option<String>,
}

impl DataManifest {
    pub fn validate(&self) -> Result<(), MetadataError> {
        if self.name.trim().is_empty() {
            return Err(MetadataError::InvalidRecord(
                "manifest name must not be empty".into(),
            ));
        }
        Ok(())
    }
}

/// One committed state change, with the instant it happened.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct TransitionStamp {
    pub from: JobState,
    pub to: JobState,
    pub t: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Per-phase workload stub parameters carried by scenario-submitted jobs.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub duration_s: f64,
    pub profile: crate::fleet::TraceProfile,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct JobWorkloads {
    pub processing: WorkloadSpec,
    pub training: WorkloadSpec,
}

/// Everything the system knows about one request.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub state: JobState,
    pub manifest: DataManifest,
    pub input_container: ContainerRef,
    pub output_container: Option<ContainerRef>,
    pub assigned_node: Option<NodeId>,
    pub attempts: u32,
    pub created_at: SimTime,
    pub transitions: Vec<TransitionStamp>,
    pub result: Option<BlobRef>,
    pub failure_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upload_token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_expires_at: Option<SimTime>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workloads: Option<JobWorkloads>,
}

impl JobRecord {
    pub fn validate(&self) -> Result<(), MetadataError> {
        self.manifest.validate()?;
        if self.state == JobState::Completed && self.result.is_none() {
            return Err(MetadataError::InvalidRecord(format!(
                "{} is completed without a result",
                self.id
            )));
        }
        if self.state == JobState::Failed && self.failure_reason.is_none() {
            return Err(MetadataError::InvalidRecord(format!(
                "{} is failed without a reason",
                self.id
            )));
        }
        Ok(())
    }

    /// When the job most recently entered `state`; the creation instant
    /// stands in for the initial state.
    pub fn last_entered(&self, state: JobState) -> Option<SimTime> {
        if let Some(stamp) = self.transitions.iter().rev().find(|s| s.to == state) {
            return Some(stamp.t);
        }
        (state == JobState::AwaitingData).then_some(self.created_at)
    }

    /// Replays the recorded history against the legal transition graph.
    pub fn history_is_legal(&self) -> bool {
        let mut current = JobState::AwaitingData;
        for stamp in &self.transitions {
            if stamp.from != current || !legal_job_transition(stamp.from, stamp.to) {
                return false;
            }
            current = stamp.to;
        }
        current == self.state
    }
}

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("job {0} not found")]
    NotFound(JobId),
    #[error("job {id} is in state {actual}, expected {expected}")]
    Conflict {
        id: JobId,
        expected: JobState,
        actual: JobState,
    },
    #[error("transition {from} -> {to} is not legal")]
    IllegalEdge { from: JobState, to: JobState },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("corrupt store at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Inner {
    jobs: BTreeMap<JobId, JobRecord>,
    next_id: u64,
    file: File,
}

/// Append-only, snapshot-per-write job store.
pub struct MetadataStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

impl MetadataStore {
    /// Opens (or creates) the store file and replays it.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, MetadataError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut jobs = BTreeMap::new();
        let mut next_id = 1;
        if path.exists() {
            let reader = BufReader::new(File::open(&path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: JobRecord =
                    serde_json::from_str(&line).map_err(|e| MetadataError::Corrupt {
                        line: lineno + 1,
                        reason: e.to_string(),
                    })?;
                next_id = next_id.max(record.id.as_u64() + 1);
                jobs.insert(record.id, record);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(MetadataStore {
            path,
            inner: Mutex::new(Inner {
                jobs,
                next_id,
                file,
            }),
        })
    }

    pub fn path(&self) -> &PathBuf {
        &self.path
    }

    pub fn allocate_id(&self) -> JobId {
        let mut inner = self.inner.lock().unwrap();
        let id = JobId(inner.next_id);
        inner.next_id += 1;
        id
    }

    pub fn upsert_job(&self, record: &JobRecord) -> Result<(), MetadataError> {
        record.validate()?;
        let mut inner = self.inner.lock().unwrap();
        append_record(&mut inner.file, record)?;
        inner.next_id = inner.next_id.max(record.id.as_u64() + 1);
        inner.jobs.insert(record.id, record.clone());
        Ok(())
    }

    pub fn get_job(&self, id: JobId) -> Result<JobRecord, MetadataError> {
        let inner = self.inner.lock().unwrap();
        inner.jobs.get(&id).cloned().ok_or(MetadataError::NotFound(id))
    }

    pub fn query_jobs(&self, state: Option<JobState>) -> Vec<JobRecord> {
        let inner = self.inner.lock().unwrap();
        inner
            .jobs
            .values()
            .filter(|j| state.is_none_or(|s| j.state == s))
            .cloned()
            .collect()
    }

    pub fn job_ids(&self) -> Vec<JobId> {
        let inner = self.inner.lock().unwrap();
        inner.jobs.keys().copied().collect()
    }

    /// Atomic compare-and-set transition. `mutate` runs on the record after
    /// the edge is validated and before it is persisted; it must not touch
    /// `state` or `transitions`.
    pub fn transition_job(
        &self,
        id: JobId,
        from: JobState,
        to: JobState,
        now: SimTime,
        note: Option<String>,
        mutate: impl FnOnce(&mut JobRecord),
    ) -> Result<JobRecord, MetadataError> {
        if !legal_job_transition(from, to) {
            return Err(MetadataError::IllegalEdge { from, to });
        }
        let mut inner = self.inner.lock().unwrap();
        let record = inner.jobs.get(&id).ok_or(MetadataError::NotFound(id))?;
        if record.state != from {
            return Err(MetadataError::Conflict {
                id,
                expected: from,
                actual: record.state,
            });
        }
        let mut updated = record.clone();
        updated.state = to;
        updated.transitions.push(TransitionStamp {
            from,
            to,
            t: now,
            note,
        });
        mutate(&mut updated);
        updated.validate()?;
        append_record(&mut inner.file, &updated)?;
        inner.jobs.insert(id, updated.clone());
        Ok(updated)
    }

    /// All records as line-delimited structured text.
    pub fn export(&self) -> String {
        let inner = self.inner.lock().unwrap();
        let mut out = String::new();
        for record in inner.jobs.values() {
            out.push_str(&serde_json::to_string(record).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn append_record(file: &mut File, record: &JobRecord) -> Result<(), MetadataError> {
    let mut line = serde_json::to_string(record).expect("record serializes");
    line.push('\n');
    file.write_all(line.as_bytes())?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::ContainerKind;
    use std::sync::Arc;

    fn manifest(name: &str) -> DataManifest {
        DataManifest {
            name: name.to_string(),
            kind: DataKind::ImageSet,
            has_positional_data: false,
            approx_size_bytes: 0,
            webhook_url: None,
        }
    }

    fn record(id: u64, state: JobState) -> JobRecord {
        JobRecord {
            id: JobId(id),
            state,
            manifest: manifest("poster"),
            input_container: ContainerRef {
                name: format!("job-{id}-in"),
                kind: ContainerKind::Input,
                created_at: SimTime::ZERO,
            },
            output_container: None,
            assigned_node: None,
            attempts: 0,
            created_at: SimTime::ZERO,
            transitions: Vec::new(),
            result: None,
            failure_reason: None,
            upload_token: None,
            token_expires_at: None,
            workloads: None,
        }
    }

    fn store() -> (tempfile::TempDir, MetadataStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = MetadataStore::open(dir.path().join("meta.jsonl")).unwrap();
        (dir, store)
    }

    #[test]
    fn insert_then_get_round_trips() {
        let (_dir, store) = store();
        let r = record(1, JobState::AwaitingData);
        store.upsert_job(&r).unwrap();
        assert_eq!(store.get_job(JobId(1)).unwrap(), r);
    }

    #[test]
    fn get_unknown_is_not_found() {
        let (_dir, store) = store();
        assert!(matches!(
            store.get_job(JobId(42)).unwrap_err(),
            MetadataError::NotFound(_)
        ));
    }

    #[test]
    fn query_filters_by_state() {
        let (_dir, store) = store();
        assert!(store.query_jobs(Some(JobState::Queued)).is_empty());
        store.upsert_job(&record(1, JobState::AwaitingData)).unwrap();
        store.upsert_job(&record(2, JobState::Queued)).unwrap();
        store.upsert_job(&record(3, JobState::Provisioning)).unwrap();
        assert_eq!(store.query_jobs(Some(JobState::Queued)).len(), 1);
        assert_eq!(store.query_jobs(None).len(), 3);
    }

    #[test]
    fn legal_edge_transitions_and_stamps() {
        let (_dir, store) = store();
        store.upsert_job(&record(1, JobState::Queued)).unwrap();
        let updated = store
            .transition_job(
                JobId(1),
                JobState::Queued,
                JobState::Provisioning,
                SimTime::from_nanos(5),
                None,
                |_| {},
            )
            .unwrap();
        assert_eq!(updated.state, JobState::Provisioning);
        assert_eq!(updated.transitions.len(), 1);
        assert_eq!(updated.transitions[0].t, SimTime::from_nanos(5));
    }

    #[test]
    fn terminal_states_reject_transitions() {
        let (_dir, store) = store();
        let mut r = record(1, JobState::Completed);
        r.result = Some(BlobRef {
            container: ContainerRef {
                name: "out".into(),
                kind: ContainerKind::Output,
                created_at: SimTime::ZERO,
            },
            path: "model.nerf".into(),
            size_bytes: 1,
            checksum: "00".into(),
        });
        store.upsert_job(&r).unwrap();
        let err = store
            .transition_job(
                JobId(1),
                JobState::Completed,
                JobState::Queued,
                SimTime::ZERO,
                None,
                |_| {},
            )
            .unwrap_err();
        assert!(matches!(err, MetadataError::IllegalEdge { .. }));
    }

    #[test]
    fn stale_from_state_conflicts() {
        let (_dir, store) = store();
        store.upsert_job(&record(1, JobState::Provisioning)).unwrap();
        let err = store
            .transition_job(
                JobId(1),
                JobState::Queued,
                JobState::Provisioning,
                SimTime::ZERO,
                None,
                |_| {},
            )
            .unwrap_err();
        assert!(matches!(err, MetadataError::Conflict { .. }));
    }

    #[test]
    fn concurrent_cas_has_one_winner() {
        let (_dir, store) = store();
        store.upsert_job(&record(1, JobState::Queued)).unwrap();
        let store = Arc::new(store);
        let mut handles = Vec::new();
        for _ in 0..2 {
            let store = Arc::clone(&store);
            handles.push(std::thread::spawn(move || {
                store.transition_job(
                    JobId(1),
                    JobState::Queued,
                    JobState::Provisioning,
                    SimTime::ZERO,
                    None,
                    |_| {},
                )
            }));
        }
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let wins = results.iter().filter(|r| r.is_ok()).count();
        let conflicts = results
            .iter()
            .filter(|r| matches!(r, Err(MetadataError::Conflict { .. })))
            .count();
        assert_eq!((wins, conflicts), (1, 1));
    }

    #[test]
    fn survives_restart_and_ids_are_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.jsonl");
        {
            let store = MetadataStore::open(&path).unwrap();
            let id = store.allocate_id();
            assert_eq!(id, JobId(1));
            store.upsert_job(&record(1, JobState::Queued)).unwrap();
            store
                .transition_job(
                    JobId(1),
                    JobState::Queued,
                    JobState::Provisioning,
                    SimTime::from_nanos(9),
                    None,
                    |_| {},
                )
                .unwrap();
        }
        let store = MetadataStore::open(&path).unwrap();
        let job = store.get_job(JobId(1)).unwrap();
        assert_eq!(job.state, JobState::Provisioning);
        assert_eq!(job.transitions.len(), 1);
        assert_eq!(store.allocate_id(), JobId(2));
    }

    #[test]
    fn history_replay_checks_legality() {
        let mut r = record(1, JobState::Queued);
        r.transitions = vec![
            TransitionStamp {
                from: JobState::AwaitingData,
                to: JobState::DataReady,
                t: SimTime::ZERO,
                note: None,
            },
            TransitionStamp {
                from: JobState::DataReady,
                to: JobState::Queued,
                t: SimTime::ZERO,
                note: None,
            },
        ];
        assert!(r.history_is_legal());
        r.transitions.push(TransitionStamp {
            from: JobState::Queued,
            to: JobState::Training,
            t: SimTime::ZERO,
            note: None,
        });
        assert!(!r.history_is_legal());
    }

    #[test]
    fn requeue_edges_exist_for_interrupted_phases() {
        assert!(legal_job_transition(JobState::Processing, JobState::Queued));
        assert!(legal_job_transition(JobState::Training, JobState::Queued));
        assert!(legal_job_transition(JobState::Provisioning, JobState::Queued));
        assert!(!legal_job_transition(JobState::Unmounting, JobState::Queued));
        assert!(!legal_job_transition(JobState::Completed, JobState::Failed));
    }
}
