//! The scheduler server.
//!
//! Owns the fleet, the blob store, and the metadata store, and drives every
//! job through its lifecycle: upload grant, queueing, penalty-scored
//! dispatch, the processing and training phases, unmount, and completion.
//! Eviction notices requeue the displaced job; the reconcile pass repairs
//! anything a crash or eviction left behind.
//!
//! Every state change funnels through the metadata store's compare-and-set,
//! so concurrent callers cannot corrupt a job. The event pump and dispatch
//! loop are single-flight by construction (`&mut self`).

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::clock::{ClockMode, SimDuration, SimTime};
use crate::fleet::{
    Fleet, FleetError, FleetEvent, NodeClass, NodeId, NodeState, Phase, TraceProfile,
    WorkloadArtifact,
};
use crate::metadata::{
    DataManifest, JobId, JobRecord, JobState, JobWorkloads, MetadataError, MetadataStore,
    WorkloadSpec,
};
use crate::scheduler::{
    select_node, NodeMetrics, SchedulerConfig, SchedulerError, SchedulingAction,
    SchedulingDecision,
};
use crate::storage::{BlobRef, BlobStore, ContainerKind, StorageError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Fleet(#[from] FleetError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid or expired upload token")]
    TokenInvalid,
    #[error("result not ready for job {0}")]
    ResultNotReady(JobId),
    #[error("operation requires a virtual clock")]
    WrongClockMode,
}

/// Scoped, expiring permission to upload into one job's input container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadGrant {
    pub job_id: JobId,
    pub container: crate::storage::ContainerRef,
    pub upload_token: String,
    pub expires_at: SimTime,
}

/// Outcome of one reconcile pass.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub scanned: usize,
    pub transitions_applied: usize,
    pub anomalies: Vec<(JobId, String)>,
}

/// One dispatch-loop decision, kept for the audit trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispatchAction {
    pub job: JobId,
    pub at: SimTime,
    pub outcome: DispatchOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DispatchOutcome {
    Dispatched { decision: SchedulingDecision },
    NoCapacity,
}

/// Terminal-state notice for a job; the API layer forwards these to
/// webhooks and status pollers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub job: JobId,
    pub state: JobState,
    pub at: SimTime,
    pub webhook_url: Option<String>,
}

/// Read-only fleet row for status endpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: NodeId,
    pub class: NodeClass,
    pub state: NodeState,
    pub current_job: Option<JobId>,
    pub mounted_containers: Vec<String>,
    pub cold_start_s: f64,
    pub metrics: Option<NodeMetrics>,
}

/// Compact job row for listings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub id: JobId,
    pub name: String,
    pub state: JobState,
    pub attempts: u32,
    pub assigned_node: Option<NodeId>,
    pub created_at: SimTime,
}

/// Details the client reports when the upload is finished.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UploadDetails {
    #[serde(default)]
    pub has_positional_data: Option<bool>,
    #[serde(default)]
    pub webhook_url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub scheduler: SchedulerConfig,
    /// Whether dispatch may allocate new nodes.
    pub allow_allocation: bool,
    /// A job that loses more phases than this fails for good.
    pub max_attempts: u32,
    /// Idle nodes are deallocated after this long.
    pub idle_ttl_s: f64,
    /// Trailing window for utilization metrics.
    pub metrics_window_s: f64,
    /// Spot eviction notice used by the admin endpoint default.
    pub eviction_notice_s: f64,
    /// Upload-grant lifetime.
    pub grant_ttl_s: f64,
    /// Workload stub used when a job does not carry its own.
    pub default_processing: WorkloadSpec,
    pub default_training: WorkloadSpec,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            scheduler: SchedulerConfig::default(),
            allow_allocation: true,
            max_attempts: 5,
            idle_ttl_s: 300.0,
            metrics_window_s: 60.0,
            eviction_notice_s: 30.0,
            grant_ttl_s: 3600.0,
            default_processing: WorkloadSpec {
                duration_s: 300.0,
                profile: TraceProfile::with_stats(0.27, 0.90, 900.0, 1507.0, 10)
                    .expect("valid default profile"),
            },
            default_training: WorkloadSpec {
                duration_s: 600.0,
                profile: TraceProfile::with_stats(0.17, 0.65, 1200.0, 2543.0, 10)
                    .expect("valid default profile"),
            },
        }
    }
}

pub struct Orchestrator {
    fleet: Fleet,
    store: BlobStore,
    meta: MetadataStore,
    config: OrchestratorConfig,
    rng: ChaCha8Rng,
    audit: Vec<DispatchAction>,
    notifications: Vec<Notification>,
    anomalies: Vec<(JobId, String)>,
}

impl Orchestrator {
    pub fn new(
        fleet: Fleet,
        store: BlobStore,
        meta: MetadataStore,
        config: OrchestratorConfig,
        seed: u64,
    ) -> Self {
        Orchestrator {
            fleet,
            store,
            meta,
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            audit: Vec::new(),
            notifications: Vec::new(),
            anomalies: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.fleet.now()
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn store(&self) -> &BlobStore {
        &self.store
    }

    pub fn metadata(&self) -> &MetadataStore {
        &self.meta
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn audit_trail(&self) -> &[DispatchAction] {
        &self.audit
    }

    pub fn drain_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.notifications)
    }

    fn metrics_window(&self) -> SimDuration {
        SimDuration::from_secs_f64(self.config.metrics_window_s)
    }

    fn fresh_token(&mut self) -> String {
        let mut bytes = [0u8; 32];
        self.rng.fill_bytes(&mut bytes);
        hex::encode(bytes)
    }

    /// Creates a job in `AwaitingData` with a dedicated input container and
    /// an upload grant scoped to it.
    pub fn create_job(
        &mut self,
        manifest: DataManifest,
    ) -> Result<(JobRecord, UploadGrant), OrchestratorError> {
        manifest
            .validate()
            .map_err(|e| OrchestratorError::Validation(e.to_string()))?;
        let id = self.meta.allocate_id();
        let now = self.now();
        let container = self.create_container_with_retry(&format!("job-{}-in", id.as_u64()), ContainerKind::Input)?;
        let token = self.fresh_token();
        let expires_at = now + SimDuration::from_secs_f64(self.config.grant_ttl_s);
        let record = JobRecord {
            id,
            state: JobState::AwaitingData,
            manifest,
            input_container: container.clone(),
            output_container: None,
            assigned_node: None,
            attempts: 0,
            created_at: now,
            transitions: Vec::new(),
            result: None,
            failure_reason: None,
            upload_token: Some(token.clone()),
            token_expires_at: Some(expires_at),
            workloads: None,
        };
        self.meta.upsert_job(&record)?;
        let grant = UploadGrant {
            job_id: id,
            container,
            upload_token: token,
            expires_at,
        };
        Ok((record, grant))
    }

    fn create_container_with_retry(
        &mut self,
        base: &str,
        kind: ContainerKind,
    ) -> Result<crate::storage::ContainerRef, OrchestratorError> {
        let now = self.now();
        let mut last = None;
        for attempt in 0..4 {
            let name = if attempt == 0 {
                base.to_string()
            } else {
                format!("{base}-r{attempt}")
            };
            match self.store.create_container(&name, kind, now) {
                Ok(c) => return Ok(c),
                Err(StorageError::Conflict(_)) => {
                    last = Some(StorageError::Conflict(name));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(last.expect("at least one attempt").into())
    }

    /// Token-authorized upload into the job's input container.
    pub fn put_job_blob(
        &mut self,
        job_id: JobId,
        token: &str,
        path: &str,
        bytes: &[u8],
    ) -> Result<BlobRef, OrchestratorError> {
        let job = self.meta.get_job(job_id)?;
        if job.state != JobState::AwaitingData {
            return Err(OrchestratorError::Precondition(format!(
                "job {job_id} is {}, uploads are closed",
                job.state
            )));
        }
        let valid = job.upload_token.as_deref() == Some(token)
            && job.token_expires_at.is_some_and(|t| self.now() <= t);
        if !valid {
            return Err(OrchestratorError::TokenInvalid);
        }
        Ok(self.store.put_blob(&job.input_container.name, path, bytes)?)
    }

    /// Marks the upload finished: verifies data arrived, allocates the
    /// output container, and queues the job.
    pub fn complete_upload(
        &mut self,
        job_id: JobId,
        details: UploadDetails,
    ) -> Result<JobRecord, OrchestratorError> {
        let job = self.meta.get_job(job_id)?;
        if job.state == JobState::AwaitingData
            && self.store.container_is_empty(&job.input_container.name)?
        {
            return Err(OrchestratorError::Precondition(format!(
                "input container {} is empty",
                job.input_container.name
            )));
        }
        let uploaded: u64 = self
            .store
            .list_blobs(&job.input_container.name)?
            .iter()
            .map(|b| b.size_bytes)
            .sum();
        let output = self
            .create_container_with_retry(&format!("job-{}-out", job_id.as_u64()), ContainerKind::Output)?;
        let now = self.now();
        self.meta.transition_job(
            job_id,
            JobState::AwaitingData,
            JobState::DataReady,
            now,
            None,
            |j| {
                j.output_container = Some(output.clone());
                j.manifest.approx_size_bytes = uploaded;
                if let Some(positional) = details.has_positional_data {
                    j.manifest.has_positional_data = positional;
                }
                if details.webhook_url.is_some() {
                    j.manifest.webhook_url = details.webhook_url.clone();
                }
                j.upload_token = None;
                j.token_expires_at = None;
            },
        )?;
        Ok(self
            .meta
            .transition_job(job_id, JobState::DataReady, JobState::Queued, now, None, |_| {})?)
    }

    fn workload_spec(&self, job: &JobRecord, phase: Phase) -> WorkloadSpec {
        let defaults = match phase {
            Phase::Processing => &self.config.default_processing,
            Phase::Training => &self.config.default_training,
        };
        job.workloads
            .as_ref()
            .map(|w| match phase {
                Phase::Processing => w.processing.clone(),
                Phase::Training => w.training.clone(),
            })
            .unwrap_or_else(|| defaults.clone())
    }

    /// Attaches scenario-defined workload stubs to a job.
    pub fn set_job_workloads(
        &mut self,
        job_id: JobId,
        workloads: JobWorkloads,
    ) -> Result<(), OrchestratorError> {
        let mut job = self.meta.get_job(job_id)?;
        job.workloads = Some(workloads);
        self.meta.upsert_job(&job)?;
        Ok(())
    }

    fn taken_nodes(&self) -> BTreeSet<NodeId> {
        self.meta
            .query_jobs(None)
            .iter()
            .filter(|j| !j.state.is_terminal())
            .filter_map(|j| j.assigned_node)
            .collect()
    }

    /// Scores and places every queued job, FIFO by enqueue time.
    pub fn dispatch_pending(&mut self) -> Result<Vec<DispatchAction>, OrchestratorError> {
        let mut queued = self.meta.query_jobs(Some(JobState::Queued));
        queued.sort_by_key(|j| (j.last_entered(JobState::Queued).unwrap_or(j.created_at), j.id));
        let mut actions = Vec::new();
        for job in queued {
            let taken = self.taken_nodes();
            let decision = {
                let eligible: Vec<NodeId> = self
                    .fleet
                    .nodes()
                    .filter(|n| matches!(n.state, NodeState::Ready | NodeState::Deallocated))
                    .filter(|n| !taken.contains(&n.id))
                    .map(|n| n.id)
                    .collect();
                let window = self.metrics_window();
                let mut candidates = Vec::new();
                for id in eligible {
                    let node = self.fleet.node(id).expect("listed above");
                    let metrics = match node.state {
                        NodeState::Ready => self
                            .fleet
                            .sample_metrics(id, window)
                            .unwrap_or(NodeMetrics::IDLE),
                        _ => NodeMetrics::IDLE,
                    };
                    candidates.push((node, metrics));
                }
                select_node(&candidates, self.config.allow_allocation, &self.config.scheduler)
            };
            let at = self.now();
            match decision {
                Ok(decision) => {
                    self.apply_decision(&job, &decision)?;
                    let action = DispatchAction {
                        job: job.id,
                        at,
                        outcome: DispatchOutcome::Dispatched { decision },
                    };
                    self.audit.push(action.clone());
                    actions.push(action);
                }
                Err(SchedulerError::NoCapacity) => {
                    let action = DispatchAction {
                        job: job.id,
                        at,
                        outcome: DispatchOutcome::NoCapacity,
                    };
                    self.audit.push(action.clone());
                    actions.push(action);
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(actions)
    }

    fn apply_decision(
        &mut self,
        job: &JobRecord,
        decision: &SchedulingDecision,
    ) -> Result<(), OrchestratorError> {
        let now = self.now();
        match decision.action {
            SchedulingAction::ReuseNode(node_id) => {
                let node_state = self.fleet.node(node_id)?.state;
                self.meta.transition_job(
                    job.id,
                    JobState::Queued,
                    JobState::Provisioning,
                    now,
                    Some(format!("reuse {node_id}")),
                    |j| j.assigned_node = Some(node_id),
                )?;
                match node_state {
                    NodeState::Ready => self.begin_mounting(job.id, node_id)?,
                    NodeState::Deallocated => self.fleet.cold_start_existing(node_id)?,
                    _ => unreachable!("scheduler only returns ready or deallocated nodes"),
                }
            }
            SchedulingAction::AllocateNew(class) => {
                let node_id = self.fleet.provision_node(class);
                self.meta.transition_job(
                    job.id,
                    JobState::Queued,
                    JobState::Provisioning,
                    now,
                    Some(format!("allocate {class}")),
                    |j| j.assigned_node = Some(node_id),
                )?;
            }
        }
        Ok(())
    }

    /// Mounts both containers and starts the processing phase on a node
    /// that is `Ready` for this job.
    fn begin_mounting(&mut self, job_id: JobId, node_id: NodeId) -> Result<(), OrchestratorError> {
        let job = self.meta.get_job(job_id)?;
        let output = job.output_container.clone().ok_or_else(|| {
            OrchestratorError::Precondition(format!("job {job_id} has no output container"))
        })?;
        let now = self.now();
        self.meta.transition_job(
            job_id,
            JobState::Provisioning,
            JobState::Mounting,
            now,
            None,
            |_| {},
        )?;
        self.fleet.mount(node_id, &job.input_container)?;
        self.fleet.mount(node_id, &output)?;
        let spec = self.workload_spec(&job, Phase::Processing);
        self.fleet.run_workload(
            node_id,
            job_id,
            Phase::Processing,
            SimDuration::from_secs_f64(spec.duration_s),
            &spec.profile,
        )?;
        self.meta.transition_job(
            job_id,
            JobState::Mounting,
            JobState::Processing,
            self.now(),
            None,
            |_| {},
        )?;
        Ok(())
    }

    /// Advances a job whose phase just finished: processing hands off to
    /// training; training persists the result and completes the job.
    pub fn handle_phase_complete(
        &mut self,
        job_id: JobId,
        phase: Phase,
        artifact: &WorkloadArtifact,
    ) -> Result<JobRecord, OrchestratorError> {
        let job = self.meta.get_job(job_id)?;
        let node_id = job.assigned_node.ok_or_else(|| {
            OrchestratorError::Precondition(format!("job {job_id} has no assigned node"))
        })?;
        let now = self.now();
        match phase {
            Phase::Processing => {
                let updated = self.meta.transition_job(
                    job_id,
                    JobState::Processing,
                    JobState::Training,
                    now,
                    Some(format!("staged {}", artifact.path)),
                    |_| {},
                )?;
                let spec = self.workload_spec(&job, Phase::Training);
                self.fleet.run_workload(
                    node_id,
                    job_id,
                    Phase::Training,
                    SimDuration::from_secs_f64(spec.duration_s),
                    &spec.profile,
                )?;
                Ok(updated)
            }
            Phase::Training => {
                if job.state != JobState::Training {
                    return Err(MetadataError::Conflict {
                        id: job_id,
                        expected: JobState::Training,
                        actual: job.state,
                    }
                    .into());
                }
                let output = job.output_container.clone().ok_or_else(|| {
                    OrchestratorError::Precondition(format!("job {job_id} has no output container"))
                })?;
                // Persist the result before leaving Training so a crash
                // between these steps can only lose the unmount, never the
                // artifact; reconcile finishes the rest.
                let result = self.store.put_blob(&output.name, &artifact.path, &artifact.bytes)?;
                self.meta.transition_job(
                    job_id,
                    JobState::Training,
                    JobState::Unmounting,
                    now,
                    None,
                    |_| {},
                )?;
                self.release_mounts(node_id);
                let updated = self.meta.transition_job(
                    job_id,
                    JobState::Unmounting,
                    JobState::Completed,
                    self.now(),
                    None,
                    |j| {
                        j.result = Some(result.clone());
                        j.assigned_node = None;
                    },
                )?;
                self.notifications.push(Notification {
                    job: job_id,
                    state: JobState::Completed,
                    at: self.now(),
                    webhook_url: updated.manifest.webhook_url.clone(),
                });
                Ok(updated)
            }
        }
    }

    fn release_mounts(&mut self, node_id: NodeId) {
        let mounted: Vec<String> = match self.fleet.node(node_id) {
            Ok(node) => node.mounted_containers.keys().cloned().collect(),
            Err(_) => return,
        };
        for container in mounted {
            let _ = self.fleet.unmount(node_id, &container);
        }
    }

    /// Requeues (or fails) the job displaced from an evicting node and
    /// releases the node's mounts before it reaches `Evicted`.
    pub fn handle_eviction_notice(
        &mut self,
        node_id: NodeId,
    ) -> Result<Vec<JobRecord>, OrchestratorError> {
        self.release_mounts(node_id);
        let affected: Vec<JobRecord> = self
            .meta
            .query_jobs(None)
            .into_iter()
            .filter(|j| !j.state.is_terminal() && j.assigned_node == Some(node_id))
            .collect();
        let mut updated = Vec::new();
        for job in affected {
            let bump = matches!(job.state, JobState::Processing | JobState::Training);
            updated.push(self.requeue_or_fail(&job, bump, "eviction notice")?);
        }
        Ok(updated)
    }

    fn requeue_or_fail(
        &mut self,
        job: &JobRecord,
        bump_attempts: bool,
        why: &str,
    ) -> Result<JobRecord, OrchestratorError> {
        let now = self.now();
        let attempts = job.attempts + u32::from(bump_attempts);
        if attempts > self.config.max_attempts {
            let updated = self.meta.transition_job(
                job.id,
                job.state,
                JobState::Failed,
                now,
                Some(why.to_string()),
                |j| {
                    j.assigned_node = None;
                    j.attempts = attempts;
                    j.failure_reason =
                        Some(format!("exceeded max attempts ({}): {why}", attempts));
                },
            )?;
            self.notifications.push(Notification {
                job: job.id,
                state: JobState::Failed,
                at: now,
                webhook_url: updated.manifest.webhook_url.clone(),
            });
            Ok(updated)
        } else {
            Ok(self.meta.transition_job(
                job.id,
                job.state,
                JobState::Queued,
                now,
                Some(why.to_string()),
                |j| {
                    j.assigned_node = None;
                    j.attempts = attempts;
                },
            )?)
        }
    }

    fn handle_node_ready(&mut self, node_id: NodeId) -> Result<(), OrchestratorError> {
        let waiting: Vec<JobId> = self
            .meta
            .query_jobs(Some(JobState::Provisioning))
            .into_iter()
            .filter(|j| j.assigned_node == Some(node_id))
            .map(|j| j.id)
            .collect();
        for job_id in waiting {
            self.begin_mounting(job_id, node_id)?;
        }
        Ok(())
    }

    /// Drains and routes fleet events until the queue is quiet.
    pub fn pump_events(&mut self) {
        loop {
            let events = self.fleet.drain_events();
            if events.is_empty() {
                return;
            }
            for event in events {
                let outcome = match event {
                    FleetEvent::NodeReady { node, .. } => self.handle_node_ready(node),
                    FleetEvent::EvictionNotice { node, .. } => {
                        self.handle_eviction_notice(node).map(|_| ())
                    }
                    FleetEvent::WorkloadComplete {
                        job,
                        phase,
                        artifact,
                        ..
                    } => self.handle_phase_complete(job, phase, &artifact).map(|_| ()),
                    FleetEvent::NodeEvicted { .. } => Ok(()),
                };
                if let Err(e) = outcome {
                    self.anomalies
                        .push((JobId::from_u64(0), format!("event handling: {e}")));
                }
            }
        }
    }

    /// Deallocates nodes idle longer than the configured TTL.
    pub fn scale_down_idle(&mut self) -> usize {
        let ttl = SimDuration::from_secs_f64(self.config.idle_ttl_s);
        let now = self.now();
        let taken = self.taken_nodes();
        let expired: Vec<NodeId> = self
            .fleet
            .nodes()
            .filter(|n| !taken.contains(&n.id))
            .filter(|n| {
                n.idle_since()
                    .is_some_and(|since| now.since(since) >= ttl && ttl > SimDuration::ZERO)
            })
            .map(|n| n.id)
            .collect();
        let mut count = 0;
        for id in expired {
            if self.fleet.deallocate_node(id).is_ok() {
                count += 1;
            }
        }
        count
    }

    /// One control-loop step: route events, place queued work, trim idle
    /// nodes. Loops until a fixpoint so chains of instant events settle.
    pub fn step(&mut self) -> Result<(), OrchestratorError> {
        for _ in 0..10_000 {
            self.pump_events();
            let actions = self.dispatch_pending()?;
            self.fleet.run_due_timers();
            if actions.is_empty() && self.fleet.outbox_is_empty() {
                break;
            }
        }
        self.scale_down_idle();
        Ok(())
    }

    /// Advances virtual time by `dt`, settling the system after.
    pub fn advance(&mut self, dt: SimDuration) -> Result<(), OrchestratorError> {
        if self.fleet.clock_mode() != ClockMode::Virtual {
            return Err(OrchestratorError::WrongClockMode);
        }
        self.fleet.advance(dt);
        self.step()
    }

    /// Scans all live jobs and repairs anything out of joint: orphans are
    /// requeued, stalled handoffs resume, interrupted unmounts finish.
    /// Running it twice back-to-back applies zero transitions the second
    /// time.
    pub fn reconcile(&mut self) -> Result<ReconcileReport, OrchestratorError> {
        self.pump_events();
        let mut report = ReconcileReport {
            anomalies: std::mem::take(&mut self.anomalies),
            ..ReconcileReport::default()
        };
        let live: Vec<JobRecord> = self
            .meta
            .query_jobs(None)
            .into_iter()
            .filter(|j| !j.state.is_terminal())
            .collect();
        for job in live {
            report.scanned += 1;
            match job.state {
                JobState::AwaitingData | JobState::Queued => {}
                JobState::DataReady => {
                    self.meta.transition_job(
                        job.id,
                        JobState::DataReady,
                        JobState::Queued,
                        self.now(),
                        Some("reconcile".into()),
                        |_| {},
                    )?;
                    report.transitions_applied += 1;
                }
                JobState::Provisioning
                | JobState::Mounting
                | JobState::Processing
                | JobState::Training => {
                    let node_state = job
                        .assigned_node
                        .and_then(|id| self.fleet.node(id).ok())
                        .map(|n| (n.state, n.current_job));
                    match node_state {
                        None
                        | Some((NodeState::Deallocated, _))
                        | Some((NodeState::Evicting, _))
                        | Some((NodeState::Evicted, _)) => {
                            let bump = matches!(
                                job.state,
                                JobState::Processing | JobState::Training
                            );
                            self.requeue_or_fail(&job, bump, "reconcile: node gone")?;
                            report.transitions_applied += 1;
                        }
                        Some((NodeState::ColdStarting, _)) => {
                            if job.state != JobState::Provisioning {
                                report.anomalies.push((
                                    job.id,
                                    format!("{} on a cold-starting node", job.state),
                                ));
                            }
                        }
                        Some((NodeState::Ready, _)) => match job.state {
                            JobState::Provisioning => {
                                self.begin_mounting(job.id, job.assigned_node.unwrap())?;
                                report.transitions_applied += 1;
                            }
                            JobState::Mounting => {
                                // re-run the mount + start sequence; mounts
                                // are idempotent so this is safe to resume
                                let node_id = job.assigned_node.unwrap();
                                let output = job.output_container.clone().expect("set in queue path");
                                self.fleet.mount(node_id, &job.input_container)?;
                                self.fleet.mount(node_id, &output)?;
                                let spec = self.workload_spec(&job, Phase::Processing);
                                self.fleet.run_workload(
                                    node_id,
                                    job.id,
                                    Phase::Processing,
                                    SimDuration::from_secs_f64(spec.duration_s),
                                    &spec.profile,
                                )?;
                                self.meta.transition_job(
                                    job.id,
                                    JobState::Mounting,
                                    JobState::Processing,
                                    self.now(),
                                    Some("reconcile: resumed".into()),
                                    |_| {},
                                )?;
                                report.transitions_applied += 1;
                            }
                            JobState::Processing | JobState::Training => {
                                // node lost the workload (e.g. restart)
                                self.requeue_or_fail(&job, true, "reconcile: workload lost")?;
                                report.transitions_applied += 1;
                            }
                            _ => unreachable!(),
                        },
                        Some((NodeState::Busy, current)) => {
                            if current != Some(job.id) {
                                report.anomalies.push((
                                    job.id,
                                    format!(
                                        "assigned node busy with {:?} instead",
                                        current
                                    ),
                                ));
                            }
                        }
                    }
                }
                JobState::Unmounting => {
                    // The result blob is always durable before Unmounting is
                    // entered; finish the release and complete.
                    let output = job.output_container.clone();
                    let result = output
                        .as_ref()
                        .and_then(|o| self.store.blob_ref(&o.name, "model.nerf").ok());
                    if let Some(node_id) = job.assigned_node {
                        self.release_mounts(node_id);
                    }
                    match result {
                        Some(result) => {
                            let updated = self.meta.transition_job(
                                job.id,
                                JobState::Unmounting,
                                JobState::Completed,
                                self.now(),
                                Some("reconcile: finalized".into()),
                                |j| {
                                    j.result = Some(result.clone());
                                    j.assigned_node = None;
                                },
                            )?;
                            self.notifications.push(Notification {
                                job: job.id,
                                state: JobState::Completed,
                                at: self.now(),
                                webhook_url: updated.manifest.webhook_url.clone(),
                            });
                        }
                        None => {
                            report
                                .anomalies
                                .push((job.id, "unmounting without a result blob".into()));
                            self.meta.transition_job(
                                job.id,
                                JobState::Unmounting,
                                JobState::Failed,
                                self.now(),
                                Some("reconcile".into()),
                                |j| {
                                    j.assigned_node = None;
                                    j.failure_reason =
                                        Some("result blob missing after training".into());
                                },
                            )?;
                        }
                    }
                    report.transitions_applied += 1;
                }
                JobState::Completed | JobState::Failed => unreachable!("filtered above"),
            }
        }
        Ok(report)
    }

    pub fn get_status(&self, job_id: JobId) -> Result<JobRecord, OrchestratorError> {
        Ok(self.meta.get_job(job_id)?)
    }

    /// Downloads the final artifact of a completed job.
    pub fn fetch_result(&self, job_id: JobId) -> Result<(BlobRef, Vec<u8>), OrchestratorError> {
        let job = self.meta.get_job(job_id)?;
        let result = match (&job.state, &job.result) {
            (JobState::Completed, Some(result)) => result.clone(),
            _ => return Err(OrchestratorError::ResultNotReady(job_id)),
        };
        let bytes = self.store.get_blob(&result.container.name, &result.path)?;
        Ok((result, bytes))
    }

    pub fn list_jobs(&self) -> Vec<JobSummary> {
        self.meta
            .query_jobs(None)
            .into_iter()
            .map(|j| JobSummary {
                id: j.id,
                name: j.manifest.name.clone(),
                state: j.state,
                attempts: j.attempts,
                assigned_node: j.assigned_node,
                created_at: j.created_at,
            })
            .collect()
    }

    pub fn list_nodes(&self) -> Vec<NodeView> {
        let window = self.metrics_window();
        self.fleet
            .nodes()
            .map(|n| NodeView {
                id: n.id,
                class: n.class,
                state: n.state,
                current_job: n.current_job,
                mounted_containers: n.mounted_containers.keys().cloned().collect(),
                cold_start_s: n.cold_start_duration_s(),
                metrics: self.fleet.sample_metrics(n.id, window).ok(),
            })
            .collect()
    }

    /// Simulation control: injects a spot eviction and immediately handles
    /// the notice.
    pub fn admin_evict(
        &mut self,
        node_id: NodeId,
        notice_s: Option<f64>,
    ) -> Result<(), OrchestratorError> {
        let notice = SimDuration::from_secs_f64(
            notice_s.unwrap_or(self.config.eviction_notice_s),
        );
        self.fleet.inject_eviction(node_id, notice)?;
        self.pump_events();
        Ok(())
    }
}
