//! Scenario files and the end-to-end simulation runner.
//!
//! A scenario fixes the seed, the cold-start model, the scheduler tunables,
//! the jobs to submit (with their workload stubs), and an eviction schedule.
//! Runs execute under the virtual clock and are bit-reproducible: the same
//! scenario and seed always produce byte-identical reports.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::clock::{ClockMode, SimDuration, SimTime};
use crate::fleet::{
    ColdStartModel, Fleet, FleetLogEvent, NodeClass, NodeId, NodeState, Phase, TraceProfile,
};
use crate::metadata::{
    DataKind, DataManifest, JobId, JobState, JobWorkloads, MetadataStore, WorkloadSpec,
};
use crate::orchestrator::{
    DispatchAction, Orchestrator, OrchestratorConfig, OrchestratorError, UploadDetails,
};
use crate::scheduler::SchedulerConfig;
use crate::storage::BlobStore;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Run(#[from] OrchestratorError),
    #[error(transparent)]
    Storage(#[from] crate::storage::StorageError),
    #[error(transparent)]
    Metadata(#[from] crate::metadata::MetadataError),
}

/// Per-phase workload stub: how long the phase takes and the shape of the
/// resource trace it emits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StubSpec {
    pub duration_s: f64,
    pub avg_cpu: f64,
    pub peak_cpu: f64,
    pub avg_mem_mb: f64,
    pub peak_mem_mb: f64,
    pub period: usize,
}

impl Default for StubSpec {
    fn default() -> Self {
        StubSpec {
            duration_s: 60.0,
            avg_cpu: 0.27,
            peak_cpu: 0.90,
            avg_mem_mb: 900.0,
            peak_mem_mb: 1507.0,
            period: 10,
        }
    }
}

impl StubSpec {
    fn to_workload(&self, key: &str, errors: &mut Vec<String>) -> Option<WorkloadSpec> {
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            errors.push(format!("{key}.duration_s: must be >= 0"));
            return None;
        }
        match TraceProfile::with_stats(
            self.avg_cpu,
            self.peak_cpu,
            self.avg_mem_mb,
            self.peak_mem_mb,
            self.period,
        ) {
            Ok(profile) => Some(WorkloadSpec {
                duration_s: self.duration_s,
                profile,
            }),
            Err(e) => {
                errors.push(format!("{key}: {e}"));
                None
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioJob {
    pub name: String,
    pub kind: DataKind,
    pub submit_at_s: f64,
    pub payload_bytes: u64,
    pub has_positional_data: bool,
    pub processing: StubSpec,
    pub training: StubSpec,
}

impl Default for ScenarioJob {
    fn default() -> Self {
        ScenarioJob {
            name: "workload".into(),
            kind: DataKind::ImageSet,
            submit_at_s: 0.0,
            payload_bytes: 4096,
            has_positional_data: false,
            processing: StubSpec::default(),
            training: StubSpec {
                duration_s: 120.0,
                avg_cpu: 0.17,
                peak_cpu: 0.65,
                avg_mem_mb: 1200.0,
                peak_mem_mb: 2543.0,
                period: 10,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduledEviction {
    pub at_s: f64,
    /// Explicit node to evict; when absent, the lowest-id evictable spot
    /// node at that instant is chosen.
    pub node: Option<u64>,
    pub notice_s: f64,
}

impl Default for ScheduledEviction {
    fn default() -> Self {
        ScheduledEviction {
            at_s: 0.0,
            node: None,
            notice_s: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub clock: ClockMode,
    pub scheduler: SchedulerConfig,
    pub cold_start: ColdStartModel,
    pub mem_capacity_mb: f64,
    pub allow_allocation: bool,
    pub max_attempts: u32,
    pub idle_ttl_s: f64,
    pub metrics_window_s: f64,
    /// Hard stop for the run, simulated seconds.
    pub horizon_s: f64,
    pub jobs: Vec<ScenarioJob>,
    pub evictions: Vec<ScheduledEviction>,
    /// Poisson-process eviction rate; 0 disables random evictions.
    pub eviction_rate_per_hour: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            clock: ClockMode::Virtual,
            scheduler: SchedulerConfig::default(),
            cold_start: ColdStartModel::default(),
            mem_capacity_mb: 16384.0,
            allow_allocation: true,
            max_attempts: 5,
            idle_ttl_s: 300.0,
            metrics_window_s: 60.0,
            horizon_s: 86_400.0,
            jobs: Vec::new(),
            evictions: Vec::new(),
            eviction_rate_per_hour: 0.0,
        }
    }
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ScenarioConfig =
            toml::from_str(&text).map_err(|source| ScenarioError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every field, reporting all offending keys at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errors = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            errors.push(format!(
                "schema_version: {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.clock != ClockMode::Virtual {
            errors.push("clock: scenario runs require the virtual clock".into());
        }
        if let Err(e) = self.scheduler.validate() {
            errors.push(format!("scheduler: {e}"));
        }
        if let Err(e) = self.cold_start.validate() {
            errors.push(format!("cold_start: {e}"));
        }
        if !(self.horizon_s.is_finite() && self.horizon_s > 0.0) {
            errors.push("horizon_s: must be > 0".into());
        }
        if !(self.eviction_rate_per_hour.is_finite() && self.eviction_rate_per_hour >= 0.0) {
            errors.push("eviction_rate_per_hour: must be >= 0".into());
        }
        if self.jobs.is_empty() {
            errors.push("jobs: at least one job is required".into());
        }
        for (i, job) in self.jobs.iter().enumerate() {
            if job.name.trim().is_empty() {
                errors.push(format!("jobs[{i}].name: must not be empty"));
            }
            if !(job.submit_at_s.is_finite() && job.submit_at_s >= 0.0) {
                errors.push(format!("jobs[{i}].submit_at_s: must be >= 0"));
            }
            job.processing
                .to_workload(&format!("jobs[{i}].processing"), &mut errors);
            job.training
                .to_workload(&format!("jobs[{i}].training"), &mut errors);
        }
        for (i, ev) in self.evictions.iter().enumerate() {
            if !(ev.at_s.is_finite() && ev.at_s >= 0.0) {
                errors.push(format!("evictions[{i}].at_s: must be >= 0"));
            }
            if !(ev.notice_s.is_finite() && ev.notice_s > 0.0) {
                errors.push(format!("evictions[{i}].notice_s: must be > 0"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    fn orchestrator_config(&self) -> OrchestratorConfig {
        OrchestratorConfig {
            scheduler: self.scheduler.clone(),
            allow_allocation: self.allow_allocation,
            max_attempts: self.max_attempts,
            idle_ttl_s: self.idle_ttl_s,
            metrics_window_s: self.metrics_window_s,
            ..OrchestratorConfig::default()
        }
    }
}

/// Per-job outcome and latency breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub id: JobId,
    pub name: String,
    pub final_state: JobState,
    pub attempts: u32,
    pub submitted_at_s: f64,
    pub finished_at_s: Option<f64>,
    pub first_processing_at_s: Option<f64>,
    /// Total simulated seconds spent in each lifecycle state.
    pub state_durations_s: BTreeMap<String, f64>,
    /// Peak/average stats per phase, from the final run of each phase.
    pub phase_stats: BTreeMap<String, PhaseStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub node: NodeId,
    pub peak_cpu_pct: f64,
    pub avg_cpu_pct: f64,
    pub peak_mem_mb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReport {
    pub id: NodeId,
    pub class: NodeClass,
    pub cold_starts: usize,
    pub cold_start_total_s: f64,
    pub busy_s: f64,
    pub evictions: usize,
    pub final_state: NodeState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub seed: u64,
    pub finished_at_s: f64,
    pub completed: usize,
    pub failed: usize,
    pub stuck: usize,
    pub evictions: usize,
    pub retries: u32,
    pub mean_cold_start_s: Option<f64>,
    pub jobs: Vec<JobReport>,
    pub nodes: Vec<NodeReport>,
    pub dispatch_audit: Vec<DispatchAction>,
}

impl SimulationReport {
    /// Line-delimited machine-readable form.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        let summary = serde_json::json!({
            "summary": {
                "seed": self.seed,
                "finished_at_s": self.finished_at_s,
                "completed": self.completed,
                "failed": self.failed,
                "stuck": self.stuck,
                "evictions": self.evictions,
                "retries": self.retries,
                "mean_cold_start_s": self.mean_cold_start_s,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        for job in &self.jobs {
            out.push_str(&serde_json::json!({ "job": job }).to_string());
            out.push('\n');
        }
        for node in &self.nodes {
            out.push_str(&serde_json::json!({ "node": node }).to_string());
            out.push('\n');
        }
        for action in &self.dispatch_audit {
            out.push_str(&serde_json::json!({ "dispatch": action }).to_string());
            out.push('\n');
        }
        out
    }

    /// Human-readable tables.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "simulation report (seed {})", self.seed).unwrap();
        writeln!(
            out,
            "  {} completed, {} failed, {} unfinished; {} evictions, {} retries; ended at {:.3} s",
            self.completed, self.failed, self.stuck, self.evictions, self.retries,
            self.finished_at_s
        )
        .unwrap();
        if let Some(mean) = self.mean_cold_start_s {
            writeln!(out, "  mean cold start: {mean:.3} s").unwrap();
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:<6} {:<12} {:<12} {:>8} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "job", "name", "state", "attempts", "queued_s", "prov_s", "proc_s", "train_s",
            "total_s"
        )
        .unwrap();
        for job in &self.jobs {
            let get = |k: &str| job.state_durations_s.get(k).copied().unwrap_or(0.0);
            let total = job
                .finished_at_s
                .map(|f| f - job.submitted_at_s)
                .unwrap_or(f64::NAN);
            writeln!(
                out,
                "{:<6} {:<12} {:<12} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
                job.id.to_string(),
                job.name,
                job.final_state.to_string(),
                job.attempts,
                get("queued"),
                get("provisioning"),
                get("processing"),
                get("training"),
                total,
            )
            .unwrap();
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:<6} {:<12} {:<6} {:>12} {:>12} {:>14}",
            "job", "phase", "node", "peak_cpu_%", "avg_cpu_%", "peak_mem_mb"
        )
        .unwrap();
        for job in &self.jobs {
            for (phase, stats) in &job.phase_stats {
                writeln!(
                    out,
                    "{:<6} {:<12} {:<6} {:>12.1} {:>12.1} {:>14.1}",
                    job.id.to_string(),
                    phase,
                    stats.node.to_string(),
                    stats.peak_cpu_pct,
                    stats.avg_cpu_pct,
                    stats.peak_mem_mb,
                )
                .unwrap();
            }
        }
        writeln!(out).unwrap();
        writeln!(
            out,
            "{:<6} {:<20} {:>12} {:>14} {:>10} {:>10} {:<12}",
            "node", "class", "cold_starts", "cold_total_s", "busy_s", "evictions", "state"
        )
        .unwrap();
        for node in &self.nodes {
            writeln!(
                out,
                "{:<6} {:<20} {:>12} {:>14.3} {:>10.3} {:>10} {:<12}",
                node.id.to_string(),
                node.class.to_string(),
                node.cold_starts,
                node.cold_start_total_s,
                node.busy_s,
                node.evictions,
                node.final_state.to_string(),
            )
            .unwrap();
        }
        out
    }
}

/// Deterministic pseudo-random payload for synthetic uploads.
pub fn synth_payload(seed: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = vec![0u8; len];
    rand::RngCore::fill_bytes(&mut rng, &mut bytes);
    bytes
}

struct PendingSubmission {
    at: SimTime,
    index: usize,
}

/// Runs a scenario to completion (all jobs terminal) or to the horizon.
/// `work_dir` receives the blob store and metadata file.
pub fn run_scenario(
    config: &ScenarioConfig,
    work_dir: &Path,
) -> Result<SimulationReport, ScenarioError> {
    config.validate()?;
    let fleet = {
        let mut f = Fleet::new(ClockMode::Virtual, config.seed, config.cold_start);
        f.set_mem_capacity_mb(config.mem_capacity_mb);
        f
    };
    let store = BlobStore::open(work_dir.join("storage"))?;
    let meta = MetadataStore::open(work_dir.join("metadata.jsonl"))?;
    let mut orch = Orchestrator::new(
        fleet,
        store,
        meta,
        config.orchestrator_config(),
        config.seed,
    );

    let mut submissions: Vec<PendingSubmission> = config
        .jobs
        .iter()
        .enumerate()
        .map(|(index, j)| PendingSubmission {
            at: SimTime::ZERO + SimDuration::from_secs_f64(j.submit_at_s),
            index,
        })
        .collect();
    submissions.sort_by_key(|s| (s.at, s.index));
    submissions.reverse(); // pop from the back

    let mut evictions: Vec<ScheduledEviction> = config.evictions.clone();
    evictions.sort_by(|a, b| a.at_s.total_cmp(&b.at_s));
    evictions.reverse();

    let mut eviction_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e3779b9));
    let rate_per_s = config.eviction_rate_per_hour / 3600.0;
    let mut next_random_eviction = sample_next_eviction(SimTime::ZERO, rate_per_s, &mut eviction_rng);

    let horizon = SimTime::ZERO + SimDuration::from_secs_f64(config.horizon_s);
    let mut submitted: Vec<JobId> = Vec::new();
    let mut eviction_count = 0usize;

    orch.step()?;
    loop {
        // earliest of: next submission, next scheduled/random eviction,
        // next fleet timer
        let mut next: Option<SimTime> = None;
        let mut consider = |t: Option<SimTime>| {
            if let Some(t) = t {
                next = Some(next.map_or(t, |n: SimTime| n.min(t)));
            }
        };
        consider(submissions.last().map(|s| s.at));
        consider(
            evictions
                .last()
                .map(|e| SimTime::ZERO + SimDuration::from_secs_f64(e.at_s)),
        );
        consider(next_random_eviction);
        consider(orch.fleet().next_timer_due());

        let all_done = submissions.is_empty()
            && submitted
                .iter()
                .all(|id| orch.get_status(*id).map(|j| j.state.is_terminal()).unwrap_or(true));
        if all_done {
            break;
        }
        let Some(target) = next else {
            break; // nothing can make progress
        };
        if target > horizon {
            break;
        }
        let dt = target.since(orch.now());
        orch.advance(dt)?;
        let now = orch.now();

        while submissions.last().is_some_and(|s| s.at <= now) {
            let s = submissions.pop().unwrap();
            let job = &config.jobs[s.index];
            let id = submit_job(&mut orch, job, config.seed ^ s.index as u64)?;
            submitted.push(id);
        }
        while evictions
            .last()
            .is_some_and(|e| SimTime::ZERO + SimDuration::from_secs_f64(e.at_s) <= now)
        {
            let ev = evictions.pop().unwrap();
            if inject_scenario_eviction(&mut orch, ev.node.map(NodeId::from_u64), ev.notice_s)? {
                eviction_count += 1;
            }
        }
        if next_random_eviction.is_some_and(|t| t <= now) {
            if inject_scenario_eviction(&mut orch, None, 30.0)? {
                eviction_count += 1;
            }
            next_random_eviction = sample_next_eviction(now, rate_per_s, &mut eviction_rng);
        }
        orch.step()?;
    }

    Ok(build_report(&orch, config, &submitted, eviction_count))
}

fn sample_next_eviction(
    now: SimTime,
    rate_per_s: f64,
    rng: &mut ChaCha8Rng,
) -> Option<SimTime> {
    if rate_per_s <= 0.0 {
        return None;
    }
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let wait_s = -u.ln() / rate_per_s;
    Some(now + SimDuration::from_secs_f64(wait_s))
}

fn submit_job(
    orch: &mut Orchestrator,
    job: &ScenarioJob,
    payload_seed: u64,
) -> Result<JobId, ScenarioError> {
    let manifest = DataManifest {
        name: job.name.clone(),
        kind: job.kind,
        has_positional_data: job.has_positional_data,
        approx_size_bytes: job.payload_bytes,
        webhook_url: None,
    };
    let (record, grant) = orch.create_job(manifest)?;
    let payload = synth_payload(payload_seed, job.payload_bytes as usize);
    orch.put_job_blob(record.id, &grant.upload_token, "raw/data.bin", &payload)?;
    let mut errors = Vec::new();
    let processing = job
        .processing
        .to_workload("processing", &mut errors)
        .expect("validated");
    let training = job
        .training
        .to_workload("training", &mut errors)
        .expect("validated");
    orch.set_job_workloads(record.id, JobWorkloads { processing, training })?;
    orch.complete_upload(record.id, UploadDetails::default())?;
    Ok(record.id)
}

fn inject_scenario_eviction(
    orch: &mut Orchestrator,
    node: Option<NodeId>,
    notice_s: f64,
) -> Result<bool, ScenarioError> {
    let target = match node {
        Some(id) => Some(id),
        None => orch
            .fleet()
            .nodes()
            .filter(|n| {
                n.class == NodeClass::Spot
                    && matches!(n.state, NodeState::Ready | NodeState::Busy)
            })
            .map(|n| n.id)
            .next(),
    };
    match target {
        Some(id) => match orch.admin_evict(id, Some(notice_s)) {
            Ok(()) => Ok(true),
            Err(OrchestratorError::Fleet(_)) => Ok(false), // not evictable right now
            Err(e) => Err(e.into()),
        },
        None => Ok(false),
    }
}

fn build_report(
    orch: &Orchestrator,
    config: &ScenarioConfig,
    submitted: &[JobId],
    evictions: usize,
) -> SimulationReport {
    let log = orch.fleet().log();

    // cold start durations per node occurrence, from the transition log
    let mut cold_entered: BTreeMap<NodeId, SimTime> = BTreeMap::new();
    let mut cold_durations: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    let mut busy_entered: BTreeMap<NodeId, SimTime> = BTreeMap::new();
    let mut busy_totals: BTreeMap<NodeId, f64> = BTreeMap::new();
    let mut eviction_counts: BTreeMap<NodeId, usize> = BTreeMap::new();
    for record in log {
        match &record.event {
            FleetLogEvent::StateChanged { from, to } => {
                if *to == NodeState::ColdStarting {
                    cold_entered.insert(record.node, record.t);
                }
                if *from == NodeState::ColdStarting && *to == NodeState::Ready {
                    if let Some(start) = cold_entered.remove(&record.node) {
                        cold_durations
                            .entry(record.node)
                            .or_default()
                            .push(record.t.since(start).as_secs_f64());
                    }
                }
                if *to == NodeState::Busy {
                    busy_entered.insert(record.node, record.t);
                }
                if *from == NodeState::Busy {
                    if let Some(start) = busy_entered.remove(&record.node) {
                        *busy_totals.entry(record.node).or_default() +=
                            record.t.since(start).as_secs_f64();
                    }
                }
            }
            FleetLogEvent::EvictionNoticed { .. } => {
                *eviction_counts.entry(record.node).or_default() += 1;
            }
            _ => {}
        }
    }
    let all_cold: Vec<f64> = cold_durations.values().flatten().copied().collect();
    let mean_cold_start_s = if all_cold.is_empty() {
        None
    } else {
        Some(all_cold.iter().sum::<f64>() / all_cold.len() as f64)
    };

    // final (job, phase) windows from the log, for phase stats
    let mut phase_started: BTreeMap<(JobId, Phase), (NodeId, SimTime)> = BTreeMap::new();
    let mut phase_windows: BTreeMap<(JobId, Phase), (NodeId, SimTime, SimTime)> = BTreeMap::new();
    for record in log {
        match &record.event {
            FleetLogEvent::WorkloadStarted { job, phase } => {
                phase_started.insert((*job, *phase), (record.node, record.t));
            }
            FleetLogEvent::WorkloadCompleted { job, phase } => {
                if let Some((node, start)) = phase_started.remove(&(*job, *phase)) {
                    phase_windows.insert((*job, *phase), (node, start, record.t));
                }
            }
            _ => {}
        }
    }

    let mut jobs = Vec::new();
    let mut completed = 0;
    let mut failed = 0;
    let mut stuck = 0;
    let mut retries = 0;
    for id in submitted {
        let Ok(job) = orch.get_status(*id) else {
            continue;
        };
        match job.state {
            JobState::Completed => completed += 1,
            JobState::Failed => failed += 1,
            _ => stuck += 1,
        }
        retries += job.attempts;

        let mut durations: BTreeMap<String, f64> = BTreeMap::new();
        let mut cursor = (JobState::AwaitingData, job.created_at);
        for stamp in &job.transitions {
            *durations.entry(cursor.0.to_string()).or_default() +=
                stamp.t.since(cursor.1).as_secs_f64();
            cursor = (stamp.to, stamp.t);
        }
        if !job.state.is_terminal() {
            *durations.entry(cursor.0.to_string()).or_default() +=
                orch.now().since(cursor.1).as_secs_f64();
        }

        let mut phase_stats = BTreeMap::new();
        for phase in [Phase::Processing, Phase::Training] {
            if let Some((node, start, end)) = phase_windows.get(&(*id, phase)) {
                if let Ok(record) = orch.fleet().node(*node) {
                    let samples: Vec<_> = record
                        .trace()
                        .iter()
                        .filter(|s| s.t >= *start && s.t < *end)
                        .collect();
                    if !samples.is_empty() {
                        let n = samples.len() as f64;
                        phase_stats.insert(
                            phase.to_string(),
                            PhaseStats {
                                node: *node,
                                peak_cpu_pct: samples
                                    .iter()
                                    .map(|s| s.cpu)
                                    .fold(0.0, f64::max)
                                    * 100.0,
                                avg_cpu_pct: samples.iter().map(|s| s.cpu).sum::<f64>() / n
                                    * 100.0,
                                peak_mem_mb: samples
                                    .iter()
                                    .map(|s| s.mem_mb)
                                    .fold(0.0, f64::max),
                            },
                        );
                    }
                }
            }
        }

        jobs.push(JobReport {
            id: *id,
            name: job.manifest.name.clone(),
            final_state: job.state,
            attempts: job.attempts,
            submitted_at_s: job.created_at.as_secs_f64(),
            finished_at_s: job
                .state
                .is_terminal()
                .then(|| job.transitions.last().map(|s| s.t.as_secs_f64()))
                .flatten(),
            first_processing_at_s: job
                .transitions
                .iter()
                .find(|s| s.to == JobState::Processing)
                .map(|s| s.t.as_secs_f64()),
            state_durations_s: durations,
            phase_stats,
        });
    }

    let nodes = orch
        .fleet()
        .nodes()
        .map(|n| NodeReport {
            id: n.id,
            class: n.class,
            cold_starts: cold_durations.get(&n.id).map_or(0, |v| v.len()),
            cold_start_total_s: cold_durations
                .get(&n.id)
                .map_or(0.0, |v| v.iter().sum()),
            busy_s: busy_totals.get(&n.id).copied().unwrap_or(0.0),
            evictions: eviction_counts.get(&n.id).copied().unwrap_or(0),
            final_state: n.state,
        })
        .collect();

    SimulationReport {
        seed: config.seed,
        finished_at_s: orch.now().as_secs_f64(),
        completed,
        failed,
        stuck,
        evictions,
        retries,
        mean_cold_start_s,
        jobs,
        nodes,
        dispatch_audit: orch.audit_trail().to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast_scenario() -> ScenarioConfig {
        let stub = StubSpec {
            duration_s: 20.0,
            avg_cpu: 0.27,
            peak_cpu: 0.9,
            avg_mem_mb: 900.0,
            peak_mem_mb: 1507.0,
            period: 10,
        };
        ScenarioConfig {
            seed: 3,
            cold_start: ColdStartModel {
                mean_s: 5.0,
                std_s: 0.0,
                floor_s: 1.0,
            },
            jobs: vec![ScenarioJob {
                name: "poster".into(),
                processing: stub.clone(),
                training: StubSpec {
                    duration_s: 30.0,
                    ..stub
                },
                ..ScenarioJob::default()
            }],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn single_job_runs_to_completion() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_scenario(&fast_scenario(), dir.path()).unwrap();
        assert_eq!(report.completed, 1);
        assert_eq!(report.failed, 0);
        assert_eq!(report.stuck, 0);
        let job = &report.jobs[0];
        assert_eq!(job.final_state, JobState::Completed);
        // cold start 5 s, then phases 20 + 30 s
        assert!(job.first_processing_at_s.unwrap() >= 5.0);
        assert!(job.phase_stats.contains_key("processing"));
        assert_eq!(report.mean_cold_start_s, Some(5.0));
    }

    #[test]
    fn reports_are_byte_identical_across_runs() {
        let config = fast_scenario();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let report = run_scenario(&config, dir.path()).unwrap();
            (report.to_json_lines(), report.render_table())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation_lists_every_offending_key() {
        let mut config = fast_scenario();
        config.jobs[0].name = "".into();
        config.jobs[0].processing.peak_cpu = 2.0;
        config.horizon_s = -1.0;
        let err = config.validate().unwrap_err();
        let ScenarioError::Invalid(errors) = err else {
            panic!("expected Invalid");
        };
        assert!(errors.iter().any(|e| e.contains("jobs[0].name")));
        assert!(errors.iter().any(|e| e.contains("jobs[0].processing")));
        assert!(errors.iter().any(|e| e.contains("horizon_s")));
    }

    #[test]
    fn parse_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenario.toml");
        std::fs::write(
            &path,
            r#"
schema_version = 1
seed = 42

[[jobs]]
name = "campus"
kind = "video"
submit_at_s = 0.0

[jobs.processing]
duration_s = 10.0

[jobs.training]
duration_s = 10.0

[[evictions]]
at_s = 12.0
notice_s = 30.0
"#,
        )
        .unwrap();
        let config = ScenarioConfig::load(&path).unwrap();
        assert_eq!(config.seed, 42);
        assert_eq!(config.jobs.len(), 1);
        assert_eq!(config.jobs[0].kind, DataKind::Video);
        assert_eq!(config.evictions.len(), 1);
    }
}
