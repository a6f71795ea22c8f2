//! Simulated compute fleet.
//!
//! Models a pool of evictable spot nodes and guaranteed container-instance
//! nodes: lifecycle transitions, sampled cold-start delays, evictions with an
//! advance notice, and per-node resource traces. A single `Fleet` owns all
//! node state; callers submit commands and observe the outcome through the
//! ordered event queue (`drain_events`) and the append-only transition log.
//!
//! Under a virtual clock every outcome is a pure function of (seed, commands),
//! which is what makes scenario runs bit-reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use thiserror::Error;

use crate::clock::{Clock, ClockMode, SimDuration, SimTime};
use crate::metadata::JobId;
use crate::storage::{ContainerKind, ContainerRef};

#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(u64);

impl NodeId {
    pub fn from_u64(v: u64) -> Self {
        NodeId(v)
    }

    pub fn as_u64(self) -> u64 {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n-{}", self.0)
    }
}

/// Spot nodes are cheap but evictable on short notice; container instances
/// cost more and always run to completion.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum NodeClass {
    Spot,
    ContainerInstance,
}

impl fmt::Display for NodeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeClass::Spot => write!(f, "spot"),
            NodeClass::ContainerInstance => write!(f, "container_instance"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Deallocated,
    ColdStarting,
    Ready,
    Busy,
    Evicting,
    Evicted,
}

impl fmt::Display for NodeState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeState::Deallocated => "deallocated",
            NodeState::ColdStarting => "cold_starting",
            NodeState::Ready => "ready",
            NodeState::Busy => "busy",
            NodeState::Evicting => "evicting",
            NodeState::Evicted => "evicted",
        };
        f.write_str(s)
    }
}

/// The two workload phases every job runs, in order.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Processing,
    Training,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Processing => write!(f, "processing"),
            Phase::Training => write!(f, "training"),
        }
    }
}

/// Legal node state transitions. Spot nodes may be evicted from `Ready` or
/// `Busy`; container instances never evict.
pub fn legal_transition(from: NodeState, to: NodeState, class: NodeClass) -> bool {
    use NodeState::*;
    match (from, to) {
        (Deallocated, ColdStarting) => true,
        (ColdStarting, Ready) => true,
        (Ready, Busy) => true,
        (Ready, Deallocated) => true,
        (Busy, Ready) => true,
        (Busy, Evicting) | (Ready, Evicting) => class == NodeClass::Spot,
        (Evicting, Evicted) => class == NodeClass::Spot,
        (Evicted, Deallocated) => true,
        _ => false,
    }
}

/// Gaussian cold-start delay, clipped below at `floor_s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColdStartModel {
    pub mean_s: f64,
    pub std_s: f64,
    pub floor_s: f64,
}

impl Default for ColdStartModel {
    fn default() -> Self {
        ColdStartModel {
            mean_s: 70.517,
            std_s: 0.12,
            floor_s: 60.0,
        }
    }
}

impl ColdStartModel {
    pub fn validate(&self) -> Result<(), FleetError> {
        if !(self.mean_s.is_finite() && self.std_s.is_finite() && self.floor_s.is_finite()) {
            return Err(FleetError::InvalidModel("non-finite parameter".into()));
        }
        if self.floor_s < 0.0 || self.mean_s <= self.floor_s {
            return Err(FleetError::InvalidModel(format!(
                "need mean_s > floor_s >= 0, got mean {} floor {}",
                self.mean_s, self.floor_s
            )));
        }
        if self.std_s < 0.0 {
            return Err(FleetError::InvalidModel("std_s must be >= 0".into()));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> SimDuration {
        let secs = if self.std_s == 0.0 {
            self.mean_s
        } else {
            let normal = Normal::new(self.mean_s, self.std_s).expect("validated model");
            normal.sample(rng).max(self.floor_s)
        };
        SimDuration::from_secs_f64(secs)
    }
}

/// One resource measurement on a node's trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: SimTime,
    pub cpu: f64,
    pub mem_mb: f64,
}

/// Repeating cycle of resource samples a workload stub emits while running.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceProfile {
    /// CPU fractions, cycled in order.
    pub cpu: Vec<f64>,
    /// Resident memory in megabytes, cycled in order.
    pub mem_mb: Vec<f64>,
    pub sample_interval_s: f64,
}

impl Default for TraceProfile {
    fn default() -> Self {
        TraceProfile {
            cpu: vec![0.2],
            mem_mb: vec![512.0],
            sample_interval_s: 1.0,
        }
    }
}

impl TraceProfile {
    pub fn constant(cpu: f64, mem_mb: f64) -> Self {
        TraceProfile {
            cpu: vec![cpu],
            mem_mb: vec![mem_mb],
            sample_interval_s: 1.0,
        }
    }

    /// Builds a cycle whose mean matches `avg` and whose maximum is `peak`:
    /// one peak sample followed by `period - 1` equal base samples.
    pub fn with_stats(
        avg_cpu: f64,
        peak_cpu: f64,
        avg_mem_mb: f64,
        peak_mem_mb: f64,
        period: usize,
    ) -> Result<Self, FleetError> {
        if period < 2 {
            return Err(FleetError::InvalidProfile("period must be >= 2".into()));
        }
        let base = |avg: f64, peak: f64| -> Result<f64, FleetError> {
            if peak < avg {
                return Err(FleetError::InvalidProfile(format!(
                    "peak {peak} below average {avg}"
                )));
            }
            let b = (avg * period as f64 - peak) / (period as f64 - 1.0);
            if b < 0.0 {
                return Err(FleetError::InvalidProfile(format!(
                    "peak {peak} unreachable from average {avg} with period {period}"
                )));
            }
            Ok(b)
        };
        let cpu_base = base(avg_cpu, peak_cpu)?;
        let mem_base = base(avg_mem_mb, peak_mem_mb)?;
        let mut cpu = vec![peak_cpu];
        cpu.resize(period, cpu_base);
        let mut mem_mb = vec![peak_mem_mb];
        mem_mb.resize(period, mem_base);
        let profile = TraceProfile {
            cpu,
            mem_mb,
            sample_interval_s: 1.0,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), FleetError> {
        if self.cpu.is_empty() || self.mem_mb.is_empty() {
            return Err(FleetError::InvalidProfile("empty sample cycle".into()));
        }
        if !(self.sample_interval_s.is_finite() && self.sample_interval_s > 0.0) {
            return Err(FleetError::InvalidProfile(
                "sample_interval_s must be > 0".into(),
            ));
        }
        if self.cpu.iter().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(FleetError::InvalidProfile(
                "cpu fractions must lie in [0, 1]".into(),
            ));
        }
        if self.mem_mb.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(FleetError::InvalidProfile(
                "mem_mb values must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic output produced by a completed workload phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadArtifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

/// Events the fleet reports to its driver, in occurrence order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FleetEvent {
    NodeReady {
        node: NodeId,
        at: SimTime,
    },
    /// Delivered at injection time, strictly before the node reaches
    /// `Evicted`. Carries the job that was running, if any.
    EvictionNotice {
        node: NodeId,
        at: SimTime,
        evicted_at: SimTime,
        displaced_job: Option<JobId>,
    },
    NodeEvicted {
        node: NodeId,
        at: SimTime,
    },
    WorkloadComplete {
        node: NodeId,
        job: JobId,
        phase: Phase,
        at: SimTime,
        artifact: WorkloadArtifact,
    },
}

/// One entry in the exported transition log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetLogRecord {
    pub t: SimTime,
    pub node: NodeId,
    pub event: FleetLogEvent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum FleetLogEvent {
    Provisioned { class: NodeClass },
    StateChanged { from: NodeState, to: NodeState },
    Mounted { container: String, kind: ContainerKind },
    Unmounted { container: String },
    WorkloadStarted { job: JobId, phase: Phase },
    WorkloadCompleted { job: JobId, phase: Phase },
    EvictionNoticed { notice_s: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum FleetError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("illegal transition: cannot {action} node {node} in state {state}")]
    IllegalTransition {
        node: NodeId,
        state: NodeState,
        action: &'static str,
    },
    #[error("node {node} is a {class} node and cannot be evicted")]
    UnsupportedClass { node: NodeId, class: NodeClass },
    #[error("no trace data for node {0} in the requested window")]
    NoData(NodeId),
    #[error("mount discipline violated on node {node}: {reason}")]
    MountDiscipline { node: NodeId, reason: String },
    #[error("container {container} is not mounted on node {node}")]
    MountNotFound { node: NodeId, container: String },
    #[error("invalid cold start model: {0}")]
    InvalidModel(String),
    #[error("invalid trace profile: {0}")]
    InvalidProfile(String),
}

#[derive(Clone, Debug, PartialEq)]
struct ActiveWorkload {
    job: JobId,
    phase: Phase,
    started: SimTime,
    ends: SimTime,
}

/// State of one compute node.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub class: NodeClass,
    pub state: NodeState,
    pub created_at: SimTime,
    pub cold_start_duration: SimDuration,
    /// Mounted containers, name -> kind.
    pub mounted_containers: BTreeMap<String, ContainerKind>,
    pub current_job: Option<JobId>,
    pub mem_capacity_mb: f64,
    trace: Vec<TraceSample>,
    ready_since: Option<SimTime>,
    active: Option<ActiveWorkload>,
}

impl NodeRecord {
    /// Minimal record for scheduler-level tests.
    pub fn for_tests(id: NodeId, class: NodeClass, state: NodeState, created_at: SimTime) -> Self {
        NodeRecord {
            id,
            class,
            state,
            created_at,
            cold_start_duration: SimDuration::ZERO,
            mounted_containers: BTreeMap::new(),
            current_job: None,
            mem_capacity_mb: 16384.0,
            trace: Vec::new(),
            ready_since: None,
            active: None,
        }
    }

    pub fn cold_start_duration_s(&self) -> f64 {
        self.cold_start_duration.as_secs_f64()
    }

    /// When the node last became idle, if it is idle now.
    pub fn idle_since(&self) -> Option<SimTime> {
        match self.state {
            NodeState::Ready => self.ready_since,
            _ => None,
        }
    }

    pub fn trace(&self) -> &[TraceSample] {
        &self.trace
    }

    fn count_mounts(&self, kind: ContainerKind) -> usize {
        self.mounted_containers
            .values()
            .filter(|k| **k == kind)
            .count()
    }
}

#[derive(Debug, PartialEq, Eq)]
struct Timer {
    due: SimTime,
    seq: u64,
    action: TimerAction,
}

#[derive(Debug, PartialEq, Eq)]
enum TimerAction {
    BecomeReady(NodeId),
    FinishEviction(NodeId),
    CompleteWorkload { node: NodeId, job: JobId, phase: Phase },
}

impl Ord for Timer {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.seq).cmp(&(other.due, other.seq))
    }
}

impl PartialOrd for Timer {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// The simulated node pool. See the module docs for the interaction model.
#[derive(Debug)]
pub struct Fleet {
    clock: Clock,
    nodes: BTreeMap<NodeId, NodeRecord>,
    next_node_id: u64,
    timers: BinaryHeap<Reverse<Timer>>,
    timer_seq: u64,
    outbox: VecDeque<FleetEvent>,
    log: Vec<FleetLogRecord>,
    rng: ChaCha8Rng,
    cold_start_model: ColdStartModel,
    mem_capacity_mb: f64,
}

impl Fleet {
    pub fn new(mode: ClockMode, seed: u64, cold_start_model: ColdStartModel) -> Self {
        Fleet {
            clock: Clock::new(mode),
            nodes: BTreeMap::new(),
            next_node_id: 1,
            timers: BinaryHeap::new(),
            timer_seq: 0,
            outbox: VecDeque::new(),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cold_start_model,
            mem_capacity_mb: 16384.0,
        }
    }

    pub fn set_mem_capacity_mb(&mut self, capacity: f64) {
        self.mem_capacity_mb = capacity;
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn clock_mode(&self) -> ClockMode {
        self.clock.mode()
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord, FleetError> {
        self.nodes.get(&id).ok_or(FleetError::UnknownNode(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn log(&self) -> &[FleetLogRecord] {
        &self.log
    }

    /// Serializes the transition log as line-delimited records.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for record in &self.log {
            out.push_str(&serde_json::to_string(record).expect("log serializes"));
            out.push('\n');
        }
        out
    }

    pub fn drain_events(&mut self) -> Vec<FleetEvent> {
        self.outbox.drain(..).collect()
    }

    pub fn outbox_is_empty(&self) -> bool {
        self.outbox.is_empty()
    }

    /// Earliest pending timer, if any. Scenario loops advance to this.
    pub fn next_timer_due(&self) -> Option<SimTime> {
        self.timers.peek().map(|Reverse(t)| t.due)
    }

    /// Creates a node and begins its cold start. The node becomes `Ready`
    /// exactly `cold_start_duration` later.
    pub fn provision_node(&mut self, class: NodeClass) -> NodeId {
        let id = NodeId(self.next_node_id);
        self.next_node_id += 1;
        let now = self.now();
        let duration = self.cold_start_model.sample(&mut self.rng);
        let record = NodeRecord {
            id,
            class,
            state: NodeState::ColdStarting,
            created_at: now,
            cold_start_duration: duration,
            mounted_containers: BTreeMap::new(),
            current_job: None,
            mem_capacity_mb: self.mem_capacity_mb,
            trace: Vec::new(),
            ready_since: None,
            active: None,
        };
        self.nodes.insert(id, record);
        self.push_log(id, FleetLogEvent::Provisioned { class });
        self.push_log(
            id,
            FleetLogEvent::StateChanged {
                from: NodeState::Deallocated,
                to: NodeState::ColdStarting,
            },
        );
        self.schedule(now + duration, TimerAction::BecomeReady(id));
        self.run_due_timers();
        id
    }

    /// Restarts a deallocated node through a fresh cold start.
    pub fn cold_start_existing(&mut self, id: NodeId) -> Result<(), FleetError> {
        let now = self.now();
        let duration = self.cold_start_model.sample(&mut self.rng);
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        if node.state != NodeState::Deallocated {
            return Err(FleetError::IllegalTransition {
                node: id,
                state: node.state,
                action: "cold-start",
            });
        }
        node.cold_start_duration = duration;
        self.set_state(id, NodeState::ColdStarting);
        self.schedule(now + duration, TimerAction::BecomeReady(id));
        self.run_due_timers();
        Ok(())
    }

    /// Releases a `Ready` or `Evicted` node; clears its mounts.
    pub fn deallocate_node(&mut self, id: NodeId) -> Result<(), FleetError> {
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        match node.state {
            NodeState::Ready | NodeState::Evicted => {}
            state => {
                return Err(FleetError::IllegalTransition {
                    node: id,
                    state,
                    action: "deallocate",
                })
            }
        }
        let mounts: Vec<String> = node.mounted_containers.keys().cloned().collect();
        node.mounted_containers.clear();
        node.ready_since = None;
        for container in mounts {
            self.push_log(id, FleetLogEvent::Unmounted { container });
        }
        self.set_state(id, NodeState::Deallocated);
        Ok(())
    }

    /// Starts the spot-eviction sequence: the node enters `Evicting` now and
    /// reaches `Evicted` after the notice window. The notice event (with the
    /// displaced job, if any) is queued immediately.
    pub fn inject_eviction(
        &mut self,
        id: NodeId,
        notice: SimDuration,
    ) -> Result<(), FleetError> {
        let now = self.now();
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        if node.class != NodeClass::Spot {
            return Err(FleetError::UnsupportedClass {
                node: id,
                class: node.class,
            });
        }
        match node.state {
            NodeState::Ready | NodeState::Busy => {}
            state => {
                return Err(FleetError::IllegalTransition {
                    node: id,
                    state,
                    action: "evict",
                })
            }
        }
        let displaced_job = node.current_job.take();
        node.active = None;
        node.ready_since = None;
        self.push_log(
            id,
            FleetLogEvent::EvictionNoticed {
                notice_s: notice.as_secs_f64(),
            },
        );
        self.set_state(id, NodeState::Evicting);
        let evicted_at = now + notice;
        self.outbox.push_back(FleetEvent::EvictionNotice {
            node: id,
            at: now,
            evicted_at,
            displaced_job,
        });
        self.schedule(evicted_at, TimerAction::FinishEviction(id));
        self.run_due_timers();
        Ok(())
    }

    /// Mounts a container on a node. Idempotent per (container, node);
    /// returns whether a new mount was recorded.
    pub fn mount(&mut self, id: NodeId, container: &ContainerRef) -> Result<bool, FleetError> {
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        if node.state == NodeState::Deallocated {
            return Err(FleetError::IllegalTransition {
                node: id,
                state: node.state,
                action: "mount on",
            });
        }
        let inserted = node
            .mounted_containers
            .insert(container.name.clone(), container.kind)
            .is_none();
        if inserted {
            self.push_log(
                id,
                FleetLogEvent::Mounted {
                    container: container.name.clone(),
                    kind: container.kind,
                },
            );
        }
        Ok(inserted)
    }

    pub fn unmount(&mut self, id: NodeId, container: &str) -> Result<(), FleetError> {
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        if node.mounted_containers.remove(container).is_none() {
            return Err(FleetError::MountNotFound {
                node: id,
                container: container.to_string(),
            });
        }
        self.push_log(
            id,
            FleetLogEvent::Unmounted {
                container: container.to_string(),
            },
        );
        Ok(())
    }

    /// Trailing-window reductions of the node's resource trace.
    pub fn sample_metrics(
        &self,
        id: NodeId,
        window: SimDuration,
    ) -> Result<crate::scheduler::NodeMetrics, FleetError> {
        let node = self.node(id)?;
        if node.state == NodeState::Deallocated {
            return Err(FleetError::IllegalTransition {
                node: id,
                state: node.state,
                action: "sample metrics of",
            });
        }
        let now = self.now();
        let cutoff = now.since(SimTime::ZERO).as_nanos().saturating_sub(window.as_nanos());
        let samples: Vec<&TraceSample> = node
            .trace
            .iter()
            .filter(|s| s.t.as_nanos() >= cutoff && s.t <= now)
            .collect();
        if samples.is_empty() {
            return Err(FleetError::NoData(id));
        }
        let n = samples.len() as f64;
        let avg_cpu = samples.iter().map(|s| s.cpu).sum::<f64>() / n;
        let peak_cpu = samples.iter().map(|s| s.cpu).fold(0.0, f64::max);
        let avg_mem_mb = samples.iter().map(|s| s.mem_mb).sum::<f64>() / n;
        let peak_mem_mb = samples.iter().map(|s| s.mem_mb).fold(0.0, f64::max);
        Ok(crate::scheduler::NodeMetrics {
            avg_cpu,
            avg_mem: (avg_mem_mb / node.mem_capacity_mb).clamp(0.0, 1.0),
            peak_cpu,
            peak_mem_mb,
        })
    }

    /// Runs a workload phase on a `Ready` node that has exactly one input and
    /// one output mount. The node stays `Busy` for `duration`, its trace
    /// gains `profile` samples, and a completion event fires at the end.
    pub fn run_workload(
        &mut self,
        id: NodeId,
        job: JobId,
        phase: Phase,
        duration: SimDuration,
        profile: &TraceProfile,
    ) -> Result<(), FleetError> {
        profile.validate()?;
        let now = self.now();
        let node = self.nodes.get_mut(&id).ok_or(FleetError::UnknownNode(id))?;
        if node.state != NodeState::Ready {
            return Err(FleetError::IllegalTransition {
                node: id,
                state: node.state,
                action: "run workload on",
            });
        }
        let inputs = node.count_mounts(ContainerKind::Input);
        let outputs = node.count_mounts(ContainerKind::Output);
        if inputs != 1 || outputs != 1 {
            return Err(FleetError::MountDiscipline {
                node: id,
                reason: format!(
                    "need exactly one input and one output mount, found {inputs} input / {outputs} output"
                ),
            });
        }
        let ends = now + duration;
        node.current_job = Some(job);
        node.ready_since = None;
        node.active = Some(ActiveWorkload {
            job,
            phase,
            started: now,
            ends,
        });
        // Emit the whole trace up front; readers filter by timestamp, so a
        // mid-run sample_metrics only sees what has "happened" so far.
        let interval = SimDuration::from_secs_f64(profile.sample_interval_s);
        let count = duration.as_nanos() / interval.as_nanos().max(1);
        for i in 0..count {
            let t = now + SimDuration::from_nanos(i * interval.as_nanos());
            let cycle = i as usize % profile.cpu.len();
            let mem_cycle = i as usize % profile.mem_mb.len();
            node.trace.push(TraceSample {
                t,
                cpu: profile.cpu[cycle],
                mem_mb: profile.mem_mb[mem_cycle],
            });
        }
        self.push_log(id, FleetLogEvent::WorkloadStarted { job, phase });
        self.set_state(id, NodeState::Busy);
        self.schedule(ends, TimerAction::CompleteWorkload { node: id, job, phase });
        self.run_due_timers();
        Ok(())
    }

    /// Advances a virtual clock by `dt`, firing every timer that falls due.
    /// On a wall clock this only pumps already-due timers.
    pub fn advance(&mut self, dt: SimDuration) {
        let target = self.now() + dt;
        loop {
            let due = match self.timers.peek() {
                Some(Reverse(timer)) if timer.due <= target => timer.due,
                _ => break,
            };
            self.clock.advance_to(due);
            self.fire_next_timer();
        }
        self.clock.advance_to(target);
    }

    /// Fires timers that are due at or before the current instant.
    pub fn run_due_timers(&mut self) {
        loop {
            match self.timers.peek() {
                Some(Reverse(timer)) if timer.due <= self.now() => {}
                _ => break,
            }
            self.fire_next_timer();
        }
    }

    fn fire_next_timer(&mut self) {
        let Reverse(timer) = self.timers.pop().expect("peeked");
        match timer.action {
            TimerAction::BecomeReady(id) => {
                if let Some(node) = self.nodes.get_mut(&id) {
                    if node.state == NodeState::ColdStarting {
                        node.ready_since = Some(timer.due);
                        self.set_state(id, NodeState::Ready);
                        self.outbox.push_back(FleetEvent::NodeReady {
                            node: id,
                            at: timer.due,
                        });
                    }
                }
            }
            TimerAction::FinishEviction(id) => {
                if let Some(node) = self.nodes.get_mut(&id) {
                    if node.state == NodeState::Evicting {
                        node.ready_since = None;
                        self.set_state(id, NodeState::Evicted);
                        self.outbox.push_back(FleetEvent::NodeEvicted {
                            node: id,
                            at: timer.due,
                        });
                    }
                }
            }
            TimerAction::CompleteWorkload { node: id, job, phase } => {
                let Some(node) = self.nodes.get_mut(&id) else {
                    return;
                };
                let matches = node.state == NodeState::Busy
                    && node
                        .active
                        .as_ref()
                        .is_some_and(|w| w.job == job && w.phase == phase);
                if !matches {
                    return; // the workload was displaced by an eviction
                }
                node.current_job = None;
                node.active = None;
                node.ready_since = Some(timer.due);
                let artifact = synth_artifact(id, job, phase, timer.due);
                self.push_log(id, FleetLogEvent::WorkloadCompleted { job, phase });
                self.set_state(id, NodeState::Ready);
                self.outbox.push_back(FleetEvent::WorkloadComplete {
                    node: id,
                    job,
                    phase,
                    at: timer.due,
                    artifact,
                });
            }
        }
    }

    fn schedule(&mut self, due: SimTime, action: TimerAction) {
        let seq = self.timer_seq;
        self.timer_seq += 1;
        self.timers.push(Reverse(Timer { due, seq, action }));
    }

    fn set_state(&mut self, id: NodeId, to: NodeState) {
        let node = self.nodes.get_mut(&id).expect("caller verified node");
        let from = node.state;
        debug_assert!(
            legal_transition(from, to, node.class),
            "illegal transition {from} -> {to} on {id}"
        );
        node.state = to;
        self.push_log(id, FleetLogEvent::StateChanged { from, to });
    }

    fn push_log(&mut self, node: NodeId, event: FleetLogEvent) {
        self.log.push(FleetLogRecord {
            t: self.now(),
            node,
            event,
        });
    }
}

/// Replays a transition log and checks the mount rules: every workload start
/// happens with exactly one input and one output mount on the node, and none
/// of `released_containers` (containers of jobs that reached a terminal
/// state) is still mounted anywhere at the end of the log.
pub fn verify_mount_discipline(
    log: &[FleetLogRecord],
    released_containers: &[String],
) -> Result<(), String> {
    let mut mounts: BTreeMap<NodeId, BTreeMap<String, ContainerKind>> = BTreeMap::new();
    for record in log {
        match &record.event {
            FleetLogEvent::Mounted { container, kind } => {
                mounts
                    .entry(record.node)
                    .or_default()
                    .insert(container.clone(), *kind);
            }
            FleetLogEvent::Unmounted { container } => {
                mounts.entry(record.node).or_default().remove(container);
            }
            FleetLogEvent::WorkloadStarted { job, phase } => {
                let node_mounts = mounts.entry(record.node).or_default();
                let inputs = node_mounts
                    .values()
                    .filter(|k| **k == ContainerKind::Input)
                    .count();
                let outputs = node_mounts
                    .values()
                    .filter(|k| **k == ContainerKind::Output)
                    .count();
                if inputs != 1 || outputs != 1 {
                    return Err(format!(
                        "{} started {job}/{phase} on {} with {inputs} input / {outputs} output mounts",
                        record.t, record.node
                    ));
                }
            }
            _ => {}
        }
    }
    for (node, node_mounts) in &mounts {
        for container in node_mounts.keys() {
            if released_containers.iter().any(|c| c == container) {
                return Err(format!(
                    "container {container} of a terminal job is still mounted on {node}"
                ));
            }
        }
    }
    Ok(())
}

/// Deterministic synthetic artifact for a completed phase: a small header
/// plus digest-expanded filler, so downloads have stable checksums.
fn synth_artifact(node: NodeId, job: JobId, phase: Phase, at: SimTime) -> WorkloadArtifact {
    let path = match phase {
        Phase::Processing => format!("staging/{job}-processed.bin"),
        Phase::Training => "model.nerf".to_string(),
    };
    let header = format!(
        "{{\"job\":\"{job}\",\"phase\":\"{phase}\",\"node\":\"{node}\",\"t\":{}}}\n",
        at.as_nanos()
    );
    let mut bytes = header.into_bytes();
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let mut block = hasher.finalize_reset().to_vec();
    while bytes.len() < 1024 {
        hasher.update(&block);
        block = hasher.finalize_reset().to_vec();
        bytes.extend_from_slice(&block);
    }
    bytes.truncate(1024);
    WorkloadArtifact { path, bytes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::ContainerKind;

    fn fleet() -> Fleet {
        Fleet::new(ClockMode::Virtual, 7, ColdStartModel::default())
    }

    fn fleet_fixed(mean_s: f64) -> Fleet {
        Fleet::new(
            ClockMode::Virtual,
            7,
            ColdStartModel {
                mean_s,
                std_s: 0.0,
                floor_s: 0.0,
            },
        )
    }

    fn container(name: &str, kind: ContainerKind) -> ContainerRef {
        ContainerRef {
            name: name.to_string(),
            kind,
            created_at: SimTime::ZERO,
        }
    }

    fn make_ready(fleet: &mut Fleet, class: NodeClass) -> NodeId {
        let id = fleet.provision_node(class);
        let wait = fleet.node(id).unwrap().cold_start_duration;
        fleet.advance(wait);
        assert_eq!(fleet.node(id).unwrap().state, NodeState::Ready);
        id
    }

    #[test]
    fn provision_sample_mean_matches_model() {
        let mut f = fleet();
        let mut total = 0.0;
        for _ in 0..10 {
            let id = f.provision_node(NodeClass::Spot);
            total += f.node(id).unwrap().cold_start_duration_s();
        }
        let mean = total / 10.0;
        assert!(
            (mean - 70.517).abs() < 0.5,
            "sample mean {mean} outside 70.517 +/- 0.5"
        );
    }

    #[test]
    fn zero_std_is_degenerate() {
        let mut f = fleet_fixed(70.517);
        let id = f.provision_node(NodeClass::Spot);
        assert_eq!(
            f.node(id).unwrap().cold_start_duration,
            SimDuration::from_secs_f64(70.517)
        );
    }

    #[test]
    fn ready_exactly_at_threshold() {
        let mut f = fleet_fixed(5.0);
        let id = f.provision_node(NodeClass::Spot);
        f.advance(SimDuration::from_secs_f64(4.9));
        assert_eq!(f.node(id).unwrap().state, NodeState::ColdStarting);
        f.advance(SimDuration::from_secs_f64(0.1));
        assert_eq!(f.node(id).unwrap().state, NodeState::Ready);
        let events = f.drain_events();
        assert!(matches!(events.last(), Some(FleetEvent::NodeReady { at, .. })
            if *at == SimTime::ZERO + SimDuration::from_secs_f64(5.0)));
    }

    #[test]
    fn deallocate_ready_clears_mounts() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("c-in", ContainerKind::Input)).unwrap();
        f.deallocate_node(id).unwrap();
        let node = f.node(id).unwrap();
        assert_eq!(node.state, NodeState::Deallocated);
        assert!(node.mounted_containers.is_empty());
    }

    #[test]
    fn deallocate_busy_is_illegal() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        f.run_workload(
            id,
            JobId::from_u64(1),
            Phase::Processing,
            SimDuration::from_secs_f64(10.0),
            &TraceProfile::default(),
        )
        .unwrap();
        let err = f.deallocate_node(id).unwrap_err();
        assert!(matches!(err, FleetError::IllegalTransition { .. }));
    }

    #[test]
    fn evicted_node_can_deallocate() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.inject_eviction(id, SimDuration::from_secs_f64(30.0)).unwrap();
        f.advance(SimDuration::from_secs_f64(30.0));
        assert_eq!(f.node(id).unwrap().state, NodeState::Evicted);
        f.deallocate_node(id).unwrap();
        assert_eq!(f.node(id).unwrap().state, NodeState::Deallocated);
    }

    #[test]
    fn eviction_of_busy_node_displaces_job() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        let job = JobId::from_u64(9);
        f.run_workload(
            id,
            job,
            Phase::Training,
            SimDuration::from_secs_f64(100.0),
            &TraceProfile::default(),
        )
        .unwrap();
        f.drain_events();
        f.inject_eviction(id, SimDuration::from_secs_f64(30.0)).unwrap();
        let events = f.drain_events();
        assert!(matches!(
            &events[..],
            [FleetEvent::EvictionNotice { displaced_job: Some(j), .. }] if *j == job
        ));
        assert_eq!(f.node(id).unwrap().state, NodeState::Evicting);
        // the aborted workload never completes
        f.advance(SimDuration::from_secs_f64(200.0));
        let later = f.drain_events();
        assert!(later
            .iter()
            .all(|e| !matches!(e, FleetEvent::WorkloadComplete { .. })));
        assert_eq!(f.node(id).unwrap().state, NodeState::Evicted);
    }

    #[test]
    fn eviction_notice_precedes_evicted_transition() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.inject_eviction(id, SimDuration::from_secs_f64(30.0)).unwrap();
        f.advance(SimDuration::from_secs_f64(60.0));
        let events = f.drain_events();
        let notice_pos = events
            .iter()
            .position(|e| matches!(e, FleetEvent::EvictionNotice { .. }))
            .unwrap();
        let evicted_pos = events
            .iter()
            .position(|e| matches!(e, FleetEvent::NodeEvicted { .. }))
            .unwrap();
        assert!(notice_pos < evicted_pos);
    }

    #[test]
    fn container_instance_cannot_be_evicted() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::ContainerInstance);
        let err = f
            .inject_eviction(id, SimDuration::from_secs_f64(30.0))
            .unwrap_err();
        assert_eq!(
            err,
            FleetError::UnsupportedClass {
                node: id,
                class: NodeClass::ContainerInstance
            }
        );
    }

    #[test]
    fn metrics_constant_trace() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        f.run_workload(
            id,
            JobId::from_u64(1),
            Phase::Processing,
            SimDuration::from_secs_f64(20.0),
            &TraceProfile::constant(0.27, 512.0),
        )
        .unwrap();
        f.advance(SimDuration::from_secs_f64(20.0));
        let m = f.sample_metrics(id, SimDuration::from_secs_f64(60.0)).unwrap();
        assert!((m.avg_cpu - 0.27).abs() < 1e-12);
        assert_eq!(m.peak_cpu, 0.27);
    }

    #[test]
    fn metrics_alternating_trace() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        let profile = TraceProfile {
            cpu: vec![0.9, 0.0],
            mem_mb: vec![100.0, 100.0],
            sample_interval_s: 1.0,
        };
        f.run_workload(
            id,
            JobId::from_u64(1),
            Phase::Processing,
            SimDuration::from_secs_f64(20.0),
            &profile,
        )
        .unwrap();
        f.advance(SimDuration::from_secs_f64(20.0));
        let m = f.sample_metrics(id, SimDuration::from_secs_f64(60.0)).unwrap();
        assert!((m.avg_cpu - 0.45).abs() < 1e-12);
        assert_eq!(m.peak_cpu, 0.9);
    }

    #[test]
    fn metrics_peak_memory_passthrough() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        let profile = TraceProfile::with_stats(0.17, 0.65, 1000.0, 2543.0, 10).unwrap();
        f.run_workload(
            id,
            JobId::from_u64(1),
            Phase::Training,
            SimDuration::from_secs_f64(30.0),
            &profile,
        )
        .unwrap();
        f.advance(SimDuration::from_secs_f64(30.0));
        let m = f.sample_metrics(id, SimDuration::from_secs_f64(60.0)).unwrap();
        assert_eq!(m.peak_mem_mb, 2543.0);
        assert!(m.peak_cpu >= m.avg_cpu);
    }

    #[test]
    fn metrics_require_trace_data() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        let err = f
            .sample_metrics(id, SimDuration::from_secs_f64(60.0))
            .unwrap_err();
        assert_eq!(err, FleetError::NoData(id));
    }

    #[test]
    fn workload_requires_both_mounts() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        let err = f
            .run_workload(
                id,
                JobId::from_u64(1),
                Phase::Processing,
                SimDuration::from_secs_f64(5.0),
                &TraceProfile::default(),
            )
            .unwrap_err();
        assert!(matches!(err, FleetError::MountDiscipline { .. }));
    }

    #[test]
    fn zero_duration_completes_immediately() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        f.drain_events();
        f.run_workload(
            id,
            JobId::from_u64(1),
            Phase::Training,
            SimDuration::ZERO,
            &TraceProfile::default(),
        )
        .unwrap();
        let events = f.drain_events();
        assert!(events
            .iter()
            .any(|e| matches!(e, FleetEvent::WorkloadComplete { artifact, .. }
                if artifact.path == "model.nerf" && !artifact.bytes.is_empty())));
        assert_eq!(f.node(id).unwrap().state, NodeState::Ready);
    }

    #[test]
    fn mount_is_idempotent_and_unmount_checks_existence() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        let c = container("c", ContainerKind::Input);
        assert!(f.mount(id, &c).unwrap());
        assert!(!f.mount(id, &c).unwrap());
        assert_eq!(f.node(id).unwrap().mounted_containers.len(), 1);
        f.unmount(id, "c").unwrap();
        let err = f.unmount(id, "c").unwrap_err();
        assert!(matches!(err, FleetError::MountNotFound { .. }));
    }

    #[test]
    fn log_replay_is_legal() {
        let mut f = fleet_fixed(1.0);
        let a = make_ready(&mut f, NodeClass::Spot);
        let b = make_ready(&mut f, NodeClass::ContainerInstance);
        f.mount(a, &container("in", ContainerKind::Input)).unwrap();
        f.mount(a, &container("out", ContainerKind::Output)).unwrap();
        f.run_workload(
            a,
            JobId::from_u64(1),
            Phase::Processing,
            SimDuration::from_secs_f64(10.0),
            &TraceProfile::default(),
        )
        .unwrap();
        f.advance(SimDuration::from_secs_f64(5.0));
        f.inject_eviction(a, SimDuration::from_secs_f64(30.0)).unwrap();
        f.advance(SimDuration::from_secs_f64(60.0));
        f.deallocate_node(a).unwrap();
        f.deallocate_node(b).unwrap();

        let mut classes: BTreeMap<NodeId, NodeClass> = BTreeMap::new();
        let mut states: BTreeMap<NodeId, NodeState> = BTreeMap::new();
        let mut last_t = SimTime::ZERO;
        for record in f.log() {
            assert!(record.t >= last_t, "log timestamps must not regress");
            last_t = record.t;
            match &record.event {
                FleetLogEvent::Provisioned { class } => {
                    classes.insert(record.node, *class);
                    states.insert(record.node, NodeState::Deallocated);
                }
                FleetLogEvent::StateChanged { from, to } => {
                    assert_eq!(states[&record.node], *from);
                    assert!(
                        legal_transition(*from, *to, classes[&record.node]),
                        "illegal {from} -> {to}"
                    );
                    states.insert(record.node, *to);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let run = || {
            let mut f = Fleet::new(ClockMode::Virtual, 99, ColdStartModel::default());
            let a = f.provision_node(NodeClass::Spot);
            let b = f.provision_node(NodeClass::Spot);
            f.advance(SimDuration::from_secs_f64(120.0));
            (
                f.node(a).unwrap().cold_start_duration,
                f.node(b).unwrap().cold_start_duration,
                f.export_log(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn busy_iff_current_job() {
        let mut f = fleet_fixed(1.0);
        let id = make_ready(&mut f, NodeClass::Spot);
        f.mount(id, &container("in", ContainerKind::Input)).unwrap();
        f.mount(id, &container("out", ContainerKind::Output)).unwrap();
        assert!(f.node(id).unwrap().current_job.is_none());
        f.run_workload(
            id,
            JobId::from_u64(3),
            Phase::Processing,
            SimDuration::from_secs_f64(4.0),
            &TraceProfile::default(),
        )
        .unwrap();
        assert_eq!(f.node(id).unwrap().state, NodeState::Busy);
        assert!(f.node(id).unwrap().current_job.is_some());
        f.advance(SimDuration::from_secs_f64(4.0));
        assert_eq!(f.node(id).unwrap().state, NodeState::Ready);
        assert!(f.node(id).unwrap().current_job.is_none());
    }
}
