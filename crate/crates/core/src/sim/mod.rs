//! Deterministic simulator of an Elasticsearch-on-Kubernetes cluster.
//!
//! The simulator models three layers the agent can observe and act on:
//!
//! - host OS: a data mount shared between ES and foreign applications, NIC
//!   bond statistics, NVMe SMART attributes, thermal readings and a dmesg ring;
//! - Kubernetes: pods pinned to their home host, DiskPressure eviction and a
//!   single controller pass per simulated second;
//! - Elasticsearch: indices, shard copies and the GREEN/YELLOW/RED health color.
//!
//! Everything is driven by a seeded PRNG and a virtual clock. Given the same
//! seed, cluster spec, fault schedule and tick sequence, the event log is
//! byte-identical across runs.

mod commands;
mod faults;
mod scenario;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::perfmodel::{self, ScalingCoefficients};

pub use commands::{human_size, is_specific_index_name, EsResponse};
pub use faults::{FaultKind, FaultSpec};
pub use scenario::Scenario;

/// Decimal gigabyte, used for every size the simulator renders.
pub const GB: u64 = 1_000_000_000;

/// Directory under the data mount that holds the cluster's own data.
pub const ES_DATA_DIR: &str = "esdata";

/// Name of the mount point shared by ES data and foreign application data.
pub const DATA_MOUNT: &str = "/mnt";

pub const NAMESPACE: &str = "elasticsearch-benchmark";

/// Errors raised by simulator operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid cluster spec: {0}")]
    Config(String),
    #[error("unknown fault target: {0}")]
    UnknownTarget(String),
    #[error("unsupported command: {0}")]
    Unsupported(String),
    #[error("command failed: {0}")]
    CommandFailed(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    Request(String),
    #[error("probe unavailable: cluster is {0}")]
    ProbeUnavailable(Health),
    #[error("tick duration must be positive")]
    InvalidTick,
}

// ---------------------------------------------------------------------------
// Cluster spec
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HostSpec {
    pub id: String,
    pub mount_capacity_bytes: u64,
    pub es_used_bytes: u64,
}

impl HostSpec {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            mount_capacity_bytes: 420 * GB,
            es_used_bytes: 8_400_000_000,
        }
    }
}

impl Default for HostSpec {
    fn default() -> Self {
        Self::new("host")
    }
}

/// Shape of the simulated cluster. Every field has a default so scenario
/// files only need to spell out what differs from the benchmark cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSpec {
    pub hosts: Vec<HostSpec>,
    pub masters: u32,
    pub data_pods: u32,
    pub indices: u32,
    pub primaries_per_index: u32,
    pub replicas: u32,
    pub gb_per_shard: f64,
    /// Explicit pod → host bindings. Pods not listed are placed round-robin.
    pub placement: BTreeMap<String, String>,
    pub eviction_threshold_pct: f64,
    pub es_version: String,
    pub primary_recovery_s: u64,
    pub replica_recovery_s: u64,
    pub dmesg_capacity: usize,
    pub log_capacity: usize,
    pub nvme_wear_pct_per_hour: f64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            hosts: ["s797", "s811", "s812"].iter().map(|h| HostSpec::new(h)).collect(),
            masters: 3,
            data_pods: 12,
            indices: 168,
            primaries_per_index: 5,
            replicas: 1,
            gb_per_shard: 3.72,
            placement: BTreeMap::new(),
            eviction_threshold_pct: 85.0,
            es_version: "8.17.0".to_string(),
            primary_recovery_s: 10,
            replica_recovery_s: 60,
            dmesg_capacity: 256,
            log_capacity: 200,
            nvme_wear_pct_per_hour: 0.0005,
        }
    }
}

impl ClusterSpec {
    pub fn minimal() -> Self {
        Self {
            hosts: vec![HostSpec::new("s797")],
            masters: 1,
            data_pods: 1,
            indices: 4,
            primaries_per_index: 1,
            replicas: 0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.hosts.is_empty() {
            return Err(SimError::Config("at least one host required".into()));
        }
        if self.masters == 0 {
            return Err(SimError::Config("at least one master pod required".into()));
        }
        if self.data_pods == 0 {
            return Err(SimError::Config("at least one data pod required".into()));
        }
        if self.primaries_per_index == 0 {
            return Err(SimError::Config("primary_count must be >= 1".into()));
        }
        if self.replicas >= self.data_pods && self.indices > 0 {
            return Err(SimError::Config(format!(
                "{} replicas cannot be placed on {} data pods",
                self.replicas, self.data_pods
            )));
        }
        if !(self.gb_per_shard >= 0.0) {
            return Err(SimError::Config("gb_per_shard must be >= 0".into()));
        }
        if !(self.eviction_threshold_pct > 0.0 && self.eviction_threshold_pct <= 100.0) {
            return Err(SimError::Config("eviction threshold must be in (0, 100]".into()));
        }
        for h in &self.hosts {
            if h.mount_capacity_bytes == 0 {
                return Err(SimError::Config(format!("host {} has zero mount capacity", h.id)));
            }
            if h.es_used_bytes > h.mount_capacity_bytes {
                return Err(SimError::Config(format!("host {} overfilled at start", h.id)));
            }
        }
        for (pod, host) in &self.placement {
            if !self.hosts.iter().any(|h| &h.id == host) {
                return Err(SimError::Config(format!("placement of {pod} names unknown host {host}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NicState {
    pub error_count: u64,
    pub retransmit_rate: f64,
    pub bond_degraded: bool,
    #[serde(skip)]
    error_residue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NvmeState {
    pub wear_level_pct: f64,
    pub media_errors: u64,
    pub read_latency_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostState {
    pub host_id: String,
    pub mount_capacity_bytes: u64,
    pub es_used_bytes: u64,
    /// Foreign application directories under the data mount, by name.
    pub foreign_dirs: BTreeMap<String, u64>,
    pub nic: NicState,
    pub nvme: NvmeState,
    pub dmesg_ring: VecDeque<String>,
    pub thermal_c: f64,
}

impl HostState {
    pub fn foreign_used_bytes(&self) -> u64 {
        self.foreign_dirs.values().sum()
    }

    pub fn used_bytes(&self) -> u64 {
        self.es_used_bytes + self.foreign_used_bytes()
    }

    pub fn free_bytes(&self) -> u64 {
        self.mount_capacity_bytes.saturating_sub(self.used_bytes())
    }

    /// Fraction of the data mount in use, in `[0, 1]`.
    pub fn disk_pct(&self) -> f64 {
        self.used_bytes() as f64 / self.mount_capacity_bytes as f64
    }

    /// Usage in basis points, exact integer arithmetic.
    pub fn disk_bp(&self) -> u64 {
        ((self.used_bytes() as u128 * 10_000) / self.mount_capacity_bytes as u128) as u64
    }

    /// Whole-percent usage as printed by `df`, truncated.
    pub fn df_pct(&self) -> u64 {
        self.disk_bp() / 100
    }

    fn push_dmesg(&mut self, line: String, cap: usize) {
        if self.dmesg_ring.len() == cap {
            self.dmesg_ring.pop_front();
        }
        self.dmesg_ring.push_back(line);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodRole {
    Master,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Running,
    Evicted,
    Terminated,
}

impl fmt::Display for PodPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PodPhase::Pending => "Pending",
            PodPhase::Running => "Running",
            PodPhase::Evicted => "Evicted",
            PodPhase::Terminated => "Terminated",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LogLevel {
    Info,
    Warn,
    Error,
}

impl LogLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            LogLevel::Info => "INFO",
            LogLevel::Warn => "WARN",
            LogLevel::Error => "ERROR",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub at_s: u64,
    pub level: LogLevel,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PodState {
    pub pod_id: String,
    pub role: PodRole,
    pub phase: PodPhase,
    pub host_binding: Option<String>,
    /// Host holding this pod's local persistent volume.
    pub home_host: String,
    pub heap_pct: f64,
    pub gc_young_count: u64,
    pub segment_count: u64,
    pub restarts: u32,
    pub version: String,
    pub pending_reason: Option<String>,
    pub log_ring: VecDeque<LogLine>,
    heap_leak_pct: f64,
    terminated_until_s: Option<u64>,
}

impl PodState {
    pub fn is_running(&self) -> bool {
        self.phase == PodPhase::Running
    }

    fn push_log(&mut self, line: LogLine, cap: usize) {
        if self.log_ring.len() == cap {
            self.log_ring.pop_front();
        }
        self.log_ring.push_back(line);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardCopy {
    pub primary: bool,
    pub pod: String,
    /// Sim time at which this copy finishes recovery; `None` while its pod is down.
    pub started_at_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardState {
    pub number: u32,
    pub store_bytes: u64,
    pub copies: Vec<ShardCopy>,
    pub no_valid_shard_copy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexState {
    pub index_name: String,
    pub primary_count: u32,
    pub replica_count: u32,
    pub shards: Vec<ShardState>,
}

impl IndexState {
    pub fn store_bytes(&self) -> u64 {
        self.shards.iter().map(|s| s.store_bytes).sum()
    }

    pub fn has_no_valid_copy(&self) -> bool {
        self.shards.iter().any(|s| s.no_valid_shard_copy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Health {
    Red,
    Yellow,
    Green,
}

impl Health {
    /// Gauge encoding used by the metrics exporter.
    pub fn gauge(self) -> u8 {
        match self {
            Health::Green => 2,
            Health::Yellow => 1,
            Health::Red => 0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Health::Green => "green",
            Health::Yellow => "yellow",
            Health::Red => "red",
        }
    }
}

impl fmt::Display for Health {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Health::Green => "GREEN",
            Health::Yellow => "YELLOW",
            Health::Red => "RED",
        })
    }
}

/// A Kubernetes-style event record, as shown by `kubectl get events`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct K8sEvent {
    pub at_s: u64,
    pub warning: bool,
    pub reason: String,
    pub object: String,
    pub message: String,
}

/// Index-level settings the simulator reacts to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppliedSettings {
    pub refresh_interval_s: Option<u64>,
    pub translog_async: bool,
    pub merge_traffic_reduced: bool,
}

impl AppliedSettings {
    pub fn tuned(&self) -> bool {
        self.refresh_interval_s == Some(30) && self.translog_async
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub sim_time_s: u64,
    pub hosts: Vec<HostState>,
    pub pods: Vec<PodState>,
    pub indices: Vec<IndexState>,
    pub quorum: bool,
    pub health: Health,
    pub rng_seed: u64,
    pub eviction_threshold_pct: f64,
    pub settings: AppliedSettings,
    pub k8s_events: VecDeque<K8sEvent>,
    pub es_version: String,
}

impl ClusterState {
    pub fn host(&self, id: &str) -> Option<&HostState> {
        self.hosts.iter().find(|h| h.host_id == id)
    }

    pub fn pod(&self, id: &str) -> Option<&PodState> {
        self.pods.iter().find(|p| p.pod_id == id)
    }

    pub fn index(&self, name: &str) -> Option<&IndexState> {
        self.indices.iter().find(|i| i.index_name == name)
    }

    pub fn count_phase(&self, phase: PodPhase) -> usize {
        self.pods.iter().filter(|p| p.phase == phase).count()
    }

    pub fn masters_running(&self) -> usize {
        self.pods
            .iter()
            .filter(|p| p.role == PodRole::Master && p.is_running())
            .count()
    }

    pub fn masters_total(&self) -> usize {
        self.pods.iter().filter(|p| p.role == PodRole::Master).count()
    }

    pub fn primary_shard_count(&self) -> u64 {
        self.indices.iter().map(|i| i.primary_count as u64).sum()
    }

    /// Mean primary store size in decimal GB.
    pub fn gb_per_shard(&self) -> f64 {
        let shards: u64 = self.indices.iter().map(|i| i.shards.len() as u64).sum();
        if shards == 0 {
            return 0.0;
        }
        let bytes: u64 = self.indices.iter().map(|i| i.store_bytes()).sum();
        bytes as f64 / shards as f64 / GB as f64
    }

    /// SHA-256 over the canonical JSON form; equal hashes mean equal state.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("cluster state serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn disk_pressured(&self, host: &HostState) -> bool {
        let threshold_bp = (self.eviction_threshold_pct * 100.0).round() as u64;
        host.disk_bp() >= threshold_bp
    }

    pub fn host_pressured(&self, host_id: &str) -> bool {
        self.host(host_id).is_some_and(|h| self.disk_pressured(h))
    }
}

/// Cluster health as a pure function of quorum and shard-copy state.
pub fn derive_health(state: &ClusterState) -> Health {
    if !state.quorum {
        return Health::Red;
    }
    let now = state.sim_time_s;
    let running: BTreeMap<&str, bool> = state
        .pods
        .iter()
        .map(|p| (p.pod_id.as_str(), p.is_running()))
        .collect();
    let mut yellow = false;
    for index in &state.indices {
        for shard in &index.shards {
            if shard.no_valid_shard_copy {
                return Health::Red;
            }
            let started = shard
                .copies
                .iter()
                .filter(|c| {
                    running.get(c.pod.as_str()).copied().unwrap_or(false)
                        && c.started_at_s.is_some_and(|t| t <= now)
                })
                .count();
            if started == 0 {
                return Health::Red;
            }
            if started < shard.copies.len() {
                yellow = true;
            }
        }
    }
    if yellow {
        Health::Yellow
    } else {
        Health::Green
    }
}

/// Majority of master pods running.
pub fn derive_quorum(state: &ClusterState) -> bool {
    let total = state.masters_total();
    total > 0 && state.masters_running() > total / 2
}

// ---------------------------------------------------------------------------
// Events and probes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub at_s: u64,
    pub kind: String,
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    WriteBulk { docs: u32 },
    MatchAll,
    TermStatus,
    RangeTimestamp,
    BoolCompound,
}

impl Probe {
    pub const QUERIES: [Probe; 4] = [
        Probe::MatchAll,
        Probe::TermStatus,
        Probe::RangeTimestamp,
        Probe::BoolCompound,
    ];

    pub fn name(&self) -> String {
        match self {
            Probe::WriteBulk { docs } => format!("write_bulk_{docs}"),
            Probe::MatchAll => "match_all".into(),
            Probe::TermStatus => "term_status".into(),
            Probe::RangeTimestamp => "range_timestamp".into(),
            Probe::BoolCompound => "bool_compound".into(),
        }
    }

    /// Cost relative to `term_status`, the probe the scaling model describes.
    /// Ratios follow the calibrated baseline table (18/20, 12/20, 21/20).
    fn query_weight(&self) -> f64 {
        match self {
            Probe::MatchAll => 0.9,
            Probe::TermStatus => 1.0,
            Probe::RangeTimestamp => 0.6,
            Probe::BoolCompound => 1.05,
            Probe::WriteBulk { .. } => 1.0,
        }
    }
}

/// Knobs for latency generation, separate from the cluster's shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimOptions {
    pub zero_noise: bool,
    pub noise_sigma: f64,
    pub coefficients: ScalingCoefficients,
    /// Retransmit rate (errors/s) at which NIC trouble doubles probe latency.
    pub nic_penalty_scale: f64,
    /// Extra latency fraction per heap percent above 75%.
    pub heap_penalty_per_pct: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            zero_noise: false,
            noise_sigma: 0.10,
            coefficients: ScalingCoefficients::table_fit(),
            nic_penalty_scale: 50.0,
            heap_penalty_per_pct: 0.02,
        }
    }
}

impl SimOptions {
    pub fn zero_noise() -> Self {
        Self {
            zero_noise: true,
            ..Self::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

const BASE_RETRANSMIT_RATE: f64 = 0.2;
const BASE_NVME_LATENCY_US: f64 = 85.0;
const BASE_THERMAL_C: f64 = 52.0;
const BASE_SEGMENTS: u64 = 120;

/// Single-threaded deterministic cluster simulator.
pub struct Simulator {
    state: ClusterState,
    spec: ClusterSpec,
    options: SimOptions,
    rng: ChaCha8Rng,
    probe_rng: ChaCha8Rng,
    faults: Vec<faults::ActiveFault>,
    events: Vec<SimEvent>,
    pending_events: Vec<SimEvent>,
    probes_run: u64,
}

impl Simulator {
    /// Builds a fresh cluster: every pod Running, every shard started, GREEN.
    pub fn new(spec: ClusterSpec, seed: u64, options: SimOptions) -> Result<Self, SimError> {
        spec.validate()?;
        let hosts: Vec<HostState> = spec
            .hosts
            .iter()
            .enumerate()
            .map(|(i, h)| HostState {
                host_id: h.id.clone(),
                mount_capacity_bytes: h.mount_capacity_bytes,
                es_used_bytes: h.es_used_bytes,
                foreign_dirs: BTreeMap::new(),
                nic: NicState {
                    error_count: 0,
                    retransmit_rate: BASE_RETRANSMIT_RATE,
                    bond_degraded: false,
                    error_residue: 0.0,
                },
                nvme: NvmeState {
                    wear_level_pct: 12.0 + i as f64,
                    media_errors: 0,
                    read_latency_us: BASE_NVME_LATENCY_US,
                },
                dmesg_ring: VecDeque::from([
                    format!("[    0.000000] Linux version 5.15.0 ({})", h.id),
                    "[    4.102311] nvme nvme0: 64/0/0 default/read/poll queues".to_string(),
                    "[    6.551020] bnxt_en 0000:3b:00.1 eno2np1: Broadcom BCM57416 NetXtreme-E found".to_string(),
                    "[    9.310445] bond0: (slave eno2np1): Enslaving as an active interface with an up link".to_string(),
                ]),
                thermal_c: BASE_THERMAL_C,
            })
            .collect();

        let mut pods = Vec::new();
        let host_ids: Vec<&str> = spec.hosts.iter().map(|h| h.id.as_str()).collect();
        let mut place = |pod_id: String, role: PodRole, ordinal: usize| {
            let home = spec
                .placement
                .get(&pod_id)
                .cloned()
                .unwrap_or_else(|| host_ids[ordinal % host_ids.len()].to_string());
            let heap = if role == PodRole::Master { 30.0 } else { 52.0 };
            pods.push(PodState {
                pod_id,
                role,
                phase: PodPhase::Running,
                host_binding: Some(home.clone()),
                home_host: home,
                heap_pct: heap,
                gc_young_count: 0,
                segment_count: BASE_SEGMENTS,
                restarts: 0,
                version: spec.es_version.clone(),
                pending_reason: None,
                log_ring: VecDeque::new(),
                heap_leak_pct: 0.0,
                terminated_until_s: None,
            });
        };
        for m in 0..spec.masters as usize {
            place(format!("es-master-{m}"), PodRole::Master, m);
        }
        for d in 0..spec.data_pods as usize {
            place(format!("es-data-{d}"), PodRole::Data, d);
        }

        let data_ids: Vec<String> = (0..spec.data_pods).map(|d| format!("es-data-{d}")).collect();
        let store = (spec.gb_per_shard * GB as f64).round() as u64;
        let mut ordinal = 0usize;
        let indices = (0..spec.indices)
            .map(|i| {
                let name = format!("logs-{:06}", i + 1);
                let shards = (0..spec.primaries_per_index)
                    .map(|n| {
                        let shard = ShardState {
                            number: n,
                            store_bytes: store,
                            copies: place_copies(&data_ids, ordinal, spec.replicas, Some(0)),
                            no_valid_shard_copy: false,
                        };
                        ordinal += 1;
                        shard
                    })
                    .collect();
                IndexState {
                    index_name: name,
                    primary_count: spec.primaries_per_index,
                    replica_count: spec.replicas,
                    shards,
                }
            })
            .collect();

        let mut state = ClusterState {
            sim_time_s: 0,
            hosts,
            pods,
            indices,
            quorum: true,
            health: Health::Green,
            rng_seed: seed,
            eviction_threshold_pct: spec.eviction_threshold_pct,
            settings: AppliedSettings::default(),
            k8s_events: VecDeque::new(),
            es_version: spec.es_version.clone(),
        };
        state.quorum = derive_quorum(&state);
        state.health = derive_health(&state);

        Ok(Self {
            state,
            spec,
            options,
            rng: ChaCha8Rng::seed_from_u64(seed),
            probe_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            faults: Vec::new(),
            events: Vec::new(),
            pending_events: Vec::new(),
            probes_run: 0,
        })
    }

    pub fn state(&self) -> &ClusterState {
        &self.state
    }

    /// Immutable copy safe to hand to other modules or threads.
    pub fn snapshot(&self) -> ClusterState {
        self.state.clone()
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn options(&self) -> &SimOptions {
        &self.options
    }

    pub fn now(&self) -> u64 {
        self.state.sim_time_s
    }

    pub fn health(&self) -> Health {
        self.state.health
    }

    /// Full event log since construction.
    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }

    /// Number of probe requests issued so far.
    pub fn probe_count(&self) -> u64 {
        self.probes_run
    }

    pub fn active_fault_count(&self) -> usize {
        self.faults.iter().filter(|f| f.active).count()
    }

    /// Advances the clock by `dt_s` one-second steps.
    pub fn tick(&mut self, dt_s: u64) -> Result<Vec<SimEvent>, SimError> {
        if dt_s == 0 {
            return Err(SimError::InvalidTick);
        }
        let mark = self.events.len();
        self.flush_pending();
        for _ in 0..dt_s {
            self.step();
        }
        Ok(self.events[mark..].to_vec())
    }

    fn step(&mut self) {
        self.state.sim_time_s += 1;
        let now = self.state.sim_time_s;
        self.apply_faults(now);
        self.workload(now);
        self.controller_pass(now);
        self.recompute(now);
        self.flush_pending();
    }

    fn emit(&mut self, kind: &str, subject: &str, message: String) {
        self.pending_events.push(SimEvent {
            at_s: self.state.sim_time_s,
            kind: kind.to_string(),
            subject: subject.to_string(),
            message,
        });
    }

    fn flush_pending(&mut self) {
        self.events.append(&mut self.pending_events);
    }

    fn k8s_event(&mut self, warning: bool, reason: &str, object: String, message: String) {
        if self.state.k8s_events.len() == 500 {
            self.state.k8s_events.pop_front();
        }
        self.emit("k8s", &object, format!("{reason}: {message}"));
        self.state.k8s_events.push_back(K8sEvent {
            at_s: self.state.sim_time_s,
            warning,
            reason: reason.to_string(),
            object,
            message,
        });
    }

    fn workload(&mut self, now: u64) {
        let log_cap = self.spec.log_capacity;
        let wear_step = self.spec.nvme_wear_pct_per_hour / 3600.0;
        for host in &mut self.state.hosts {
            host.thermal_c = BASE_THERMAL_C + self.rng.random_range(-1.0..1.0);
            host.nvme.read_latency_us = BASE_NVME_LATENCY_US + self.rng.random_range(-5.0..5.0);
            host.nvme.wear_level_pct = (host.nvme.wear_level_pct + wear_step).min(100.0);
        }
        let retransmit: BTreeMap<String, f64> = self
            .state
            .hosts
            .iter()
            .map(|h| (h.host_id.clone(), h.nic.retransmit_rate))
            .collect();
        for pod in &mut self.state.pods {
            if !pod.is_running() {
                continue;
            }
            let base = if pod.role == PodRole::Master { 30.0 } else { 52.0 };
            let jitter: f64 = self.rng.random_range(-1.5..1.5);
            pod.heap_pct = (base + jitter + pod.heap_leak_pct).clamp(0.0, 100.0);
            pod.gc_young_count += 1;
            if pod.role == PodRole::Data && self.rng.random_bool(0.2) {
                pod.segment_count += 1;
            }
            if now.is_multiple_of(60) {
                pod.push_log(
                    LogLine {
                        at_s: now,
                        level: LogLevel::Info,
                        message: "[o.e.c.r.a.AllocationService] cluster state applied".into(),
                    },
                    log_cap,
                );
                if pod.heap_pct >= 90.0 {
                    pod.push_log(
                        LogLine {
                            at_s: now,
                            level: LogLevel::Error,
                            message: "[o.e.i.b.HierarchyCircuitBreakerService] [parent] Data too large".into(),
                        },
                        log_cap,
                    );
                } else if pod.heap_pct >= 75.0 {
                    pod.push_log(
                        LogLine {
                            at_s: now,
                            level: LogLevel::Warn,
                            message: "[o.e.m.j.JvmGcMonitorService] [gc][young] overhead, spent collecting in the last [1s]".into(),
                        },
                        log_cap,
                    );
                }
                let rate = pod
                    .host_binding
                    .as_ref()
                    .and_then(|h| retransmit.get(h))
                    .copied()
                    .unwrap_or(0.0);
                if rate >= 5.0 {
                    pod.push_log(
                        LogLine {
                            at_s: now,
                            level: LogLevel::Warn,
                            message: format!("[o.e.t.TcpTransport] slow transport round-trip, retransmits {rate:.1}/s"),
                        },
                        log_cap,
                    );
                }
            }
        }
    }

    fn controller_pass(&mut self, now: u64) {
        // restart pods whose kill window elapsed
        for i in 0..self.state.pods.len() {
            let pod = &mut self.state.pods[i];
            if pod.phase == PodPhase::Terminated && pod.terminated_until_s.is_some_and(|t| now >= t) {
                pod.phase = PodPhase::Pending;
                pod.terminated_until_s = None;
                pod.pending_reason = None;
            }
        }

        let pressured: Vec<(String, u64)> = self
            .state
            .hosts
            .iter()
            .filter(|h| self.state.disk_pressured(h))
            .map(|h| (h.host_id.clone(), h.df_pct()))
            .collect();
        let threshold = self.state.eviction_threshold_pct;

        for (host, pct) in &pressured {
            let victims: Vec<usize> = self
                .state
                .pods
                .iter()
                .enumerate()
                .filter(|(_, p)| p.is_running() && p.host_binding.as_deref() == Some(host))
                .map(|(i, _)| i)
                .collect();
            for i in victims {
                let id = self.state.pods[i].pod_id.clone();
                self.state.pods[i].phase = PodPhase::Evicted;
                self.k8s_event(
                    true,
                    "Evicted",
                    format!("pod/{id}"),
                    format!("The node {host} was low on resource: ephemeral-storage (DiskPressure)"),
                );
                self.take_pod_down(i);
                let pod = &mut self.state.pods[i];
                pod.phase = PodPhase::Pending;
                pod.host_binding = None;
                let msg = format!("DiskPressure on node {host} (disk {pct}% >= eviction threshold {threshold}%)");
                pod.pending_reason = Some(msg.clone());
                self.k8s_event(true, "FailedScheduling", format!("pod/{id}"), msg);
            }
        }

        let pending: Vec<usize> = self
            .state
            .pods
            .iter()
            .enumerate()
            .filter(|(_, p)| p.phase == PodPhase::Pending)
            .map(|(i, _)| i)
            .collect();
        for i in pending {
            let home = self.state.pods[i].home_host.clone();
            let id = self.state.pods[i].pod_id.clone();
            if let Some((_, pct)) = pressured.iter().find(|(h, _)| *h == home) {
                let msg = format!("DiskPressure on node {home} (disk {pct}% >= eviction threshold {threshold}%)");
                let pod = &mut self.state.pods[i];
                if pod.pending_reason.as_deref() != Some(msg.as_str()) {
                    pod.pending_reason = Some(msg.clone());
                    self.k8s_event(true, "FailedScheduling", format!("pod/{id}"), msg);
                }
                continue;
            }
            let pod = &mut self.state.pods[i];
            pod.phase = PodPhase::Running;
            pod.host_binding = Some(home.clone());
            pod.pending_reason = None;
            pod.heap_pct = if pod.role == PodRole::Master { 30.0 } else { 52.0 };
            pod.heap_leak_pct = 0.0;
            self.k8s_event(false, "Scheduled", format!("pod/{id}"), format!("Successfully assigned {NAMESPACE}/{id} to {home}"));
            self.bring_pod_up(i, now);
        }
    }

    fn take_pod_down(&mut self, pod_idx: usize) {
        let id = self.state.pods[pod_idx].pod_id.clone();
        for index in &mut self.state.indices {
            for shard in &mut index.shards {
                for copy in &mut shard.copies {
                    if copy.pod == id {
                        copy.started_at_s = None;
                    }
                }
            }
        }
    }

    fn bring_pod_up(&mut self, pod_idx: usize, now: u64) {
        let id = self.state.pods[pod_idx].pod_id.clone();
        let running: Vec<String> = self
            .state
            .pods
            .iter()
            .filter(|p| p.is_running())
            .map(|p| p.pod_id.clone())
            .collect();
        let (primary_delay, replica_delay) = (self.spec.primary_recovery_s, self.spec.replica_recovery_s);
        for index in &mut self.state.indices {
            for shard in &mut index.shards {
                let has_live_copy = shard
                    .copies
                    .iter()
                    .any(|c| c.pod != id && c.started_at_s.is_some() && running.contains(&c.pod));
                for copy in &mut shard.copies {
                    if copy.pod == id && copy.started_at_s.is_none() {
                        let delay = if has_live_copy { replica_delay } else { primary_delay };
                        copy.started_at_s = Some(now + delay);
                    }
                }
            }
        }
    }

    fn recompute(&mut self, now: u64) {
        // promote: the first started copy of each shard carries the primary flag
        let running: BTreeMap<String, bool> = self
            .state
            .pods
            .iter()
            .map(|p| (p.pod_id.clone(), p.is_running()))
            .collect();
        for index in &mut self.state.indices {
            for shard in &mut index.shards {
                let live = |c: &ShardCopy| {
                    running.get(&c.pod).copied().unwrap_or(false) && c.started_at_s.is_some_and(|t| t <= now)
                };
                let primary_live = shard.copies.iter().any(|c| c.primary && live(c));
                if !primary_live {
                    if let Some(pos) = shard.copies.iter().position(live) {
                        for (k, c) in shard.copies.iter_mut().enumerate() {
                            c.primary = k == pos;
                        }
                    }
                }
            }
        }

        let quorum = derive_quorum(&self.state);
        if quorum != self.state.quorum {
            let running = self.state.masters_running();
            let total = self.state.masters_total();
            self.emit(
                "quorum",
                "cluster",
                format!("master quorum {} ({running}/{total} masters)", if quorum { "restored" } else { "lost" }),
            );
            self.state.quorum = quorum;
        }
        let health = derive_health(&self.state);
        if health != self.state.health {
            let from = self.state.health;
            self.emit("health", "cluster", format!("{from} -> {health}"));
            self.state.health = health;
        }
    }

    // -- probes ----------------------------------------------------------

    /// Model latency for one probe at the current cluster shape, with noise.
    pub fn run_probe(&mut self, probe: Probe) -> Result<f64, SimError> {
        self.probes_run += 1;
        if self.state.health == Health::Red {
            return Err(SimError::ProbeUnavailable(Health::Red));
        }
        let coeffs = &self.options.coefficients;
        let nic = self.nic_penalty();
        let base = match probe {
            Probe::WriteBulk { docs } => {
                perfmodel::write_latency(docs as f64, self.spec.replicas as f64, coeffs)
                    .expect("non-negative write inputs")
                    * nic
            }
            q => {
                let ms = perfmodel::query_latency(
                    self.state.gb_per_shard(),
                    self.state.primary_shard_count() as f64,
                    coeffs,
                )
                .expect("non-negative query inputs");
                let tuning = if self.state.settings.tuned() {
                    perfmodel::TUNED_QUERY_MULTIPLIER
                } else {
                    1.0
                };
                ms * q.query_weight() * tuning * nic * self.heap_penalty()
            }
        };
        let noise = if self.options.zero_noise || self.options.noise_sigma <= 0.0 {
            1.0
        } else {
            LogNormal::new(0.0, self.options.noise_sigma)
                .expect("valid sigma")
                .sample(&mut self.probe_rng)
        };
        Ok(base * noise)
    }

    fn nic_penalty(&self) -> f64 {
        let worst = self
            .state
            .hosts
            .iter()
            .map(|h| h.nic.retransmit_rate)
            .fold(0.0, f64::max);
        let excess = (worst - BASE_RETRANSMIT_RATE).max(0.0);
        let traffic = if self.state.settings.merge_traffic_reduced { 0.5 } else { 1.0 };
        1.0 + excess / self.options.nic_penalty_scale * traffic
    }

    fn heap_penalty(&self) -> f64 {
        let worst = self
            .state
            .pods
            .iter()
            .filter(|p| p.is_running() && p.role == PodRole::Data)
            .map(|p| p.heap_pct)
            .fold(0.0, f64::max);
        1.0 + (worst - 75.0).max(0.0) * self.options.heap_penalty_per_pct
    }

    /// Applies index-level settings outside the tool path (deployment).
    pub fn apply_settings(&mut self, settings: AppliedSettings) {
        self.state.settings = settings;
        self.emit("settings", "cluster", "index settings applied".into());
        self.flush_pending();
    }

    /// Restarts one pod in place, as a rolling upgrade does.
    pub fn restart_pod(&mut self, pod_id: &str, version: Option<&str>) -> Result<(), SimError> {
        let idx = self.pod_index(pod_id)?;
        self.take_pod_down(idx);
        let pod = &mut self.state.pods[idx];
        pod.phase = PodPhase::Pending;
        pod.host_binding = None;
        pod.pending_reason = None;
        pod.restarts += 1;
        if let Some(v) = version {
            pod.version = v.to_string();
        }
        self.k8s_event(false, "Killing", format!("pod/{pod_id}"), format!("Stopping container elasticsearch ({pod_id})"));
        self.recompute(self.state.sim_time_s);
        self.flush_pending();
        Ok(())
    }

    fn pod_index(&self, pod_id: &str) -> Result<usize, SimError> {
        self.state
            .pods
            .iter()
            .position(|p| p.pod_id == pod_id)
            .ok_or_else(|| SimError::NotFound(format!("pod {pod_id}")))
    }

    fn host_index(&self, host_id: &str) -> Result<usize, SimError> {
        self.state
            .hosts
            .iter()
            .position(|h| h.host_id == host_id)
            .ok_or_else(|| SimError::UnknownTarget(format!("host {host_id}")))
    }

    /// Records the new cluster version once every pod runs it.
    pub fn set_cluster_version(&mut self, version: &str) {
        self.state.es_version = version.to_string();
    }
}

/// Places one primary plus `replicas` copies on distinct data pods.
fn place_copies(data_ids: &[String], ordinal: usize, replicas: u32, started: Option<u64>) -> Vec<ShardCopy> {
    let n = data_ids.len();
    (0..=replicas as usize)
        .map(|r| ShardCopy {
            primary: r == 0,
            pod: data_ids[(ordinal + r) % n].clone(),
            started_at_s: started,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sim() -> Simulator {
        Simulator::new(ClusterSpec::default(), 7, SimOptions::zero_noise()).unwrap()
    }

    #[test]
    fn default_cluster_shape() {
        let s = sim();
        let st = s.state();
        assert_eq!(st.pods.len(), 15);
        assert_eq!(st.count_phase(PodPhase::Running), 15);
        assert_eq!(st.indices.len(), 168);
        assert_eq!(st.primary_shard_count(), 840);
        assert_eq!(st.health, Health::Green);
        assert!(st.quorum);
    }

    #[test]
    fn minimal_cluster_is_green() {
        let s = Simulator::new(ClusterSpec::minimal(), 1, SimOptions::default()).unwrap();
        assert_eq!(s.state().count_phase(PodPhase::Running), 2);
        assert_eq!(s.health(), Health::Green);
    }

    #[test]
    fn same_seed_same_state() {
        let mut a = sim();
        let mut b = sim();
        a.tick(120).unwrap();
        b.tick(120).unwrap();
        assert_eq!(serde_json::to_string(a.state()).unwrap(), serde_json::to_string(b.state()).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = ClusterSpec { masters: 0, ..ClusterSpec::default() };
        assert!(matches!(Simulator::new(spec, 1, SimOptions::default()), Err(SimError::Config(_))));
        let mut spec = ClusterSpec::default();
        spec.hosts[0].mount_capacity_bytes = 0;
        assert!(matches!(Simulator::new(spec, 1, SimOptions::default()), Err(SimError::Config(_))));
    }

    #[test]
    fn zero_tick_rejected() {
        assert_eq!(sim().tick(0), Err(SimError::InvalidTick));
    }

    #[test]
    fn quiet_tick_only_moves_clock_and_noise() {
        let mut s = sim();
        let before = s.snapshot();
        let events = s.tick(30).unwrap();
        assert!(events.is_empty());
        let after = s.state();
        assert_eq!(after.sim_time_s, 30);
        assert_eq!(after.health, Health::Green);
        assert_eq!(after.indices, before.indices);
        for (a, b) in after.hosts.iter().zip(&before.hosts) {
            assert_eq!(a.used_bytes(), b.used_bytes());
        }
    }

    #[test]
    fn losing_all_masters_turns_red() {
        let mut s = sim();
        for m in 0..3 {
            s.inject_fault(FaultSpec::new(0, FaultKind::NodeKill { pod: format!("es-master-{m}"), down_s: None }))
                .unwrap();
        }
        s.tick(1).unwrap();
        assert!(!s.state().quorum);
        assert_eq!(s.health(), Health::Red);
    }

    #[test]
    fn eviction_at_threshold() {
        let mut spec = ClusterSpec::default();
        spec.hosts[0].mount_capacity_bytes = 1000 * GB;
        spec.hosts[0].es_used_bytes = 849 * GB;
        let mut s = Simulator::new(spec, 3, SimOptions::zero_noise()).unwrap();
        s.tick(1).unwrap();
        assert_eq!(s.state().count_phase(PodPhase::Pending), 0);
        // 84.9% -> 85.1% crosses the threshold
        s.inject_fault(FaultSpec::new(
            1,
            FaultKind::ForeignDataGrowth {
                host: "s797".into(),
                dir: "cassandra-disk1".into(),
                rate_bytes_per_s: 2 * GB,
                total_bytes: 2 * GB,
            },
        ))
        .unwrap();
        let events = s.tick(1).unwrap();
        assert_eq!(s.state().host("s797").unwrap().disk_bp(), 8510);
        assert_eq!(s.state().count_phase(PodPhase::Pending), 5);
        assert!(events.iter().any(|e| e.message.starts_with("FailedScheduling: DiskPressure")));
    }

    #[test]
    fn write_probe_zero_noise() {
        let mut s = sim();
        let ms = s.run_probe(Probe::WriteBulk { docs: 100 }).unwrap();
        assert!((ms - 11.4).abs() < 1e-9);
        let spec = ClusterSpec { replicas: 0, ..Default::default() };
        let mut s = Simulator::new(spec, 7, SimOptions::zero_noise()).unwrap();
        assert!((s.run_probe(Probe::WriteBulk { docs: 0 }).unwrap() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn term_status_tracks_fitted_model() {
        // NNLS fit of the latency table at 3.72 GB/shard, 840 shards (computed
        // independently with scipy.optimize.nnls): 73.89418045 ms.
        let mut s = sim();
        let ms = s.run_probe(Probe::TermStatus).unwrap();
        assert!((ms - 73.89418045).abs() < 1e-6, "{ms}");
    }

    #[test]
    fn probes_refused_when_red() {
        let mut s = sim();
        for m in 0..3 {
            s.inject_fault(FaultSpec::new(0, FaultKind::NodeKill { pod: format!("es-master-{m}"), down_s: None }))
                .unwrap();
        }
        s.tick(1).unwrap();
        assert_eq!(s.run_probe(Probe::MatchAll), Err(SimError::ProbeUnavailable(Health::Red)));
    }

    #[test]
    fn noise_is_seeded() {
        let mut a = Simulator::new(ClusterSpec::default(), 9, SimOptions::default()).unwrap();
        let mut b = Simulator::new(ClusterSpec::default(), 9, SimOptions::default()).unwrap();
        let xs: Vec<f64> = (0..10).map(|_| a.run_probe(Probe::MatchAll).unwrap()).collect();
        let ys: Vec<f64> = (0..10).map(|_| b.run_probe(Probe::MatchAll).unwrap()).collect();
        assert_eq!(xs, ys);
        assert!(xs.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn restart_recovers_to_green() {
        let mut s = sim();
        s.restart_pod("es-data-3", Some("8.17.1")).unwrap();
        assert_eq!(s.health(), Health::Yellow);
        s.tick(1).unwrap();
        assert!(s.state().pod("es-data-3").unwrap().is_running());
        s.tick(60).unwrap();
        assert_eq!(s.health(), Health::Green);
        assert_eq!(s.state().pod("es-data-3").unwrap().version, "8.17.1");
    }
}
