//! Scripted fault injection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{PodPhase, SimError, Simulator};

fn default_dir() -> String {
    "cassandra-disk1".to_string()
}

fn yes() -> bool {
    true
}

/// One scheduled fault. Effects begin on the first tick after `at_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at_s: u64,
    #[serde(flatten)]
    pub kind: FaultKind,
}

impl FaultSpec {
    pub fn new(at_s: u64, kind: FaultKind) -> Self {
        Self { at_s, kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    /// A non-ES application writes into a directory on the data mount.
    ForeignDataGrowth {
        host: String,
        #[serde(default = "default_dir")]
        dir: String,
        rate_bytes_per_s: u64,
        total_bytes: u64,
    },
    /// Retransmits climb linearly and the bond drops to one NIC.
    NicDegradation {
        /// Empty means every host.
        #[serde(default)]
        hosts: Vec<String>,
        retransmit_rise_per_hour: f64,
        #[serde(default = "yes")]
        bond_degraded: bool,
    },
    HeapLeak { pod: String, pct_per_hour: f64 },
    NodeKill {
        pod: String,
        /// Restart after this many seconds; stays down when absent.
        #[serde(default)]
        down_s: Option<u64>,
    },
    ShardCopyCorruption { index_count: u32 },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::ForeignDataGrowth { .. } => "foreign_data_growth",
            FaultKind::NicDegradation { .. } => "nic_degradation",
            FaultKind::HeapLeak { .. } => "heap_leak",
            FaultKind::NodeKill { .. } => "node_kill",
            FaultKind::ShardCopyCorruption { .. } => "shard_copy_corruption",
        }
    }
}

#[derive(Debug, Clone)]
pub(super) struct ActiveFault {
    pub spec: FaultSpec,
    pub active: bool,
    pub started: bool,
    pub written: u64,
}

impl Simulator {
    /// Registers a fault after checking its target exists.
    pub fn inject_fault(&mut self, fault: FaultSpec) -> Result<(), SimError> {
        match &fault.kind {
            FaultKind::ForeignDataGrowth { host, dir, .. } => {
                self.host_index(host)?;
                if dir.is_empty() || dir == super::ES_DATA_DIR || dir.contains('/') {
                    return Err(SimError::UnknownTarget(format!("foreign dir {dir:?}")));
                }
            }
            FaultKind::NicDegradation { hosts, retransmit_rise_per_hour, .. } => {
                for h in hosts {
                    self.host_index(h)?;
                }
                if !(*retransmit_rise_per_hour >= 0.0) {
                    return Err(SimError::UnknownTarget("negative retransmit rise".into()));
                }
            }
            FaultKind::HeapLeak { pod, pct_per_hour } => {
                self.pod_index(pod).map_err(|_| SimError::UnknownTarget(format!("pod {pod}")))?;
                if !(*pct_per_hour >= 0.0) {
                    return Err(SimError::UnknownTarget("negative heap leak rate".into()));
                }
            }
            FaultKind::NodeKill { pod, .. } => {
                self.pod_index(pod).map_err(|_| SimError::UnknownTarget(format!("pod {pod}")))?;
            }
            FaultKind::ShardCopyCorruption { index_count } => {
                if *index_count as usize > self.state.indices.len() {
                    return Err(SimError::UnknownTarget(format!(
                        "{index_count} indices requested, cluster has {}",
                        self.state.indices.len()
                    )));
                }
            }
        }
        self.emit("fault", fault.kind.name(), format!("registered for t>{}", fault.at_s));
        self.flush_pending();
        self.faults.push(ActiveFault {
            spec: fault,
            active: true,
            started: false,
            written: 0,
        });
        Ok(())
    }

    /// Ends a growth fault whose directory was removed.
    pub(super) fn end_growth(&mut self, host_id: &str, dir_name: &str) {
        for f in &mut self.faults {
            if let FaultKind::ForeignDataGrowth { host, dir, .. } = &f.spec.kind {
                if host == host_id && dir == dir_name {
                    f.active = false;
                }
            }
        }
    }

    pub(super) fn apply_faults(&mut self, now: u64) {
        let dmesg_cap = self.spec.dmesg_capacity;
        for fi in 0..self.faults.len() {
            if !self.faults[fi].active || now <= self.faults[fi].spec.at_s {
                continue;
            }
            let first = !self.faults[fi].started;
            self.faults[fi].started = true;
            let kind = self.faults[fi].spec.kind.clone();
            match kind {
                FaultKind::ForeignDataGrowth { host, dir, rate_bytes_per_s, total_bytes } => {
                    let hi = self.host_index(&host).expect("validated at injection");
                    let remaining = total_bytes - self.faults[fi].written;
                    let h = &mut self.state.hosts[hi];
                    let step = rate_bytes_per_s.min(remaining).min(h.free_bytes());
                    *h.foreign_dirs.entry(dir.clone()).or_insert(0) += step;
                    self.faults[fi].written += step;
                    if first {
                        self.emit("fault", &host, format!("foreign data growth started in {}/{dir}", super::DATA_MOUNT));
                    }
                    if self.faults[fi].written >= total_bytes {
                        self.faults[fi].active = false;
                        self.emit("fault", &host, format!("foreign data growth in {}/{dir} complete", super::DATA_MOUNT));
                    }
                }
                FaultKind::NicDegradation { hosts, retransmit_rise_per_hour, bond_degraded } => {
                    let targets: Vec<usize> = if hosts.is_empty() {
                        (0..self.state.hosts.len()).collect()
                    } else {
                        hosts.iter().map(|h| self.host_index(h).expect("validated")).collect()
                    };
                    for hi in targets {
                        let h = &mut self.state.hosts[hi];
                        if first {
                            if bond_degraded {
                                h.nic.bond_degraded = true;
                                h.push_dmesg(
                                    format!("[{now:>8}.000000] bnxt_en 0000:3b:00.1 eno2np1: NIC Link is Down"),
                                    dmesg_cap,
                                );
                                h.push_dmesg(
                                    format!("[{now:>8}.000000] bond0: link status definitely down for interface eno2np1, disabling it"),
                                    dmesg_cap,
                                );
                            }
                            let id = h.host_id.clone();
                            self.emit("fault", &id, "nic degradation on eno2np1".into());
                        }
                        let h = &mut self.state.hosts[hi];
                        h.nic.retransmit_rate += retransmit_rise_per_hour / 3600.0;
                        h.nic.error_residue += h.nic.retransmit_rate;
                        let whole = h.nic.error_residue.floor();
                        h.nic.error_count += whole as u64;
                        h.nic.error_residue -= whole;
                        if now.is_multiple_of(300) {
                            h.push_dmesg(
                                format!("[{now:>8}.000000] bnxt_en 0000:3b:00.1 eno2np1: TX timeout detected, starting reset task"),
                                dmesg_cap,
                            );
                        }
                    }
                }
                FaultKind::HeapLeak { pod, pct_per_hour } => {
                    let pi = self.pod_index(&pod).expect("validated");
                    let p = &mut self.state.pods[pi];
                    if p.phase == PodPhase::Running {
                        p.heap_leak_pct = (p.heap_leak_pct + pct_per_hour / 3600.0).min(60.0);
                    }
                    if first {
                        self.emit("fault", &pod, "heap leak started".into());
                    }
                }
                FaultKind::NodeKill { pod, down_s } => {
                    let pi = self.pod_index(&pod).expect("validated");
                    self.take_pod_down(pi);
                    let p = &mut self.state.pods[pi];
                    p.phase = PodPhase::Terminated;
                    p.host_binding = None;
                    p.terminated_until_s = down_s.map(|d| now + d);
                    self.faults[fi].active = false;
                    self.k8s_event(true, "Killing", format!("pod/{pod}"), "container terminated by fault injection".into());
                }
                FaultKind::ShardCopyCorruption { index_count } => {
                    let mut order: Vec<usize> = (0..self.state.indices.len()).collect();
                    order.shuffle(&mut self.rng);
                    let mut chosen: Vec<usize> = order.into_iter().take(index_count as usize).collect();
                    chosen.sort_unstable();
                    for &ii in &chosen {
                        if let Some(shard) = self.state.indices[ii].shards.first_mut() {
                            shard.no_valid_shard_copy = true;
                        }
                    }
                    self.faults[fi].active = false;
                    self.emit("fault", "cluster", format!("{index_count} indices lost every valid shard copy"));
                }
            }
        }
    }
}
