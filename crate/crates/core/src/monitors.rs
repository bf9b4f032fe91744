//! Rule-based scans for the hardware, Kubernetes and Elasticsearch layers,
//! plus severity routing.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perfmodel::Baselines;
use crate::sim::{ClusterState, Health, LogLevel, PodPhase};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid thresholds: {0}")]
pub struct ThresholdError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Severity {
    Info,
    Warning,
    Critical,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Info => "INFO",
            Severity::Warning => "WARNING",
            Severity::Critical => "CRITICAL",
        })
    }
}

/// Closed set of alert codes. Layer −1 is hardware, 0 Kubernetes,
/// 1 Elasticsearch, 2 predictive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertCode {
    NvmeLatencyHigh,
    NvmeMediaErrors,
    DmesgIoError,
    NicDegradation,
    ThermalHigh,
    DiskUsageHigh,
    QuorumLost,
    PodsPending,
    PodDown,
    HeapPressure,
    SegmentCountHigh,
    LogErrorBurst,
    ProbeDeviation,
    ClusterRed,
    ClusterYellow,
    PredictedBreach,
    UpgradePaused,
    PlanEscalation,
}

impl AlertCode {
    pub const ALL: [AlertCode; 18] = [
        AlertCode::NvmeLatencyHigh,
        AlertCode::NvmeMediaErrors,
        AlertCode::DmesgIoError,
        AlertCode::NicDegradation,
        AlertCode::ThermalHigh,
        AlertCode::DiskUsageHigh,
        AlertCode::QuorumLost,
        AlertCode::PodsPending,
        AlertCode::PodDown,
        AlertCode::HeapPressure,
        AlertCode::SegmentCountHigh,
        AlertCode::LogErrorBurst,
        AlertCode::ProbeDeviation,
        AlertCode::ClusterRed,
        AlertCode::ClusterYellow,
        AlertCode::PredictedBreach,
        AlertCode::UpgradePaused,
        AlertCode::PlanEscalation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlertCode::NvmeLatencyHigh => "nvme_latency_high",
            AlertCode::NvmeMediaErrors => "nvme_media_errors",
            AlertCode::DmesgIoError => "dmesg_io_error",
            AlertCode::NicDegradation => "nic_degradation",
            AlertCode::ThermalHigh => "thermal_high",
            AlertCode::DiskUsageHigh => "disk_usage_high",
            AlertCode::QuorumLost => "quorum_lost",
            AlertCode::PodsPending => "pods_pending",
            AlertCode::PodDown => "pod_down",
            AlertCode::HeapPressure => "heap_pressure",
            AlertCode::SegmentCountHigh => "segment_count_high",
            AlertCode::LogErrorBurst => "log_error_burst",
            AlertCode::ProbeDeviation => "probe_deviation",
            AlertCode::ClusterRed => "cluster_red",
            AlertCode::ClusterYellow => "cluster_yellow",
            AlertCode::PredictedBreach => "predicted_breach",
            AlertCode::UpgradePaused => "upgrade_paused",
            AlertCode::PlanEscalation => "plan_escalation",
        }
    }

    pub fn layer(self) -> i8 {
        match self {
            AlertCode::NvmeLatencyHigh
            | AlertCode::NvmeMediaErrors
            | AlertCode::DmesgIoError
            | AlertCode::NicDegradation
            | AlertCode::ThermalHigh
            | AlertCode::DiskUsageHigh => -1,
            AlertCode::QuorumLost | AlertCode::PodsPending | AlertCode::PodDown | AlertCode::UpgradePaused => 0,
            AlertCode::HeapPressure
            | AlertCode::SegmentCountHigh
            | AlertCode::LogErrorBurst
            | AlertCode::ProbeDeviation
            | AlertCode::ClusterRed
            | AlertCode::ClusterYellow => 1,
            AlertCode::PredictedBreach | AlertCode::PlanEscalation => 2,
        }
    }
}

impl fmt::Display for AlertCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Alert {
    pub severity: Severity,
    pub layer: i8,
    pub code: AlertCode,
    pub subject: String,
    pub message: String,
    pub at_s: u64,
}

impl Alert {
    pub fn new(severity: Severity, code: AlertCode, subject: &str, message: String, at_s: u64) -> Self {
        Self {
            severity,
            layer: code.layer(),
            code,
            subject: subject.to_string(),
            message,
            at_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleThresholds {
    pub heap_warn_pct: f64,
    pub heap_crit_pct: f64,
    pub disk_warn_pct: f64,
    pub nvme_latency_warn_us: f64,
    pub retransmit_warn_rate: f64,
    pub thermal_warn_c: f64,
    pub pending_pods_crit: usize,
    pub segment_count_warn: u64,
    pub deviation_warn_factor: f64,
    /// ERROR lines per pod within `log_window_s` that count as a burst.
    pub log_error_burst: usize,
    pub log_window_s: u64,
}

impl Default for RuleThresholds {
    fn default() -> Self {
        Self {
            heap_warn_pct: 85.0,
            heap_crit_pct: 90.0,
            disk_warn_pct: 80.0,
            nvme_latency_warn_us: 2000.0,
            retransmit_warn_rate: 5.0,
            thermal_warn_c: 85.0,
            pending_pods_crit: 3,
            segment_count_warn: 10_000,
            deviation_warn_factor: 2.0,
            log_error_burst: 3,
            log_window_s: 300,
        }
    }
}

impl RuleThresholds {
    pub fn validate(&self) -> Result<(), ThresholdError> {
        if !(self.heap_warn_pct < self.heap_crit_pct) {
            return Err(ThresholdError("heap_warn_pct must be below heap_crit_pct".into()));
        }
        if !(self.disk_warn_pct > 0.0 && self.disk_warn_pct <= 100.0) {
            return Err(ThresholdError("disk_warn_pct must be in (0, 100]".into()));
        }
        if self.pending_pods_crit < 2 {
            return Err(ThresholdError("pending_pods_crit must exceed the single-pod warning level".into()));
        }
        if !(self.deviation_warn_factor > 1.0) {
            return Err(ThresholdError("deviation_warn_factor must be > 1".into()));
        }
        Ok(())
    }
}

/// Layer −1: NVMe, kernel log, NIC, thermal and mount usage.
pub fn scan_hardware(state: &ClusterState, th: &RuleThresholds) -> Vec<Alert> {
    let now = state.sim_time_s;
    let mut out = Vec::new();
    for h in &state.hosts {
        let id = h.host_id.as_str();
        if h.nvme.read_latency_us > th.nvme_latency_warn_us {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::NvmeLatencyHigh,
                id,
                format!("NVMe read latency {:.0} us", h.nvme.read_latency_us),
                now,
            ));
        }
        if h.nvme.media_errors > 0 {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::NvmeMediaErrors,
                id,
                format!("{} NVMe media errors", h.nvme.media_errors),
                now,
            ));
        }
        if let Some(line) = h.dmesg_ring.iter().rev().find(|l| l.contains("I/O error")) {
            out.push(Alert::new(Severity::Warning, AlertCode::DmesgIoError, id, line.clone(), now));
        }
        if h.nic.retransmit_rate >= th.retransmit_warn_rate || h.nic.bond_degraded {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::NicDegradation,
                id,
                format!(
                    "retransmits {:.2}/s, bond {}",
                    h.nic.retransmit_rate,
                    if h.nic.bond_degraded { "degraded" } else { "healthy" }
                ),
                now,
            ));
        }
        if h.thermal_c >= th.thermal_warn_c {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::ThermalHigh,
                id,
                format!("{:.1} C", h.thermal_c),
                now,
            ));
        }
        let pct = h.disk_pct() * 100.0;
        if pct >= th.disk_warn_pct {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::DiskUsageHigh,
                id,
                format!("data mount at {}%", h.df_pct()),
                now,
            ));
        }
    }
    out
}

/// Layer 0: quorum, pending pods and dead pods.
pub fn scan_kubernetes(state: &ClusterState, th: &RuleThresholds) -> Vec<Alert> {
    let now = state.sim_time_s;
    let mut out = Vec::new();
    if !state.quorum {
        out.push(Alert::new(
            Severity::Critical,
            AlertCode::QuorumLost,
            "cluster",
            format!("{}/{} masters running", state.masters_running(), state.masters_total()),
            now,
        ));
    }
    let pending = state.count_phase(PodPhase::Pending);
    if pending > 0 {
        let severity = if pending >= th.pending_pods_crit { Severity::Critical } else { Severity::Warning };
        out.push(Alert::new(
            severity,
            AlertCode::PodsPending,
            "cluster",
            format!("{pending}/{} pods Pending", state.pods.len()),
            now,
        ));
    }
    for p in &state.pods {
        if matches!(p.phase, PodPhase::Terminated | PodPhase::Evicted) {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::PodDown,
                &p.pod_id,
                format!("pod {}", p.phase),
                now,
            ));
        }
    }
    out
}

/// Layer 1: health color, heap, segments, log bursts and probe deviation.
/// `measured` maps probe names to recent p50 latencies.
pub fn scan_es_rules(
    state: &ClusterState,
    measured: &BTreeMap<String, f64>,
    baselines: Option<&Baselines>,
    th: &RuleThresholds,
) -> Vec<Alert> {
    let now = state.sim_time_s;
    let mut out = Vec::new();
    match state.health {
        Health::Red => out.push(Alert::new(
            Severity::Critical,
            AlertCode::ClusterRed,
            "cluster",
            "cluster health RED".into(),
            now,
        )),
        Health::Yellow => out.push(Alert::new(
            Severity::Warning,
            AlertCode::ClusterYellow,
            "cluster",
            "cluster health YELLOW".into(),
            now,
        )),
        Health::Green => {}
    }
    for p in state.pods.iter().filter(|p| p.is_running()) {
        if p.heap_pct >= th.heap_crit_pct {
            out.push(Alert::new(
                Severity::Critical,
                AlertCode::HeapPressure,
                &p.pod_id,
                format!("heap {:.1}%", p.heap_pct),
                now,
            ));
        } else if p.heap_pct >= th.heap_warn_pct {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::HeapPressure,
                &p.pod_id,
                format!("heap {:.1}%", p.heap_pct),
                now,
            ));
        }
        if p.segment_count >= th.segment_count_warn {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::SegmentCountHigh,
                &p.pod_id,
                format!("{} segments", p.segment_count),
                now,
            ));
        }
        let since = now.saturating_sub(th.log_window_s);
        let errors = p
            .log_ring
            .iter()
            .filter(|l| l.level == LogLevel::Error && l.at_s > since)
            .count();
        if errors >= th.log_error_burst {
            out.push(Alert::new(
                Severity::Warning,
                AlertCode::LogErrorBurst,
                &p.pod_id,
                format!("{errors} ERROR lines in {}s", th.log_window_s),
                now,
            ));
        }
    }
    if let Some(b) = baselines {
        for (probe, value) in measured {
            if let Some(base) = b.p50(probe) {
                if *value > th.deviation_warn_factor * base {
                    out.push(Alert::new(
                        Severity::Warning,
                        AlertCode::ProbeDeviation,
                        probe,
                        format!("{probe} p50 {value:.1} ms vs baseline {base:.1} ms"),
                        now,
                    ));
                }
            }
        }
    }
    out
}

/// How a batch of alerts is handled by the scheduler.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    /// CRITICAL alerts; any present triggers the action loop on the next tick.
    pub trigger: Vec<Alert>,
    /// WARNING alerts attached to the next scheduled cycle.
    pub attach: Vec<Alert>,
    /// INFO alerts, logged only.
    pub log_only: Vec<Alert>,
}

impl Routing {
    pub fn triggers_loop(&self) -> bool {
        !self.trigger.is_empty()
    }
}

pub fn route(alerts: &[Alert]) -> Routing {
    let mut r = Routing::default();
    for a in alerts {
        match a.severity {
            Severity::Critical => r.trigger.push(a.clone()),
            Severity::Warning => r.attach.push(a.clone()),
            Severity::Info => r.log_only.push(a.clone()),
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perfmodel::calibrate;
    use crate::sim::{ClusterSpec, FaultKind, FaultSpec, SimOptions, Simulator};

    fn sim() -> Simulator {
        Simulator::new(ClusterSpec::default(), 2, SimOptions::zero_noise()).unwrap()
    }

    fn th() -> RuleThresholds {
        RuleThresholds::default()
    }

    #[test]
    fn healthy_cluster_is_quiet() {
        let mut s = sim();
        s.tick(30).unwrap();
        let st = s.state();
        assert!(scan_hardware(st, &th()).is_empty());
        assert!(scan_kubernetes(st, &th()).is_empty());
        assert!(scan_es_rules(st, &BTreeMap::new(), None, &th()).is_empty());
    }

    #[test]
    fn nic_alert_per_host() {
        let mut s = sim();
        s.inject_fault(FaultSpec::new(
            0,
            FaultKind::NicDegradation { hosts: vec![], retransmit_rise_per_hour: 3600.0, bond_degraded: true },
        ))
        .unwrap();
        s.tick(10).unwrap();
        let alerts = scan_hardware(s.state(), &th());
        let nic: Vec<_> = alerts.iter().filter(|a| a.code == AlertCode::NicDegradation).collect();
        assert_eq!(nic.len(), 3);
        assert!(nic.iter().all(|a| a.severity == Severity::Warning && a.layer == -1));
    }

    #[test]
    fn dmesg_template_line_detected() {
        let mut st = sim().snapshot();
        st.hosts[1]
            .dmesg_ring
            .push_back("[ 1234.567890] blk_update_request: I/O error, dev nvme0n1, sector 123456".into());
        let alerts = scan_hardware(&st, &th());
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].code, AlertCode::DmesgIoError);
        assert_eq!(alerts[0].severity, Severity::Warning);
        assert_eq!(alerts[0].subject, "s811");
    }

    #[test]
    fn incident_one_layer_zero() {
        let mut st = sim().snapshot();
        for p in st.pods.iter_mut().take(9) {
            p.phase = PodPhase::Pending;
            p.host_binding = None;
        }
        st.quorum = false;
        let alerts = scan_kubernetes(&st, &th());
        let crit: Vec<AlertCode> =
            alerts.iter().filter(|a| a.severity == Severity::Critical).map(|a| a.code).collect();
        assert_eq!(crit, vec![AlertCode::QuorumLost, AlertCode::PodsPending]);
    }

    #[test]
    fn single_pending_pod_is_warning() {
        let mut st = sim().snapshot();
        st.pods[7].phase = PodPhase::Pending;
        st.pods[7].host_binding = None;
        let alerts = scan_kubernetes(&st, &th());
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].severity, Severity::Warning);
    }

    #[test]
    fn heap_critical() {
        let mut st = sim().snapshot();
        st.pods[5].heap_pct = 92.0;
        st.pods[6].heap_pct = 86.0;
        let alerts = scan_es_rules(&st, &BTreeMap::new(), None, &th());
        assert_eq!(alerts.len(), 2);
        assert_eq!(alerts[0].severity, Severity::Critical);
        assert_eq!(alerts[0].code, AlertCode::HeapPressure);
        assert_eq!(alerts[1].severity, Severity::Warning);
    }

    #[test]
    fn probe_deviation_only_when_slower() {
        let mut s = sim();
        let b = calibrate(&mut s).unwrap();
        let st = s.snapshot();
        let base = b.p50("match_all").unwrap();
        let mut measured = BTreeMap::from([("term_status".to_string(), 38.0)]);
        assert!(scan_es_rules(&st, &measured, Some(&b), &th()).is_empty());
        measured.insert("match_all".into(), 3.0 * base);
        let alerts = scan_es_rules(&st, &measured, Some(&b), &th());
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].code, AlertCode::ProbeDeviation);
        assert_eq!(alerts[0].subject, "match_all");
    }

    #[test]
    fn routing_rules() {
        let a = |s| Alert::new(s, AlertCode::PodsPending, "cluster", String::new(), 45);
        let r = route(&[a(Severity::Info)]);
        assert!(!r.triggers_loop());
        assert_eq!(r.log_only.len(), 1);
        let r = route(&[a(Severity::Warning), a(Severity::Critical)]);
        assert!(r.triggers_loop());
        assert_eq!(r.attach.len(), 1);
    }

    #[test]
    fn default_thresholds_valid() {
        th().validate().unwrap();
        let bad = RuleThresholds { heap_warn_pct: 95.0, ..th() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn codes_are_closed_and_distinct() {
        let mut names: Vec<&str> = AlertCode::ALL.iter().map(|c| c.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), AlertCode::ALL.len());
        for c in AlertCode::ALL {
            let json = serde_json::to_string(&c).unwrap();
            assert_eq!(json, format!("\"{}\"", c.as_str()));
        }
    }
}
