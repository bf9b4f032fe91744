//! Text exposition of the sixteen engine metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricType {
    Gauge,
    Counter,
}

impl MetricType {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricType::Gauge => "gauge",
            MetricType::Counter => "counter",
        }
    }
}

pub const REGISTRY: [(&str, MetricType, &str); 16] = [
    ("guardian_cluster_status", MetricType::Gauge, "Cluster health: GREEN=2, YELLOW=1, RED=0."),
    ("guardian_alerts_total", MetricType::Counter, "Alerts raised, by severity."),
    ("guardian_ai_loop_runs_total", MetricType::Counter, "Completed action-loop runs."),
    ("guardian_ai_loop_iterations", MetricType::Gauge, "Iterations used by the last action-loop run."),
    ("guardian_ai_loop_tokens_total", MetricType::Counter, "Tokens consumed by action-loop runs."),
    ("guardian_ai_loop_duration_seconds", MetricType::Gauge, "Simulated duration of the last action-loop run."),
    ("guardian_node_heap_pct", MetricType::Gauge, "JVM heap use per pod."),
    ("guardian_node_disk_pct", MetricType::Gauge, "Data mount use per host."),
    ("guardian_pred_disk_fill_hours", MetricType::Gauge, "Hours until the eviction threshold; +Inf when flat."),
    ("guardian_pred_heap_hours", MetricType::Gauge, "Hours until critical heap; +Inf when flat."),
    ("guardian_pred_nvme_wear_months", MetricType::Gauge, "Months until NVMe replacement; +Inf when flat."),
    ("guardian_pred_nic_risk", MetricType::Gauge, "NIC failure risk score in [0,1]."),
    ("guardian_probe_latency_ms", MetricType::Gauge, "Rolling median probe latency."),
    ("guardian_incidents_total", MetricType::Counter, "Incidents recorded to memory."),
    ("guardian_remediations_total", MetricType::Counter, "Executed remediations, AI-driven or planned."),
    ("guardian_phase", MetricType::Gauge, "Current lifecycle phase ordinal."),
];

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub name: String,
    pub labels: Labels,
    pub value: f64,
    pub kind: MetricType,
}

/// Point-in-time values for every metric.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSnapshot {
    pub cluster_status: u8,
    pub alerts_total: BTreeMap<String, u64>,
    pub ai_loop_runs_total: u64,
    pub ai_loop_iterations: u32,
    pub ai_loop_tokens_total: u64,
    pub ai_loop_duration_seconds: u64,
    pub node_heap_pct: BTreeMap<String, f64>,
    pub node_disk_pct: BTreeMap<String, f64>,
    pub pred_disk_fill_hours: BTreeMap<String, Option<f64>>,
    pub pred_heap_hours: BTreeMap<String, Option<f64>>,
    pub pred_nvme_wear_months: BTreeMap<String, Option<f64>>,
    pub pred_nic_risk: BTreeMap<String, f64>,
    pub probe_latency_ms: BTreeMap<String, f64>,
    pub incidents_total: u64,
    pub remediations_total: u64,
    pub phase: u8,
}

fn one(label: &str, value: &str) -> Labels {
    Labels::from([(label.to_string(), value.to_string())])
}

fn eta(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::INFINITY)
}

impl MetricsSnapshot {
    pub fn samples(&self) -> Vec<MetricSample> {
        let mut out = Vec::new();
        let mut push = |name: &str, labels: Labels, value: f64| {
            let kind = REGISTRY.iter().find(|r| r.0 == name).expect("registered metric").1;
            out.push(MetricSample { name: name.into(), labels, value, kind });
        };
        push("guardian_cluster_status", Labels::new(), self.cluster_status as f64);
        for sev in ["CRITICAL", "WARNING", "INFO"] {
            let v = self.alerts_total.get(sev).copied().unwrap_or(0);
            push("guardian_alerts_total", one("severity", sev), v as f64);
        }
        push("guardian_ai_loop_runs_total", Labels::new(), self.ai_loop_runs_total as f64);
        push("guardian_ai_loop_iterations", Labels::new(), self.ai_loop_iterations as f64);
        push("guardian_ai_loop_tokens_total", Labels::new(), self.ai_loop_tokens_total as f64);
        push("guardian_ai_loop_duration_seconds", Labels::new(), self.ai_loop_duration_seconds as f64);
        for (k, v) in &self.node_heap_pct {
            push("guardian_node_heap_pct", one("pod", k), *v);
        }
        for (k, v) in &self.node_disk_pct {
            push("guardian_node_disk_pct", one("host", k), *v);
        }
        for (k, v) in &self.pred_disk_fill_hours {
            push("guardian_pred_disk_fill_hours", one("host", k), eta(*v));
        }
        for (k, v) in &self.pred_heap_hours {
            push("guardian_pred_heap_hours", one("pod", k), eta(*v));
        }
        for (k, v) in &self.pred_nvme_wear_months {
            push("guardian_pred_nvme_wear_months", one("host", k), eta(*v));
        }
        for (k, v) in &self.pred_nic_risk {
            push("guardian_pred_nic_risk", one("host", k), *v);
        }
        for (k, v) in &self.probe_latency_ms {
            push("guardian_probe_latency_ms", one("probe", k), *v);
        }
        push("guardian_incidents_total", Labels::new(), self.incidents_total as f64);
        push("guardian_remediations_total", Labels::new(), self.remediations_total as f64);
        push("guardian_phase", Labels::new(), self.phase as f64);
        out
    }
}

fn format_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "+Inf".into() } else { "-Inf".into() }
    } else if v.is_nan() {
        "NaN".into()
    } else if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

/// Exposition text: `# HELP` and `# TYPE` per metric, then its samples.
/// Metrics without samples still get their header lines.
pub fn export_metrics(snapshot: &MetricsSnapshot) -> String {
    let samples = snapshot.samples();
    let mut out = String::new();
    for (name, kind, help) in REGISTRY {
        let _ = writeln!(out, "# HELP {name} {help}");
        let _ = writeln!(out, "# TYPE {name} {}", kind.as_str());
        for s in samples.iter().filter(|s| s.name == name) {
            out.push_str(name);
            if !s.labels.is_empty() {
                let body: Vec<String> = s.labels.iter().map(|(k, v)| format!("{k}=\"{}\"", escape(v))).collect();
                let _ = write!(out, "{{{}}}", body.join(","));
            }
            let _ = writeln!(out, " {}", format_value(s.value));
        }
    }
    out
}
