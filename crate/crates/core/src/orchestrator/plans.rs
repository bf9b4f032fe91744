use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::heal::{validate_command, AuditEntry, ProposedCall, Tool, ToolCall, Toolbox, Verdict};
use crate::predictor::{store_per_pod, Forecast, ForecastModel};
use crate::sim::{ClusterState, Health};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanScenario {
    DiskPressure,
    HeapExhaustion,
    NodeLoss,
    ShardImbalance,
    NicDegradation,
}

impl PlanScenario {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanScenario::DiskPressure => "disk_pressure",
            PlanScenario::HeapExhaustion => "heap_exhaustion",
            PlanScenario::NodeLoss => "node_loss",
            PlanScenario::ShardImbalance => "shard_imbalance",
            PlanScenario::NicDegradation => "nic_degradation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanSource {
    Precomputed,
    MemoryMatch,
}

pub const FILL_TRIGGER_H: f64 = 24.0;
pub const UNREACHABLE_TRIGGER_S: u64 = 300;
pub const STORE_CV_TRIGGER: f64 = 0.30;
pub const NIC_RISK_TRIGGER: f64 = 0.5;

/// Predicate that must hold at staging and again at execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlanTrigger {
    FillWithin { host: String, hours: f64 },
    HeapTrend { pod: String, hours: f64 },
    Unreachable { pod: String, since_s: u64, after_s: u64 },
    StoreVariance { cv: f64 },
    NicRiskRising { host: String, risk: f64 },
    Similarity { record_id: String, min_similarity: f64 },
}

impl fmt::Display for PlanTrigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanTrigger::FillWithin { host, hours } => write!(f, "disk_fill[{host}].eta < {hours} h"),
            PlanTrigger::HeapTrend { pod, hours } => write!(f, "heap_trend[{pod}].eta < {hours} h"),
            PlanTrigger::Unreachable { pod, after_s, .. } => write!(f, "{pod} unreachable > {after_s} s"),
            PlanTrigger::StoreVariance { cv } => write!(f, "store CV > {cv}"),
            PlanTrigger::NicRiskRising { host, risk } => write!(f, "nic_risk[{host}] >= {risk}"),
            PlanTrigger::Similarity { record_id, min_similarity } => {
                write!(f, "similarity to {} >= {min_similarity}", &record_id[..record_id.len().min(12)])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemediationPlan {
    pub scenario: PlanScenario,
    pub subject: String,
    pub trigger: PlanTrigger,
    pub actions: Vec<ToolCall>,
    pub staged: bool,
    pub source: PlanSource,
    pub staged_at_s: u64,
}

impl RemediationPlan {
    /// Key for the per-plan cooldown.
    pub fn key(&self) -> String {
        match &self.trigger {
            PlanTrigger::Similarity { .. } => format!("memory:{}", self.scenario.as_str()),
            _ => format!("{}:{}", self.scenario.as_str(), self.subject),
        }
    }

    /// Flags that accompany the plan in its record.
    pub fn flags(&self) -> Vec<String> {
        match self.scenario {
            PlanScenario::NicDegradation => {
                vec![format!("hardware: replace eno2np1 (Broadcom BCM57416) on {}", self.subject)]
            }
            _ => Vec::new(),
        }
    }
}

fn calls(list: Vec<ProposedCall>) -> Vec<ToolCall> {
    list.into_iter()
        .enumerate()
        .map(|(i, p)| ToolCall::new(Tool::parse(&p.tool).expect("built-in tool"), p.args, i as u32 + 1))
        .collect()
}

fn precomputed(scenario: PlanScenario, subject: &str, trigger: PlanTrigger, actions: Vec<ProposedCall>, now: u64) -> RemediationPlan {
    RemediationPlan {
        scenario,
        subject: subject.into(),
        trigger,
        actions: calls(actions),
        staged: true,
        source: PlanSource::Precomputed,
        staged_at_s: now,
    }
}

/// Maps an actionable forecast onto its precomputed plan.
pub fn plan_from_forecast(f: &Forecast) -> Option<RemediationPlan> {
    let confident = f.confidence >= crate::predictor::ACTIONABLE_CONFIDENCE;
    match f.model {
        ForecastModel::DiskFill if confident && f.eta_hours.is_some_and(|h| h < FILL_TRIGGER_H) => Some(precomputed(
            PlanScenario::DiskPressure,
            &f.subject,
            PlanTrigger::FillWithin { host: f.subject.clone(), hours: FILL_TRIGGER_H },
            vec![
                ProposedCall::node(&f.subject, "du -sh /mnt/*"),
                ProposedCall::es_write("POST", "/_forcemerge?max_num_segments=1", None),
            ],
            f.at_s,
        )),
        ForecastModel::HeapTrend if confident && f.eta_hours.is_some_and(|h| h < FILL_TRIGGER_H) && f.slope_per_hour > 0.0 => {
            Some(precomputed(
                PlanScenario::HeapExhaustion,
                &f.subject,
                PlanTrigger::HeapTrend { pod: f.subject.clone(), hours: FILL_TRIGGER_H },
                vec![
                    ProposedCall::es_get("/_cat/indices?s=store.size:desc"),
                    ProposedCall::es_write("POST", "/_cluster/reroute", None),
                ],
                f.at_s,
            ))
        }
        ForecastModel::NicRisk if f.risk.is_some_and(|r| r >= NIC_RISK_TRIGGER) => Some(precomputed(
            PlanScenario::NicDegradation,
            &f.subject,
            PlanTrigger::NicRiskRising { host: f.subject.clone(), risk: NIC_RISK_TRIGGER },
            vec![
                ProposedCall::node(&f.subject, "cat /proc/net/bonding/bond0"),
                ProposedCall::es_write("PUT", "/_settings", Some(merge_throttle_body())),
            ],
            f.at_s,
        )),
        _ => None,
    }
}

/// Settings that cut merge-driven replication traffic.
pub fn merge_throttle_body() -> serde_json::Value {
    json!({"index": {"merge": {"scheduler": {"max_thread_count": 1}, "policy": {"max_merged_segment": "2gb"}}}})
}

pub fn plan_for_node_loss(pod: &str, since_s: u64, now: u64) -> Option<RemediationPlan> {
    (now >= since_s + UNREACHABLE_TRIGGER_S).then(|| {
        precomputed(
            PlanScenario::NodeLoss,
            pod,
            PlanTrigger::Unreachable { pod: pod.into(), since_s, after_s: UNREACHABLE_TRIGGER_S },
            vec![
                ProposedCall::es_get("/_cat/shards"),
                ProposedCall::es_write("POST", "/_cluster/reroute?retry_failed=true", None),
            ],
            now,
        )
    })
}

/// Coefficient of variation of per-data-pod store bytes.
pub fn store_cv(state: &ClusterState) -> f64 {
    let v: Vec<f64> = store_per_pod(state).values().map(|b| *b as f64).collect();
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    if mean == 0.0 {
        return 0.0;
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    var.sqrt() / mean
}

pub fn plan_for_imbalance(state: &ClusterState) -> Option<RemediationPlan> {
    let cv = store_cv(state);
    (cv > STORE_CV_TRIGGER).then(|| {
        precomputed(
            PlanScenario::ShardImbalance,
            "cluster",
            PlanTrigger::StoreVariance { cv: STORE_CV_TRIGGER },
            vec![
                ProposedCall::es_get("/_cat/shards"),
                ProposedCall::es_write("POST", "/_cluster/reroute", None),
            ],
            state.sim_time_s,
        )
    })
}

/// Re-checks a non-memory trigger against fresh forecasts and state.
pub fn trigger_holds(trigger: &PlanTrigger, forecasts: &[Forecast], state: &ClusterState) -> bool {
    let find = |model: ForecastModel, subject: &str| forecasts.iter().find(|f| f.model == model && f.subject == subject);
    match trigger {
        PlanTrigger::FillWithin { host, hours } => {
            find(ForecastModel::DiskFill, host).is_some_and(|f| f.eta_hours.is_some_and(|h| h < *hours))
        }
        PlanTrigger::HeapTrend { pod, hours } => {
            find(ForecastModel::HeapTrend, pod).is_some_and(|f| f.eta_hours.is_some_and(|h| h < *hours))
        }
        PlanTrigger::Unreachable { pod, .. } => state.pod(pod).is_some_and(|p| !p.is_running()),
        PlanTrigger::StoreVariance { cv } => store_cv(state) > *cv,
        PlanTrigger::NicRiskRising { host, risk } => {
            find(ForecastModel::NicRisk, host).is_some_and(|f| f.risk.is_some_and(|r| r >= *risk))
        }
        PlanTrigger::Similarity { .. } => true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PlanStatus {
    Completed,
    Discarded { reason: String },
    Aborted { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanExecution {
    pub plan: RemediationPlan,
    pub status: PlanStatus,
    pub executed: Vec<ToolCall>,
    pub audit: Vec<AuditEntry>,
    pub started_at_s: u64,
    pub ended_at_s: u64,
    pub health_before: Health,
    pub health_after: Health,
}

/// Runs a staged plan through the guarded tool path. `trigger_still_holds`
/// is evaluated by the caller just before execution.
pub fn execute_plan(plan: &RemediationPlan, trigger_still_holds: bool, tools: &mut dyn Toolbox) -> PlanExecution {
    let started = tools.now();
    let before = tools.health();
    let mut exec = PlanExecution {
        plan: plan.clone(),
        status: PlanStatus::Completed,
        executed: Vec::new(),
        audit: Vec::new(),
        started_at_s: started,
        ended_at_s: started,
        health_before: before,
        health_after: before,
    };
    if !plan.staged {
        exec.status = PlanStatus::Discarded { reason: "plan not staged".into() };
        return exec;
    }
    if !trigger_still_holds {
        exec.status = PlanStatus::Discarded { reason: format!("trigger no longer holds: {}", plan.trigger) };
        return exec;
    }
    for (i, call) in plan.actions.iter().enumerate() {
        let verdict = validate_command(call.tool, &call.args);
        let at_s = tools.now();
        if let Verdict::Denied { reason } = &verdict {
            exec.audit.push(AuditEntry {
                iteration: i as u32 + 1,
                at_s,
                tool: call.tool,
                args: call.args.clone(),
                verdict: verdict.clone(),
                executed: false,
                output_bytes: 0,
                output_head: String::new(),
                token_cost: 0,
            });
            exec.status = PlanStatus::Aborted { reason: format!("action {} denied: {reason}", i + 1) };
            break;
        }
        let result = tools.execute(call);
        let (out, failed) = match result {
            Ok(o) => (o, false),
            Err(e) => (e, true),
        };
        let head_end = (0..=out.len().min(512)).rev().find(|&k| out.is_char_boundary(k)).unwrap_or(0);
        exec.audit.push(AuditEntry {
            iteration: i as u32 + 1,
            at_s,
            tool: call.tool,
            args: call.args.clone(),
            verdict,
            executed: true,
            output_bytes: out.len(),
            output_head: out[..head_end].to_string(),
            token_cost: 0,
        });
        if failed {
            exec.status = PlanStatus::Aborted { reason: format!("action {} failed: {}", i + 1, out.trim()) };
            break;
        }
        exec.executed.push(call.clone());
    }
    exec.ended_at_s = tools.now();
    exec.health_after = tools.health();
    exec
}
