//! Lifecycle state machine and steady-state driver.

mod plans;
mod scheduler;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, GuardianConfig};
use crate::heal::{
    dispatch_call, run_loop, HealError, IncidentReport, LoopBudget, LoopContext, PlaybookInvestigator, ToolCall,
    Toolbox,
};
use crate::memory::{IncidentMemory, IncidentRecord, IncidentSignature, MemoryError, MemoryOutcome, RecordSource};
use crate::metrics::{export_metrics, MetricsSnapshot};
use crate::monitors::{route, scan_es_rules, scan_hardware, scan_kubernetes, Alert, AlertCode, Severity};
use crate::perfmodel::{
    calibrate, evaluate_sla, median, optimize_config, Baselines, OptimizedConfig, PerfError, ScalingCoefficients,
    SlaReport,
};
use crate::predictor::{pattern_predict, signature, signature_alert, Forecast, ForecastModel, Predictor};
use crate::sim::{ClusterState, Health, PodPhase, Probe, Scenario, SimError, SimEvent, SimOptions, Simulator};

pub use plans::{
    execute_plan, merge_throttle_body, plan_for_imbalance, plan_for_node_loss, plan_from_forecast, store_cv,
    trigger_holds, PlanExecution, PlanScenario, PlanSource, PlanStatus, PlanTrigger, RemediationPlan,
    FILL_TRIGGER_H, NIC_RISK_TRIGGER, STORE_CV_TRIGGER, UNREACHABLE_TRIGGER_S,
};
pub use scheduler::{DueTasks, Scheduler, TaskCounts};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Heal(#[from] HealError),
    #[error("cluster not GREEN after {timeout_s} s (health {health})")]
    StabilizeTimeout { timeout_s: u64, health: Health },
    #[error("illegal phase transition {from} -> {to}")]
    PhaseOrder { from: Phase, to: Phase },
    #[error("artifact write failed for {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Evaluate,
    Optimize,
    Deploy,
    Calibrate,
    Stabilize,
    Alert,
    Predict,
    Plan,
    Heal,
    Learn,
    Upgrade,
}

impl Phase {
    pub const ALL: [Phase; 11] = [
        Phase::Evaluate,
        Phase::Optimize,
        Phase::Deploy,
        Phase::Calibrate,
        Phase::Stabilize,
        Phase::Alert,
        Phase::Predict,
        Phase::Plan,
        Phase::Heal,
        Phase::Learn,
        Phase::Upgrade,
    ];

    /// 1-based phase number.
    pub fn ordinal(self) -> u8 {
        Phase::ALL.iter().position(|p| *p == self).expect("listed") as u8 + 1
    }

    pub fn is_steady(self) -> bool {
        matches!(self, Phase::Alert | Phase::Predict | Phase::Plan | Phase::Heal | Phase::Learn)
    }

    /// Whether `self -> next` is a legal transition.
    pub fn can_enter(self, next: Phase) -> bool {
        use Phase::*;
        match (self, next) {
            (Evaluate, Optimize) | (Optimize, Deploy) | (Deploy, Calibrate) | (Calibrate, Stabilize) => true,
            (Stabilize, n) => n.is_steady(),
            (a, b) if a.is_steady() && (b.is_steady() || b == Upgrade) => true,
            (Upgrade, n) => n.is_steady() || n == Calibrate,
            (Calibrate, n) => n.is_steady(),
            _ => false,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Waits for GREEN, ticking one second at a time. Returns the seconds waited.
pub fn stabilize(sim: &mut Simulator, timeout_s: u64) -> Result<(u64, Vec<SimEvent>), OrchestratorError> {
    let start = sim.now();
    let mut events = Vec::new();
    loop {
        if sim.health() == Health::Green {
            return Ok((sim.now() - start, events));
        }
        if sim.now() - start >= timeout_s {
            return Err(OrchestratorError::StabilizeTimeout { timeout_s, health: sim.health() });
        }
        events.extend(sim.tick(1)?);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Stopped after Evaluate: the SLA is infeasible.
    Halted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpgradeReport {
    pub from_version: String,
    pub to_version: String,
    pub restarted: Vec<String>,
    pub paused_at: Option<String>,
    pub baselines_replaced: bool,
    pub started_at_s: u64,
    pub ended_at_s: u64,
    pub max_pods_down: usize,
    pub no_op: bool,
}

/// Tick-level facts gathered while running.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub max_pending_pods: usize,
    pub first_pending_at_s: Option<u64>,
    pub max_concurrent_loops: u32,
    /// Most non-Running pods seen on any tick of a rolling upgrade.
    pub max_down_during_upgrade: usize,
    pub health_trace: Vec<(u64, Health)>,
}

/// Everything needed to re-run a recorded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: GuardianConfig,
    pub scenario: Scenario,
    pub memory_before: Vec<IncidentRecord>,
    pub run_log_sha256: String,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub status: RunStatus,
    pub evaluation: SlaReport,
    pub run_log: Vec<String>,
    pub alerts: Vec<Alert>,
    pub forecasts: Vec<Forecast>,
    pub reports: Vec<IncidentReport>,
    pub plan_executions: Vec<PlanExecution>,
    pub new_records: Vec<IncidentRecord>,
    pub baselines: Option<Baselines>,
    pub metrics: String,
    pub metric_history: Vec<String>,
    pub final_state: Option<ClusterState>,
    pub upgrade: Option<UpgradeReport>,
    pub counts: TaskCounts,
    pub observations: Observations,
    pub manifest: RunManifest,
}

impl RunArtifacts {
    pub fn run_log_hash(&self) -> String {
        run_log_hash(&self.run_log)
    }
}

pub fn run_log_hash(lines: &[String]) -> String {
    let mut h = Sha256::new();
    for l in lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Settings the planner and loop may not change without an operator.
const LOOP_SETTLE_NOTE: &str = "tool call settle";

struct Orchestrator {
    config: GuardianConfig,
    scenario: Scenario,
    phase: Phase,
    log: Vec<String>,
    sim: Option<Simulator>,
    baselines: Option<Baselines>,
    predictor: Predictor,
    memory: IncidentMemory,
    memory_before: Vec<IncidentRecord>,
    scheduler: Scheduler,
    busy: bool,
    in_loop: bool,
    probe_samples: BTreeMap<String, VecDeque<f64>>,
    alerts: Vec<Alert>,
    forecasts: Vec<Forecast>,
    latest_forecasts: Vec<Forecast>,
    last_scan: Vec<Alert>,
    criticals: Vec<Alert>,
    attach: BTreeMap<(AlertCode, String), Alert>,
    features: VecDeque<(u64, BTreeSet<String>, BTreeMap<String, f64>)>,
    staged: Vec<RemediationPlan>,
    cooldown: BTreeMap<String, u64>,
    unreachable_since: BTreeMap<String, u64>,
    reports: Vec<IncidentReport>,
    executions: Vec<PlanExecution>,
    new_records: Vec<IncidentRecord>,
    metrics: MetricsSnapshot,
    metric_history: Vec<String>,
    obs: Observations,
    last_health: Option<Health>,
    upgrade: Option<UpgradeReport>,
}

fn line(t: u64, kind: &str, data: Value) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("t".into(), json!(t));
    obj.insert("kind".into(), json!(kind));
    if let Value::Object(m) = data {
        for (k, v) in m {
            obj.insert(k, v);
        }
    } else if !data.is_null() {
        obj.insert("data".into(), data);
    }
    serde_json::to_string(&Value::Object(obj)).expect("log line serializes")
}

/// Toolbox that advances the whole engine, not just the simulator, after
/// each executed call.
struct Driver<'a> {
    orch: &'a mut Orchestrator,
    settle_s: u64,
}

impl Toolbox for Driver<'_> {
    fn execute(&mut self, call: &ToolCall) -> Result<String, String> {
        let out = dispatch_call(self.orch.sim_mut(), call);
        let now = self.orch.now();
        self.orch.push_log(now, "tool_call", json!({
            "tool": call.tool,
            "args": call.args,
            "ok": out.is_ok(),
        }));
        self.orch.advance(self.settle_s).map_err(|e| format!("error: {e} during {LOOP_SETTLE_NOTE}"))?;
        out
    }

    fn now(&self) -> u64 {
        self.orch.now()
    }

    fn health(&self) -> Health {
        self.orch.sim_ref().health()
    }
}

impl Orchestrator {
    fn new(config: GuardianConfig, scenario: Scenario, memory: IncidentMemory) -> Self {
        let memory_before = memory.records().to_vec();
        let predictor = Predictor::new(config.predictor.clone(), scenario.cluster_spec.eviction_threshold_pct);
        let scheduler = Scheduler::new(config.cadence, 0);
        Self {
            config,
            scenario,
            phase: Phase::Evaluate,
            log: Vec::new(),
            sim: None,
            baselines: None,
            predictor,
            memory,
            memory_before,
            scheduler,
            busy: false,
            in_loop: false,
            probe_samples: BTreeMap::new(),
            alerts: Vec::new(),
            forecasts: Vec::new(),
            latest_forecasts: Vec::new(),
            last_scan: Vec::new(),
            criticals: Vec::new(),
            attach: BTreeMap::new(),
            features: VecDeque::new(),
            staged: Vec::new(),
            cooldown: BTreeMap::new(),
            unreachable_since: BTreeMap::new(),
            reports: Vec::new(),
            executions: Vec::new(),
            new_records: Vec::new(),
            metrics: MetricsSnapshot::default(),
            metric_history: Vec::new(),
            obs: Observations::default(),
            last_health: None,
            upgrade: None,
        }
    }

    fn sim_mut(&mut self) -> &mut Simulator {
        self.sim.as_mut().expect("simulator deployed")
    }

    fn sim_ref(&self) -> &Simulator {
        self.sim.as_ref().expect("simulator deployed")
    }

    fn now(&self) -> u64 {
        self.sim.as_ref().map_or(0, Simulator::now)
    }

    fn push_log(&mut self, t: u64, kind: &str, data: Value) {
        self.log.push(line(t, kind, data));
    }

    fn enter(&mut self, next: Phase) -> Result<(), OrchestratorError> {
        if next == self.phase || (self.phase == Phase::Upgrade && next.is_steady()) {
            return Ok(());
        }
        if !self.phase.can_enter(next) {
            return Err(OrchestratorError::PhaseOrder { from: self.phase, to: next });
        }
        self.phase = next;
        self.metrics.phase = next.ordinal();
        let now = self.now();
        self.push_log(now, "phase", json!({"phase": next}));
        Ok(())
    }

    // ---------------------------------------------------------------- lifecycle

    fn run(mut self) -> Result<RunArtifacts, OrchestratorError> {
        self.config.validate()?;
        let coeffs = ScalingCoefficients::default();
        let evaluation = evaluate_sla(&self.config.sla, &coeffs)?;
        self.push_log(0, "phase", json!({"phase": Phase::Evaluate}));
        self.push_log(0, "evaluation", json!({"target": self.config.sla, "report": evaluation}));
        if !evaluation.feasible {
            return Ok(self.finish(RunStatus::Halted, evaluation));
        }

        self.enter(Phase::Optimize)?;
        let optimized: OptimizedConfig = optimize_config(self.config.workload);
        self.push_log(0, "optimized", json!({"settings": optimized.settings_body(), "note": optimized.note}));

        self.enter(Phase::Deploy)?;
        let seed = self.config.seed.unwrap_or(self.scenario.seed);
        let options = if self.config.zero_noise { SimOptions::zero_noise() } else { SimOptions::default() };
        let mut sim = self.scenario.instantiate(seed, options)?;
        sim.apply_settings(optimized.index_settings.clone());
        self.push_log(0, "deployed", json!({
            "scenario": self.scenario.name,
            "seed": seed,
            "hosts": sim.state().hosts.len(),
            "pods": sim.state().pods.len(),
            "indices": sim.state().indices.len(),
            "primary_shards": sim.state().primary_shard_count(),
            "state_hash": sim.state().state_hash(),
        }));
        self.sim = Some(sim);

        self.enter(Phase::Calibrate)?;
        let b = calibrate(self.sim_mut())?;
        self.push_log(0, "baselines", serde_json::to_value(&b).expect("baselines serialize"));
        self.baselines = Some(b);

        self.enter(Phase::Stabilize)?;
        let timeout = self.config.stabilize_timeout_s;
        let (waited, events) = stabilize(self.sim_mut(), timeout)?;
        self.log_events(&events);
        let now = self.now();
        self.push_log(now, "stabilized", json!({"waited_s": waited, "health": self.sim_ref().health()}));
        self.scheduler = Scheduler::new(self.config.cadence, now);

        self.enter(Phase::Alert)?;
        self.update_cluster_metrics();
        while self.now() < self.scenario.duration_s {
            self.advance(1)?;
            self.maybe_upgrade()?;
        }
        Ok(self.finish(RunStatus::Completed, evaluation))
    }

    fn finish(mut self, status: RunStatus, evaluation: SlaReport) -> RunArtifacts {
        let now = self.now();
        if let Some(sim) = &self.sim {
            let st = sim.state();
            self.log.push(line(now, "end", json!({
                "health": st.health,
                "state_hash": st.state_hash(),
                "memory_hash": self.memory.state_hash(),
            })));
        }
        self.update_cluster_metrics();
        let metrics = export_metrics(&self.metrics);
        self.metric_history.push(metrics.clone());
        let manifest = RunManifest {
            config: self.config.clone(),
            scenario: self.scenario.clone(),
            memory_before: self.memory_before.clone(),
            run_log_sha256: run_log_hash(&self.log),
        };
        RunArtifacts {
            status,
            evaluation,
            run_log: self.log,
            alerts: self.alerts,
            forecasts: self.forecasts,
            reports: self.reports,
            plan_executions: self.executions,
            new_records: self.new_records,
            baselines: self.baselines,
            metrics,
            metric_history: self.metric_history,
            final_state: self.sim.map(|s| s.snapshot()),
            upgrade: self.upgrade,
            counts: self.scheduler.counts(),
            observations: self.obs,
            manifest,
        }
    }

    // ---------------------------------------------------------------- ticking

    fn log_events(&mut self, events: &[SimEvent]) {
        for e in events {
            let l = line(e.at_s, "event", json!({"source": e.kind, "subject": e.subject, "message": e.message}));
            self.log.push(l);
        }
    }

    fn observe_tick(&mut self) {
        let st = self.sim_ref().state();
        let now = st.sim_time_s;
        let pending = st.count_phase(PodPhase::Pending);
        let health = st.health;
        let down = st.pods.iter().filter(|p| !p.is_running()).count();
        if self.phase == Phase::Upgrade {
            self.obs.max_down_during_upgrade = self.obs.max_down_during_upgrade.max(down);
        }
        if pending > self.obs.max_pending_pods {
            self.obs.max_pending_pods = pending;
        }
        if pending > 0 && self.obs.first_pending_at_s.is_none() {
            self.obs.first_pending_at_s = Some(now);
        }
        if self.last_health != Some(health) {
            self.obs.health_trace.push((now, health));
            self.push_log(now, "health", json!({"status": health}));
            self.last_health = Some(health);
        }
    }

    /// Advances `dt_s` seconds, running every task that falls due.
    fn advance(&mut self, dt_s: u64) -> Result<(), OrchestratorError> {
        for _ in 0..dt_s {
            let events = self.sim_mut().tick(1)?;
            self.log_events(&events);
            self.observe_tick();
            let now = self.now();
            if self.busy {
                self.scheduler.set_busy(true);
            }
            let due = self.scheduler.tick(now);
            if due.rules {
                self.rules_scan(now)?;
            }
            if due.predictor {
                self.predict(now)?;
            }
            if self.in_loop || self.busy {
                continue;
            }
            self.execute_staged(now)?;
            if due.ai {
                self.run_ai(now, due.preempted)?;
            }
        }
        Ok(())
    }

    fn rules_scan(&mut self, now: u64) -> Result<(), OrchestratorError> {
        let mut probes: Vec<Probe> = Probe::QUERIES.to_vec();
        probes.push(Probe::WriteBulk { docs: 100 });
        let window = self.config.probe_window;
        for p in probes {
            if let Ok(ms) = self.sim_mut().run_probe(p) {
                let q = self.probe_samples.entry(p.name()).or_default();
                q.push_back(ms);
                while q.len() > window {
                    q.pop_front();
                }
            }
        }
        let measured: BTreeMap<String, f64> = self
            .probe_samples
            .iter()
            .map(|(k, v)| (k.clone(), median(&v.iter().copied().collect::<Vec<_>>())))
            .collect();
        self.metrics.probe_latency_ms = measured.clone();

        let state = self.sim.as_ref().expect("simulator deployed").state();
        self.predictor.observe(state);
        let th = &self.config.thresholds;
        let mut found = scan_hardware(state, th);
        found.extend(scan_kubernetes(state, th));
        found.extend(scan_es_rules(state, &measured, self.baselines.as_ref(), th));
        for p in &state.pods {
            if p.is_running() {
                self.unreachable_since.remove(&p.pod_id);
            } else {
                self.unreachable_since.entry(p.pod_id.clone()).or_insert(now);
            }
        }
        self.enter(Phase::Alert)?;
        self.record_alerts(now, &found);
        Ok(())
    }

    fn record_alerts(&mut self, now: u64, found: &[Alert]) {
        for a in found {
            *self.metrics.alerts_total.entry(format!("{:?}", a.severity).to_uppercase()).or_default() += 1;
            self.push_log(now, "alert", serde_json::to_value(a).expect("alert serializes"));
            self.alerts.push(a.clone());
        }
        let routing = route(found);
        let cats: BTreeSet<String> = found
            .iter()
            .filter(|a| a.severity != Severity::Info && signature_alert(a.code))
            .map(|a| format!("alert:{}", a.code.as_str()))
            .collect();
        self.push_features(now, cats, BTreeMap::new());
        let triggers = routing.triggers_loop();
        for a in routing.attach {
            self.attach.insert((a.code, a.subject.clone()), a);
        }
        if triggers {
            self.criticals = routing.trigger.clone();
            self.scheduler.raise_critical(now);
        }
        self.last_scan = found.to_vec();
        self.update_cluster_metrics();
    }

    fn push_features(&mut self, now: u64, cats: BTreeSet<String>, numeric: BTreeMap<String, f64>) {
        if cats.is_empty() && numeric.is_empty() {
            return;
        }
        self.features.push_back((now, cats, numeric));
        let keep = self.config.precursor_window_s * 2;
        while self.features.front().is_some_and(|(t, _, _)| t + keep < now) {
            self.features.pop_front();
        }
    }

    fn update_cluster_metrics(&mut self) {
        let Some(sim) = &self.sim else { return };
        let st = sim.state();
        self.metrics.cluster_status = st.health.gauge();
        self.metrics.node_heap_pct =
            st.pods.iter().filter(|p| p.is_running()).map(|p| (p.pod_id.clone(), p.heap_pct)).collect();
        self.metrics.node_disk_pct = st.hosts.iter().map(|h| (h.host_id.clone(), h.disk_pct() * 100.0)).collect();
        self.metrics.phase = self.phase.ordinal();
    }

    fn current_signature(&self) -> IncidentSignature {
        signature(&self.last_scan, &self.latest_forecasts)
    }

    fn predict(&mut self, now: u64) -> Result<(), OrchestratorError> {
        self.enter(Phase::Predict)?;
        let fs = self.predictor.forecast(self.sim_ref().state());
        let mut breaches = Vec::new();
        for f in &fs {
            self.push_log(now, "forecast", serde_json::to_value(f).expect("forecast serializes"));
            if f.actionable() {
                breaches.push(Alert::new(
                    Severity::Info,
                    AlertCode::PredictedBreach,
                    &f.subject,
                    match (f.eta_hours, f.risk) {
                        (Some(h), _) => format!("{} eta {h:.2} h", f.model),
                        (_, Some(r)) => format!("{} risk {r:.2}", f.model),
                        _ => f.model.to_string(),
                    },
                    now,
                ));
            }
        }
        for a in &breaches {
            *self.metrics.alerts_total.entry("INFO".into()).or_default() += 1;
            self.push_log(now, "alert", serde_json::to_value(a).expect("alert serializes"));
            self.alerts.push(a.clone());
        }
        let sig = signature(&[], &fs);
        self.push_features(now, sig.categorical, sig.numeric);
        self.update_forecast_metrics(&fs);
        self.forecasts.extend(fs.iter().cloned());
        self.latest_forecasts = fs;
        self.plan(now)
    }

    fn update_forecast_metrics(&mut self, fs: &[Forecast]) {
        for f in fs {
            match f.model {
                ForecastModel::DiskFill => {
                    self.metrics.pred_disk_fill_hours.insert(f.subject.clone(), f.eta_hours);
                }
                ForecastModel::HeapTrend => {
                    self.metrics.pred_heap_hours.insert(f.subject.clone(), f.eta_hours);
                }
                ForecastModel::NvmeWear => {
                    self.metrics.pred_nvme_wear_months.insert(f.subject.clone(), f.eta_months());
                }
                ForecastModel::NicRisk => {
                    self.metrics.pred_nic_risk.insert(f.subject.clone(), f.risk.unwrap_or(0.0));
                }
                _ => {}
            }
        }
    }

    // ---------------------------------------------------------------- planning

    fn plan(&mut self, now: u64) -> Result<(), OrchestratorError> {
        let mut candidates: Vec<RemediationPlan> = self.latest_forecasts.iter().filter_map(plan_from_forecast).collect();
        for (pod, since) in &self.unreachable_since {
            candidates.extend(plan_for_node_loss(pod, *since, now));
        }
        candidates.extend(plan_for_imbalance(self.sim_ref().state()));
        let sig = self.current_signature();
        let pc = &self.config.predictor;
        let matches = pattern_predict(&sig, &self.memory, pc.min_similarity, pc.max_matches, now);
        if let Some(m) = matches.into_iter().next() {
            self.push_log(now, "pattern_match", json!({
                "record": m.record.id,
                "similarity": m.similarity,
                "actions": m.plan.actions.len(),
            }));
            candidates.insert(0, m.plan);
        }
        let mut staged_any = false;
        for mut p in candidates {
            let key = p.key();
            if self.cooldown.get(&key).is_some_and(|until| now < *until) || self.staged.iter().any(|s| s.key() == key) {
                continue;
            }
            p.staged_at_s = now;
            self.push_log(now, "plan_staged", json!({
                "scenario": p.scenario,
                "subject": p.subject,
                "source": p.source,
                "trigger": p.trigger.to_string(),
                "actions": p.actions.len(),
            }));
            self.cooldown.insert(key, now + self.config.plan_cooldown_s);
            self.staged.push(p);
            staged_any = true;
        }
        if staged_any {
            self.enter(Phase::Plan)?;
        }
        Ok(())
    }

    fn plan_trigger_holds(&self, plan: &RemediationPlan) -> bool {
        match &plan.trigger {
            PlanTrigger::Similarity { record_id, min_similarity } => {
                let sig = self.current_signature();
                self.memory
                    .records()
                    .iter()
                    .find(|r| &r.id == record_id)
                    .is_some_and(|r| crate::memory::similarity(&sig, &r.signature) >= *min_similarity)
            }
            t => trigger_holds(t, &self.latest_forecasts, self.sim_ref().state()),
        }
    }

    fn execute_staged(&mut self, now: u64) -> Result<(), OrchestratorError> {
        let ready: Vec<RemediationPlan> = {
            let (ready, later): (Vec<_>, Vec<_>) = std::mem::take(&mut self.staged).into_iter().partition(|p| p.staged_at_s < now);
            self.staged = later;
            ready
        };
        for plan in ready {
            let holds = self.plan_trigger_holds(&plan);
            self.enter(Phase::Plan)?;
            self.busy = true;
            self.scheduler.set_busy(true);
            let settle = self.config.tool_settle_s;
            let exec = execute_plan(&plan, holds, &mut Driver { orch: self, settle_s: settle });
            self.busy = false;
            self.scheduler.set_busy(false);
            let end = self.now();
            self.push_log(end, "plan_executed", json!({
                "scenario": plan.scenario,
                "subject": plan.subject,
                "source": plan.source,
                "status": exec.status,
                "executed": exec.executed.len(),
                "started_at": exec.started_at_s,
            }));
            match &exec.status {
                PlanStatus::Completed if !exec.executed.is_empty() => self.learn_from_plan(&exec)?,
                PlanStatus::Aborted { reason } => {
                    let denied = exec.audit.iter().any(|a| !a.verdict.is_allowed());
                    let sev = if denied { Severity::Critical } else { Severity::Warning };
                    let alert = Alert::new(
                        sev,
                        AlertCode::PlanEscalation,
                        plan.scenario.as_str(),
                        format!("{} plan aborted: {reason}", plan.scenario.as_str()),
                        end,
                    );
                    self.record_alerts(end, &[alert]);
                    if !exec.executed.is_empty() {
                        self.learn_from_plan(&exec)?;
                    }
                }
                _ => {}
            }
            self.executions.push(exec);
        }
        Ok(())
    }

    fn plan_resolved(&self, exec: &PlanExecution) -> bool {
        let st = self.sim_ref().state();
        match exec.plan.scenario {
            PlanScenario::DiskPressure => {
                let warn = self.config.thresholds.disk_warn_pct;
                st.health != Health::Red && st.hosts.iter().all(|h| (h.df_pct() as f64) < warn)
            }
            _ => false,
        }
    }

    fn learn_from_plan(&mut self, exec: &PlanExecution) -> Result<(), OrchestratorError> {
        self.enter(Phase::Learn)?;
        let outcome = match (&exec.status, exec.plan.source) {
            (PlanStatus::Aborted { .. }, _) => MemoryOutcome::Escalated,
            (_, PlanSource::MemoryMatch) if self.plan_resolved(exec) => MemoryOutcome::Resolved,
            _ => MemoryOutcome::Mitigated,
        };
        let sig = {
            let s = self.current_signature();
            if s.is_empty() {
                IncidentSignature::new([format!("plan:{}", exec.plan.scenario.as_str())], BTreeMap::new())
            } else {
                s
            }
        };
        let chain = exec
            .audit
            .iter()
            .map(|a| {
                let call = ToolCall::new(a.tool, a.args.clone(), a.iteration);
                crate::heal::ChainStep::new(a.tool.as_str(), &call.command_line(), a.output_head.lines().next().unwrap_or(""))
            })
            .collect();
        let actions: Vec<ToolCall> = exec.executed.iter().filter(|c| c.is_mutating()).cloned().collect();
        let source = match exec.plan.source {
            PlanSource::Precomputed => RecordSource::Precomputed,
            PlanSource::MemoryMatch => RecordSource::MemoryMatch,
        };
        let record = IncidentRecord::new(
            exec.started_at_s,
            exec.ended_at_s,
            source,
            vec![exec.plan.trigger.to_string()],
            sig,
            chain,
            actions,
            outcome,
            vec![exec.health_before.to_string(), exec.health_after.to_string()],
        );
        self.append_record(record)?;
        self.metrics.remediations_total += 1;
        Ok(())
    }

    fn append_record(&mut self, record: IncidentRecord) -> Result<(), OrchestratorError> {
        let id = self.memory.append(record.clone())?;
        self.metrics.incidents_total += 1;
        let now = self.now();
        self.push_log(now, "memory_append", json!({"id": id, "outcome": record.outcome, "source": record.source}));
        self.new_records.push(self.memory.records().iter().find(|r| r.id == id).cloned().unwrap_or(record));
        Ok(())
    }

    // ---------------------------------------------------------------- healing

    /// Features seen before `before_s` within the precursor window.
    fn precursor_signature(&self, before_s: u64) -> IncidentSignature {
        let from = before_s.saturating_sub(self.config.precursor_window_s);
        let mut cats = BTreeSet::new();
        let mut numeric = BTreeMap::new();
        for (t, c, n) in &self.features {
            if *t >= from && *t < before_s {
                cats.extend(c.iter().cloned());
                for (k, v) in n {
                    numeric.insert(k.clone(), *v);
                }
            }
        }
        IncidentSignature::new(cats, numeric)
    }

    fn run_ai(&mut self, now: u64, preempted: bool) -> Result<(), OrchestratorError> {
        self.enter(Phase::Heal)?;
        self.scheduler.loop_started();
        self.in_loop = true;
        self.obs.max_concurrent_loops = self.obs.max_concurrent_loops.max(1);
        let active: BTreeSet<(AlertCode, String)> = self.last_scan.iter().map(|a| (a.code, a.subject.clone())).collect();
        let mut trigger: Vec<Alert> = if preempted { std::mem::take(&mut self.criticals) } else { Vec::new() };
        trigger.extend(
            std::mem::take(&mut self.attach)
                .into_iter()
                .filter(|(k, _)| active.contains(k))
                .map(|(_, a)| a),
        );
        let sig = self.current_signature();
        let pc = &self.config.predictor;
        let precedents: Vec<IncidentRecord> =
            pattern_predict(&sig, &self.memory, pc.min_similarity, pc.max_matches, now).into_iter().map(|m| m.record).collect();
        let ctx = LoopContext {
            trigger: trigger.clone(),
            forecasts: self.latest_forecasts.iter().filter(|f| f.actionable()).cloned().collect(),
            precedents,
            started_at_s: now,
            max_iterations: self.config.max_iterations,
        };
        self.push_log(now, "ai_loop_start", json!({
            "preempted": preempted,
            "trigger": trigger.iter().map(|a| a.code.as_str()).collect::<Vec<_>>(),
        }));
        let budget = LoopBudget::new(self.config.max_iterations, self.config.max_tokens);
        let settle = self.config.tool_settle_s;
        let mut investigator = PlaybookInvestigator::new();
        let result = run_loop(&ctx, &mut investigator, &mut Driver { orch: self, settle_s: settle }, budget);
        self.in_loop = false;
        let end = self.now();
        let report = match result {
            Ok(r) => r,
            Err(e) => {
                self.push_log(end, "ai_loop_error", json!({"error": e.to_string()}));
                self.finish_loop(end, preempted);
                return Err(e.into());
            }
        };
        self.push_log(end, "ai_loop_end", json!({
            "outcome": report.outcome,
            "summary": report.summary,
            "iterations": report.totals.iterations,
            "tokens": report.totals.tokens,
            "actions": report.actions.len(),
            "final_health": report.final_health,
        }));
        self.metrics.ai_loop_runs_total += 1;
        self.metrics.ai_loop_iterations = report.totals.iterations;
        self.metrics.ai_loop_tokens_total += report.totals.tokens;
        self.metrics.ai_loop_duration_seconds = report.totals.duration_s;
        if let Some(outcome) = report.outcome.memory_outcome() {
            self.enter(Phase::Learn)?;
            let trigger_at = trigger.iter().map(|a| a.at_s).min().unwrap_or(now);
            let mut sig = self.precursor_signature(trigger_at);
            if sig.is_empty() {
                sig = signature(&trigger, &ctx.forecasts);
            }
            if sig.is_empty() {
                sig = IncidentSignature::new(["trigger:scheduled"], BTreeMap::new());
            }
            let transitions: Vec<String> = self
                .obs
                .health_trace
                .iter()
                .filter(|(t, _)| *t >= report.opened_at_s && *t <= report.closed_at_s)
                .map(|(t, h)| format!("{t}:{h}"))
                .collect();
            let record = IncidentRecord::new(
                report.opened_at_s,
                report.closed_at_s,
                RecordSource::AiLoop,
                trigger.iter().map(|a| a.code.as_str().to_string()).collect::<BTreeSet<_>>().into_iter().collect(),
                sig,
                report.causal_chain.clone(),
                report.actions.clone(),
                outcome,
                transitions,
            );
            self.append_record(record)?;
            if !report.actions.is_empty() {
                self.metrics.remediations_total += 1;
            }
        }
        self.reports.push(report);
        self.update_cluster_metrics();
        self.metric_history.push(export_metrics(&self.metrics));
        self.finish_loop(end, preempted);
        Ok(())
    }

    fn finish_loop(&mut self, end: u64, preempted: bool) {
        let queued = self.scheduler.loop_finished(end, preempted);
        let still: Vec<Alert> = if queued { self.fresh_criticals() } else { Vec::new() };
        if queued && !still.is_empty() {
            self.criticals = still;
            self.scheduler.raise_critical(end);
        } else {
            self.criticals.clear();
            if queued {
                self.push_log(end, "retrigger_dropped", json!({"reason": "no CRITICAL condition at loop end"}));
            }
        }
    }

    /// Criticals the rules would raise right now; nothing is logged.
    fn fresh_criticals(&self) -> Vec<Alert> {
        let state = self.sim_ref().state();
        let th = &self.config.thresholds;
        let mut found = scan_hardware(state, th);
        found.extend(scan_kubernetes(state, th));
        found.extend(scan_es_rules(state, &self.metrics.probe_latency_ms, self.baselines.as_ref(), th));
        found.retain(|a| a.severity == Severity::Critical);
        found
    }

    // ---------------------------------------------------------------- upgrade

    fn pod_back(&self, pod: &str) -> bool {
        let st = self.sim_ref().state();
        st.health == Health::Green && st.pod(pod).is_some_and(|p| p.is_running())
    }

    fn leave_upgrade(&mut self) {
        self.phase = Phase::Alert;
        self.metrics.phase = Phase::Alert.ordinal();
        let now = self.now();
        self.push_log(now, "phase", json!({"phase": Phase::Alert}));
    }

    fn maybe_upgrade(&mut self) -> Result<(), OrchestratorError> {
        let Some(up) = self.config.upgrade.clone() else { return Ok(()) };
        if self.upgrade.is_some() || self.now() < up.at_s || self.in_loop || self.busy {
            return Ok(());
        }
        if self.sim_ref().health() != Health::Green || !self.phase.is_steady() {
            return Ok(());
        }
        let report = self.rolling_upgrade(&up.target_version, up.green_timeout_s)?;
        self.upgrade = Some(report);
        Ok(())
    }

    fn rolling_upgrade(&mut self, target: &str, green_timeout_s: u64) -> Result<UpgradeReport, OrchestratorError> {
        let start = self.now();
        let from = self.sim_ref().state().es_version.clone();
        let mut report = UpgradeReport {
            from_version: from.clone(),
            to_version: target.into(),
            started_at_s: start,
            ended_at_s: start,
            ..UpgradeReport::default()
        };
        if from == target {
            report.no_op = true;
            self.push_log(start, "upgrade", json!({"no_op": true, "version": target}));
            return Ok(report);
        }
        self.enter(Phase::Upgrade)?;
        self.busy = true;
        self.scheduler.set_busy(true);
        let order: Vec<String> = self.sim_ref().state().pods.iter().map(|p| p.pod_id.clone()).collect();
        for pod in order {
            self.sim_mut().restart_pod(&pod, Some(target))?;
            let now = self.now();
            self.push_log(now, "upgrade_restart", json!({"pod": pod, "version": target}));
            report.restarted.push(pod.clone());
            let mut waited = 0;
            loop {
                let down = self.sim_ref().state().pods.iter().filter(|p| !p.is_running()).count();
                report.max_pods_down = report.max_pods_down.max(down);
                if self.pod_back(&pod) {
                    break;
                }
                if waited >= green_timeout_s {
                    break;
                }
                self.advance(1)?;
                waited += 1;
            }
            if !self.pod_back(&pod) {
                let now = self.now();
                report.paused_at = Some(pod.clone());
                self.busy = false;
                self.scheduler.set_busy(false);
                let alert = Alert::new(
                    Severity::Critical,
                    AlertCode::UpgradePaused,
                    &pod,
                    format!("upgrade paused: cluster {} {green_timeout_s} s after restarting {pod}", self.sim_ref().health()),
                    now,
                );
                self.record_alerts(now, &[alert]);
                self.push_log(now, "upgrade_paused", json!({"pod": pod}));
                report.ended_at_s = now;
                self.leave_upgrade();
                return Ok(report);
            }
        }
        self.sim_mut().set_cluster_version(target);
        self.enter(Phase::Calibrate)?;
        let b = calibrate(self.sim_mut())?;
        let now = self.now();
        self.push_log(now, "baselines", serde_json::to_value(&b).expect("baselines serialize"));
        self.baselines = Some(b);
        report.baselines_replaced = true;
        report.ended_at_s = now;
        self.busy = false;
        self.scheduler.set_busy(false);
        self.push_log(now, "upgrade", serde_json::to_value(&report).expect("report serializes"));
        self.enter(Phase::Alert)?;
        Ok(report)
    }
}

/// Runs the full lifecycle against `scenario`, using and extending `memory`.
pub fn run_with_memory(
    config: GuardianConfig,
    scenario: Scenario,
    memory: IncidentMemory,
) -> Result<RunArtifacts, OrchestratorError> {
    Orchestrator::new(config, scenario, memory).run()
}

/// Runs the full lifecycle, opening memory from the configured file.
pub fn run_lifecycle(config: GuardianConfig, scenario: Scenario) -> Result<RunArtifacts, OrchestratorError> {
    let memory = match config.memory_file() {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|source| OrchestratorError::Io { path: dir.into(), source })?;
            }
            IncidentMemory::open(&p)?
        }
        None => IncidentMemory::in_memory(),
    };
    let artifacts = run_with_memory(config.clone(), scenario, memory)?;
    if let Some(dir) = &config.out_dir {
        write_artifacts(dir, &artifacts)?;
    }
    Ok(artifacts)
}

fn write(path: &Path, text: &str) -> Result<(), OrchestratorError> {
    std::fs::write(path, text).map_err(|source| OrchestratorError::Io { path: path.into(), source })
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items.iter().map(|i| serde_json::to_string(i).expect("serializes") + "\n").collect()
}

/// Writes the run directory.
pub fn write_artifacts(dir: &Path, a: &RunArtifacts) -> Result<(), OrchestratorError> {
    let reports = dir.join("reports");
    std::fs::create_dir_all(&reports).map_err(|source| OrchestratorError::Io { path: reports.clone(), source })?;
    write(&dir.join("run-log.jsonl"), &a.run_log.iter().map(|l| format!("{l}\n")).collect::<String>())?;
    write(&dir.join("alerts.jsonl"), &jsonl(&a.alerts))?;
    write(&dir.join("forecasts.jsonl"), &jsonl(&a.forecasts))?;
    write(&dir.join("plans.jsonl"), &jsonl(&a.plan_executions))?;
    write(&dir.join("metrics.prom"), &a.metrics)?;
    write(&dir.join("evaluation.json"), &(serde_json::to_string_pretty(&a.evaluation).expect("serializes") + "\n"))?;
    write(&dir.join("manifest.json"), &(serde_json::to_string_pretty(&a.manifest).expect("serializes") + "\n"))?;
    if let Some(b) = &a.baselines {
        write(&dir.join("baselines.json"), &(b.to_json() + "\n"))?;
    }
    if let Some(u) = &a.upgrade {
        write(&dir.join("upgrade.json"), &(serde_json::to_string_pretty(u).expect("serializes") + "\n"))?;
    }
    for (i, r) in a.reports.iter().enumerate() {
        let p = reports.join(format!("incident-{:03}.json", i + 1));
        write(&p, &(serde_json::to_string_pretty(r).expect("serializes") + "\n"))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayVerdict {
    pub expected_sha256: String,
    pub actual_sha256: String,
    pub matches: bool,
    pub lines: usize,
}

/// Re-runs a recorded manifest with its original memory and compares the
/// run-log digest.
pub fn replay(manifest: &RunManifest) -> Result<ReplayVerdict, OrchestratorError> {
    let mut memory = IncidentMemory::in_memory();
    for r in &manifest.memory_before {
        memory.append(r.clone())?;
    }
    let mut config = manifest.config.clone();
    config.out_dir = None;
    config.memory_path = None;
    let a = run_with_memory(config, manifest.scenario.clone(), memory)?;
    let actual = a.run_log_hash();
    Ok(ReplayVerdict {
        matches: actual == manifest.run_log_sha256,
        expected_sha256: manifest.run_log_sha256.clone(),
        actual_sha256: actual,
        lines: a.run_log.len(),
    })
}
