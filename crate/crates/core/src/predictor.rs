//! Trend forecasting and pattern matching against incident memory.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heal::{Tool, ToolCall};
use crate::memory::{IncidentMemory, IncidentRecord, IncidentSignature, MemoryOutcome};
use crate::monitors::{Alert, AlertCode, Severity};
use crate::orchestrator::{PlanScenario, PlanSource, PlanTrigger, RemediationPlan};
use crate::sim::{ClusterState, LogLevel, LogLine, PodRole, GB};

pub const HOURS_PER_MONTH: f64 = 730.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictorError {
    #[error("insufficient data: need {need} points, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("degenerate series: all timestamps identical")]
    DegenerateSeries,
    #[error("timestamps must increase strictly: {prev} then {next}")]
    NonMonotonic { prev: u64, next: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Rolling window of `(t_s, value)` samples with strictly increasing time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub subject: String,
    points: VecDeque<(u64, f64)>,
    capacity: usize,
}

impl Series {
    pub const DEFAULT_CAPACITY: usize = 60;

    pub fn new(subject: &str, capacity: usize) -> Self {
        Self { subject: subject.into(), points: VecDeque::new(), capacity: capacity.max(2) }
    }

    pub fn from_points(subject: &str, points: &[(u64, f64)]) -> Result<Self, PredictorError> {
        let mut s = Self::new(subject, points.len().max(Self::DEFAULT_CAPACITY));
        for &(t, v) in points {
            s.push(t, v)?;
        }
        Ok(s)
    }

    pub fn push(&mut self, t_s: u64, value: f64) -> Result<(), PredictorError> {
        if let Some(&(prev, _)) = self.points.back() {
            if t_s <= prev {
                return Err(PredictorError::NonMonotonic { prev, next: t_s });
            }
        }
        if !value.is_finite() {
            return Err(PredictorError::InvalidParameter(format!("non-finite sample {value}")));
        }
        self.points.push_back((t_s, value));
        while self.points.len() > self.capacity {
            self.points.pop_front();
        }
        Ok(())
    }

    pub fn points(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.points.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        self.points.back().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope_per_hour: f64,
    /// Value at `t = 0`.
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares with time in hours.
pub fn fit_trend(series: &Series) -> Result<TrendFit, PredictorError> {
    let n = series.len();
    if n < 2 {
        return Err(PredictorError::InsufficientData { need: 2, have: n });
    }
    let t0 = series.points[0].0;
    let xs: Vec<f64> = series.points().map(|(t, _)| (t - t0) as f64 / 3600.0).collect();
    let ys: Vec<f64> = series.points().map(|(_, y)| y).collect();
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(PredictorError::DegenerateSeries);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept_local = my - slope * mx;
    let intercept = intercept_local - slope * (t0 as f64 / 3600.0);
    let r2 = if syy == 0.0 { 1.0 } else { ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0) };
    Ok(TrendFit { slope_per_hour: slope, intercept, r2 })
}

/// Hours until `current` reaches `threshold` at `slope` per hour.
pub fn eta_hours(current: f64, slope_per_hour: f64, threshold: f64) -> Option<f64> {
    if current >= threshold {
        return Some(0.0);
    }
    (slope_per_hour > 0.0).then(|| (threshold - current) / slope_per_hour)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastModel {
    DiskFill,
    HeapTrend,
    ShardGrowth,
    NvmeWear,
    NicRisk,
    LogEscalation,
}

impl ForecastModel {
    pub const ALL: [ForecastModel; 6] = [
        ForecastModel::DiskFill,
        ForecastModel::HeapTrend,
        ForecastModel::ShardGrowth,
        ForecastModel::NvmeWear,
        ForecastModel::NicRisk,
        ForecastModel::LogEscalation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ForecastModel::DiskFill => "disk_fill",
            ForecastModel::HeapTrend => "heap_trend",
            ForecastModel::ShardGrowth => "shard_growth",
            ForecastModel::NvmeWear => "nvme_wear",
            ForecastModel::NicRisk => "nic_risk",
            ForecastModel::LogEscalation => "log_escalation",
        }
    }

    /// Models that report an ETA rather than a score.
    pub fn is_eta(self) -> bool {
        !matches!(self, ForecastModel::NicRisk | ForecastModel::LogEscalation)
    }

    /// Numeric signature key for the model's slope.
    pub fn slope_key(self) -> &'static str {
        match self {
            ForecastModel::DiskFill => "disk_slope",
            ForecastModel::HeapTrend => "heap_slope",
            ForecastModel::ShardGrowth => "store_slope",
            ForecastModel::NvmeWear => "wear_slope",
            ForecastModel::NicRisk => "retransmit_slope",
            ForecastModel::LogEscalation => "log_ratio_slope",
        }
    }
}

impl fmt::Display for ForecastModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub model: ForecastModel,
    pub subject: String,
    pub eta_hours: Option<f64>,
    pub risk: Option<f64>,
    pub confidence: f64,
    /// Fitted slope per hour in the series' units.
    pub slope_per_hour: f64,
    pub at_s: u64,
}

/// ETA below this many hours makes an ETA forecast actionable.
pub const ACTIONABLE_ETA_H: f64 = 24.0;
pub const ACTIONABLE_CONFIDENCE: f64 = 0.5;
pub const ACTIONABLE_RISK: f64 = 0.5;

impl Forecast {
    pub fn eta_months(&self) -> Option<f64> {
        self.eta_hours.map(|h| h / HOURS_PER_MONTH)
    }

    pub fn actionable(&self) -> bool {
        match (self.eta_hours, self.risk) {
            (Some(h), _) => h < ACTIONABLE_ETA_H && self.confidence >= ACTIONABLE_CONFIDENCE,
            (None, Some(r)) => r >= ACTIONABLE_RISK,
            _ => false,
        }
    }

    pub fn severity(&self) -> Severity {
        if self.actionable() {
            Severity::Warning
        } else {
            Severity::Info
        }
    }
}

fn eta_forecast(model: ForecastModel, series: &Series, threshold: f64) -> Result<Forecast, PredictorError> {
    let fit = fit_trend(series)?;
    let (at_s, current) = series.last().expect("fit_trend checked length");
    Ok(Forecast {
        model,
        subject: series.subject.clone(),
        eta_hours: eta_hours(current, fit.slope_per_hour, threshold),
        risk: None,
        confidence: fit.r2,
        slope_per_hour: fit.slope_per_hour,
        at_s,
    })
}

/// Disk usage in percent against the eviction threshold.
pub fn forecast_disk_fill(series: &Series, threshold_pct: f64) -> Result<Forecast, PredictorError> {
    eta_forecast(ForecastModel::DiskFill, series, threshold_pct)
}

pub fn forecast_heap(series: &Series, critical_pct: f64) -> Result<Forecast, PredictorError> {
    eta_forecast(ForecastModel::HeapTrend, series, critical_pct)
}

pub fn forecast_shard_growth(series: &Series, rebalance_threshold: f64) -> Result<Forecast, PredictorError> {
    eta_forecast(ForecastModel::ShardGrowth, series, rebalance_threshold)
}

/// Wear percentage against the replacement threshold; the ETA stays in
/// hours, use [`Forecast::eta_months`] for months.
pub fn forecast_nvme_wear(series: &Series, replace_pct: f64) -> Result<Forecast, PredictorError> {
    eta_forecast(ForecastModel::NvmeWear, series, replace_pct)
}

/// Risk from the retransmit-rate trend, floored by a degraded bond.
pub fn nic_risk(series: &Series, bond_degraded: bool, full_risk_slope: f64) -> Result<Forecast, PredictorError> {
    if full_risk_slope <= 0.0 || !full_risk_slope.is_finite() {
        return Err(PredictorError::InvalidParameter(format!("full_risk_slope {full_risk_slope}")));
    }
    let fit = fit_trend(series)?;
    let norm = (fit.slope_per_hour.max(0.0) / full_risk_slope).clamp(0.0, 1.0);
    let risk = if bond_degraded { (norm + 0.5).min(1.0) } else { norm };
    Ok(Forecast {
        model: ForecastModel::NicRisk,
        subject: series.subject.clone(),
        eta_hours: None,
        risk: Some(risk),
        confidence: fit.r2,
        slope_per_hour: fit.slope_per_hour,
        at_s: series.last().expect("checked").0,
    })
}

/// Anomaly probability `logistic(k · slope)` of the WARN+ERROR share per
/// time bucket; zero when the window holds no WARN or ERROR line.
pub fn log_escalation(subject: &str, lines: &[LogLine], bucket_s: u64, k: f64) -> Result<Forecast, PredictorError> {
    if lines.is_empty() {
        return Err(PredictorError::InsufficientData { need: 1, have: 0 });
    }
    if bucket_s == 0 || !k.is_finite() {
        return Err(PredictorError::InvalidParameter("bucket_s and k".into()));
    }
    let at_s = lines.iter().map(|l| l.at_s).max().unwrap_or(0);
    let mut buckets: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for l in lines {
        let e = buckets.entry(l.at_s / bucket_s).or_default();
        e.0 += 1;
        if l.level != LogLevel::Info {
            e.1 += 1;
        }
    }
    let bad: u64 = buckets.values().map(|b| b.1).sum();
    let (slope, r2) = if buckets.len() < 2 {
        (0.0, 0.0)
    } else {
        let mut s = Series::new(subject, buckets.len());
        for (b, (total, bad)) in &buckets {
            s.push(b * bucket_s, *bad as f64 / *total as f64)?;
        }
        let fit = fit_trend(&s)?;
        (fit.slope_per_hour, fit.r2)
    };
    let p = if bad == 0 { 0.0 } else { 1.0 / (1.0 + (-k * slope).exp()) };
    Ok(Forecast {
        model: ForecastModel::LogEscalation,
        subject: subject.into(),
        eta_hours: None,
        risk: Some(p.clamp(0.0, 1.0)),
        confidence: r2,
        slope_per_hour: slope,
        at_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub window: usize,
    pub heap_critical_pct: f64,
    pub nvme_replace_pct: f64,
    /// Per-pod store size relative to the mean that calls for a rebalance.
    pub rebalance_factor: f64,
    pub nic_full_risk_slope: f64,
    pub log_bucket_s: u64,
    pub log_window_s: u64,
    pub log_k: f64,
    pub min_similarity: f64,
    pub max_matches: usize,
    /// Samples a trend window needs before it is forecast.
    pub min_samples: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            window: Series::DEFAULT_CAPACITY,
            heap_critical_pct: 90.0,
            nvme_replace_pct: 95.0,
            rebalance_factor: 1.3,
            nic_full_risk_slope: 10.0,
            log_bucket_s: 60,
            log_window_s: 600,
            log_k: 10.0,
            min_similarity: 0.6,
            max_matches: 3,
            min_samples: 10,
        }
    }
}

/// Rolling per-subject series for every model. Observation is read-only on
/// the cluster state.
#[derive(Debug, Clone, Default)]
pub struct Predictor {
    pub config: PredictorConfig,
    series: BTreeMap<(ForecastModel, String), Series>,
    bond: BTreeMap<String, bool>,
    eviction_pct: f64,
}

impl Predictor {
    pub fn new(config: PredictorConfig, eviction_threshold_pct: f64) -> Self {
        Self { config, series: BTreeMap::new(), bond: BTreeMap::new(), eviction_pct: eviction_threshold_pct }
    }

    fn sample(&mut self, model: ForecastModel, subject: &str, t: u64, v: f64) {
        let cap = self.config.window;
        let s = self
            .series
            .entry((model, subject.to_string()))
            .or_insert_with(|| Series::new(subject, cap));
        if s.last().is_none_or(|(last, _)| t > last) {
            let _ = s.push(t, v);
        }
    }

    pub fn series(&self, model: ForecastModel, subject: &str) -> Option<&Series> {
        self.series.get(&(model, subject.to_string()))
    }

    pub fn observe(&mut self, state: &ClusterState) {
        let t = state.sim_time_s;
        for h in &state.hosts {
            self.sample(ForecastModel::DiskFill, &h.host_id, t, h.disk_pct() * 100.0);
            self.sample(ForecastModel::NvmeWear, &h.host_id, t, h.nvme.wear_level_pct);
            self.sample(ForecastModel::NicRisk, &h.host_id, t, h.nic.retransmit_rate);
            self.bond.insert(h.host_id.clone(), h.nic.bond_degraded);
        }
        for p in state.pods.iter().filter(|p| p.is_running()) {
            self.sample(ForecastModel::HeapTrend, &p.pod_id, t, p.heap_pct);
        }
        for (pod, bytes) in store_per_pod(state) {
            self.sample(ForecastModel::ShardGrowth, &pod, t, bytes as f64 / GB as f64);
        }
    }

    /// All forecasts computable from the current windows, in model/subject order.
    pub fn forecast(&self, state: &ClusterState) -> Vec<Forecast> {
        let c = &self.config;
        let stores = store_per_pod(state);
        let mean_store = if stores.is_empty() {
            0.0
        } else {
            stores.values().sum::<u64>() as f64 / GB as f64 / stores.len() as f64
        };
        let mut out = Vec::new();
        for ((model, subject), s) in &self.series {
            if s.len() < c.min_samples.max(2) {
                continue;
            }
            let f = match model {
                ForecastModel::DiskFill => forecast_disk_fill(s, self.eviction_pct),
                ForecastModel::HeapTrend => forecast_heap(s, c.heap_critical_pct),
                ForecastModel::ShardGrowth => forecast_shard_growth(s, mean_store * c.rebalance_factor),
                ForecastModel::NvmeWear => forecast_nvme_wear(s, c.nvme_replace_pct),
                ForecastModel::NicRisk => {
                    nic_risk(s, self.bond.get(subject).copied().unwrap_or(false), c.nic_full_risk_slope)
                }
                ForecastModel::LogEscalation => continue,
            };
            if let Ok(mut f) = f {
                f.at_s = state.sim_time_s;
                out.push(f);
            }
        }
        let since = state.sim_time_s.saturating_sub(c.log_window_s);
        for p in state.pods.iter().filter(|p| p.is_running()) {
            let window: Vec<LogLine> = p.log_ring.iter().filter(|l| l.at_s > since).cloned().collect();
            if let Ok(mut f) = log_escalation(&p.pod_id, &window, c.log_bucket_s, c.log_k) {
                f.at_s = state.sim_time_s;
                out.push(f);
            }
        }
        out.sort_by(|a, b| (a.model, &a.subject).cmp(&(b.model, &b.subject)));
        out
    }
}

/// Store bytes held by each data pod, counting every copy.
pub fn store_per_pod(state: &ClusterState) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = state
        .pods
        .iter()
        .filter(|p| p.role == PodRole::Data)
        .map(|p| (p.pod_id.clone(), 0))
        .collect();
    for i in &state.indices {
        for s in &i.shards {
            for c in &s.copies {
                if let Some(v) = m.get_mut(&c.pod) {
                    *v += s.store_bytes;
                }
            }
        }
    }
    m
}

pub fn signature_alert(code: AlertCode) -> bool {
    !matches!(code, AlertCode::PredictedBreach | AlertCode::PlanEscalation | AlertCode::UpgradePaused)
}

/// Signature from non-INFO alerts and actionable forecasts; numeric
/// features hold the steepest slope per actionable model.
pub fn signature(alerts: &[Alert], forecasts: &[Forecast]) -> IncidentSignature {
    let mut cats: BTreeSet<String> = alerts
        .iter()
        .filter(|a| a.severity != Severity::Info && signature_alert(a.code))
        .map(|a| format!("alert:{}", a.code.as_str()))
        .collect();
    let mut numeric: BTreeMap<String, f64> = BTreeMap::new();
    for f in forecasts.iter().filter(|f| f.actionable()) {
        cats.insert(format!("forecast:{}", f.model.as_str()));
        let e = numeric.entry(f.model.slope_key().to_string()).or_insert(f64::MIN);
        *e = e.max(f.slope_per_hour);
    }
    IncidentSignature::new(cats, numeric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMatch {
    pub record: IncidentRecord,
    pub similarity: f64,
    pub plan: RemediationPlan,
}

/// Whether a recorded action can be replayed against a different moment.
pub fn is_replayable(call: &ToolCall) -> bool {
    let method = call.args.get("method").and_then(|v| v.as_str()).unwrap_or("").to_ascii_uppercase();
    let path = call.args.get("path").and_then(|v| v.as_str()).unwrap_or("");
    match call.tool {
        Tool::ExecOnNode | Tool::ExecOnPod => call.is_mutating(),
        Tool::EsApiWrite => {
            (method == "PUT" && path.contains("_settings")) || (method == "POST" && path.contains("_forcemerge"))
        }
        _ => false,
    }
}

fn infer_scenario(sig: &IncidentSignature) -> PlanScenario {
    let has = |k: &str| sig.categorical.iter().any(|c| c.contains(k));
    if has("disk") || has("pods_pending") {
        PlanScenario::DiskPressure
    } else if has("nic") {
        PlanScenario::NicDegradation
    } else if has("heap") {
        PlanScenario::HeapExhaustion
    } else if has("shard_growth") {
        PlanScenario::ShardImbalance
    } else {
        PlanScenario::NodeLoss
    }
}

/// Resolved precedents above `min_sim`, each with a staged plan holding its
/// replayable actions. Records without replayable actions are skipped.
pub fn pattern_predict(
    current: &IncidentSignature,
    memory: &IncidentMemory,
    min_sim: f64,
    k: usize,
    now_s: u64,
) -> Vec<PatternMatch> {
    if current.is_empty() {
        return Vec::new();
    }
    memory
        .similar(current, memory.len(), min_sim)
        .into_iter()
        .filter(|m| m.record.outcome == MemoryOutcome::Resolved)
        .filter_map(|m| {
            let actions: Vec<ToolCall> = m
                .record
                .actions
                .iter()
                .filter(|a| is_replayable(a))
                .enumerate()
                .map(|(i, a)| ToolCall::new(a.tool, a.args.clone(), i as u32 + 1))
                .collect();
            if actions.is_empty() {
                return None;
            }
            let plan = RemediationPlan {
                scenario: infer_scenario(&m.record.signature),
                subject: "cluster".into(),
                trigger: PlanTrigger::Similarity { record_id: m.record.id.clone(), min_similarity: min_sim },
                actions,
                staged: true,
                source: PlanSource::MemoryMatch,
                staged_at_s: now_s,
            };
            Some(PatternMatch { record: m.record, similarity: m.similarity, plan })
        })
        .take(k)
        .collect()
}
