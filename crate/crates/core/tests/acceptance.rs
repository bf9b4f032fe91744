//! Acceptance suite: one pass/fail line per criterion.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use common::*;
use guardian_core::config::GuardianConfig;
use guardian_core::heal::{
    run_loop, validate_command, HistoryStep, Investigator, LoopBudget, LoopContext, LoopOutcome, ProposedCall,
    SimToolbox, Tool,
};
use guardian_core::memory::IncidentMemory;
use guardian_core::monitors::AlertCode;
use guardian_core::orchestrator::{replay, PlanSource, PlanStatus, Scheduler};
use guardian_core::perfmodel::{
    calibrate, fit_coefficients, query_latency, table_points, write_latency, ScalingCoefficients, TABLE_ANCHORS,
    TABLE_RELATIVE,
};
use guardian_core::predictor::{eta_hours, fit_trend, ForecastModel, Series};
use guardian_core::sim::{ClusterSpec, FaultKind, FaultSpec, Health, PodPhase, SimOptions, Simulator};

const REL_FACTOR_TOL: f64 = 0.15;
const ANCHOR_206_TOL: f64 = 0.10;
const WRITE_EXACT_TOL: f64 = 1e-12;
const WRITE_TOTAL_MS: f64 = 30.0;
const WRITE_TOTAL_TOL: f64 = 0.05;
const SLOPE_REL_TOL: f64 = 1e-9;
const MODEL_BUDGET: Duration = Duration::from_secs(1);
const INCIDENT1_BUDGET: Duration = Duration::from_secs(30);
const INCIDENT2_BUDGET: Duration = Duration::from_secs(10);

struct Outcome {
    id: u8,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(id: u8, name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    Outcome { id, name, pass, detail }
}

fn within(actual: f64, expected: f64, rel: f64) -> bool {
    (actual - expected).abs() <= rel * expected.abs()
}

fn scaling_model() -> (bool, String) {
    let t = Instant::now();
    let fit = fit_coefficients(&table_points()).expect("fit");
    let c = &fit.coefficients;
    let preds: Vec<f64> = TABLE_ANCHORS.iter().map(|a| query_latency(a.0, a.1, c).unwrap()).collect();
    let rel: Vec<f64> = preds.iter().map(|p| p / preds[0]).collect();
    let rel_ok = rel.iter().zip(TABLE_RELATIVE).all(|(r, e)| within(*r, e, REL_FACTOR_TOL));
    let abs_ok = within(preds[3], 206.0, ANCHOR_206_TOL);
    let fast = t.elapsed() < MODEL_BUDGET;
    let detail = format!(
        "fit base={:.3} vol={:.3} shard={:.3}; relative {} vs {:?} (±15%: {}); 15.4 GB -> {:.1} ms vs 206 (±10%: {}); 3.72 GB -> {:.1} ms",
        c.base_ms,
        c.vol_coeff,
        c.shard_coeff,
        rel.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join("/"),
        TABLE_RELATIVE,
        rel_ok,
        preds[3],
        abs_ok,
        preds[2],
    );
    (rel_ok && abs_ok && fast, detail)
}

fn write_model() -> (bool, String) {
    let t = Instant::now();
    let c = ScalingCoefficients::paper_constants();
    let w = write_latency(1000.0, 1.0, &c).unwrap();
    let exact = (w - 29.4).abs() <= WRITE_EXACT_TOL;
    let total = within(w, WRITE_TOTAL_MS, WRITE_TOTAL_TOL);
    (exact && total && t.elapsed() < MODEL_BUDGET, format!("write(1000, 1) = {w} ms; vs ~30 ms total: {:+.1}%", (w / WRITE_TOTAL_MS - 1.0) * 100.0))
}

fn incident_one() -> (bool, String) {
    let t = Instant::now();
    let a = run("outage18h");
    let elapsed = t.elapsed();
    let b = run("outage18h");
    let r = acting_report(&a);
    let findings: Vec<&str> = r.causal_chain.iter().map(|s| s.finding.as_str()).collect();
    let sequence = ["FailedScheduling", "DiskPressure", "at 85%", "cassandra-disk1", "freed", "85% -> 2%", "no_valid_shard_copy"];
    let mut at = 0;
    let mut in_order = true;
    for needle in sequence {
        match findings.iter().enumerate().skip(at).find(|(_, f)| f.contains(needle)) {
            Some((i, _)) => at = i,
            None => in_order = false,
        }
    }
    let st = a.final_state.as_ref().unwrap();
    let disk: Vec<u64> = ["s797", "s812"].iter().map(|h| st.host(h).unwrap().df_pct()).collect();
    let running = st.count_phase(PodPhase::Running);
    let deleted = indices_touched(r, "DELETE");
    let created = indices_touched(r, "PUT");
    let ok = r.causal_chain.len() >= 6
        && in_order
        && disk.iter().all(|d| *d <= 2)
        && running == 15
        && deleted.len() == 109
        && deleted == created
        && st.health == Health::Green
        && r.outcome == LoopOutcome::Resolved
        && a.run_log == b.run_log
        && elapsed < INCIDENT1_BUDGET;
    (
        ok,
        format!(
            "chain {} steps (ordered: {in_order}); disk {:?}%; {running}/15 Running; {} deleted, {} recreated; health {}; outcome {}; deterministic {}; {:.1?}",
            r.causal_chain.len(),
            disk,
            deleted.len(),
            created.len(),
            st.health,
            r.outcome.as_str(),
            a.run_log == b.run_log,
            elapsed
        ),
    )
}

fn incident_two() -> (bool, String) {
    let t = Instant::now();
    let a = run("nic_degradation");
    let elapsed = t.elapsed();
    let first_deviation = a.alerts.iter().find(|x| x.code == AlertCode::ProbeDeviation).map(|x| x.at_s);
    let mut risk_at = BTreeMap::new();
    for h in ["s797", "s811", "s812"] {
        if let Some(f) = a
            .forecasts
            .iter()
            .find(|f| f.model == ForecastModel::NicRisk && f.subject == h && f.risk.unwrap_or(0.0) >= 0.5)
        {
            risk_at.insert(h, f.at_s);
        }
    }
    let before = risk_at.len() == 3 && risk_at.values().all(|t| first_deviation.is_none_or(|d| *t < d));
    let report = a.reports.iter().find(|r| {
        r.actions.iter().any(|c| c.args["method"] == "PUT" && c.args["path"] == "/_settings")
            && r.flags.iter().any(|f| f.starts_with("hardware:"))
    });
    (
        before && report.is_some() && elapsed < INCIDENT2_BUDGET,
        format!(
            "risk>=0.5 at {risk_at:?}; first probe deviation {first_deviation:?}; settings change + hardware flag: {}; {:.1?}",
            report.is_some(),
            elapsed
        ),
    )
}

fn learning() -> (bool, String) {
    let first = run("outage18h");
    let breach_at = first.observations.first_pending_at_s;
    let second = run_cfg(GuardianConfig::default(), scenario("outage18h"), retained(&first));
    let plan = second
        .plan_executions
        .iter()
        .find(|e| e.plan.source == PlanSource::MemoryMatch && e.status == PlanStatus::Completed);
    let ended = plan.map(|p| p.ended_at_s);
    let before = matches!((ended, breach_at), (Some(e), Some(b)) if e < b);
    let pending2 = second.observations.max_pending_pods;
    let pending1 = first.observations.max_pending_pods;
    (
        before && pending2 == 0 && pending1 >= 9,
        format!("memory plan completed at {ended:?}, threshold breached at {breach_at:?} in run 1; pending pods run1={pending1} run2={pending2}"),
    )
}

fn guard_corpus() -> (bool, String) {
    let node = |c: &str| (Tool::ExecOnNode, json!({"host": "s797", "command": c}));
    let kubectl = |c: &str| (Tool::Kubectl, json!({"args": c}));
    let es = |m: &str, p: &str| (Tool::EsApiWrite, json!({"method": m, "path": p}));
    let destructive = vec![
        node("rm -rf /"),
        node("sudo rm -rf /"),
        node("mkfs.ext4 /dev/nvme0n1p1"),
        node("mkfs -t xfs /dev/nvme0n1"),
        node("dd if=/dev/zero of=/dev/nvme0n1 bs=1M"),
        node("shutdown -h now"),
        kubectl("delete node s797"),
        kubectl("delete nodes s797 s811"),
        kubectl("delete namespace elasticsearch-benchmark"),
        kubectl("delete ns elasticsearch-benchmark"),
        kubectl("delete pvc data-es-data-0 -n elasticsearch-benchmark"),
        es("DELETE", "/_all"),
        es("DELETE", "/*"),
        es("DELETE", "/logs-*"),
        es("DELETE", "/"),
        kubectl("scale statefulset es-data --replicas=0 -n elasticsearch-benchmark"),
        kubectl("scale sts es-data --replicas 0"),
    ];
    let diagnostic = vec![
        node("df -h /mnt"),
        node("du -sh /mnt/*"),
        node("dmesg | tail -50"),
        node("smartctl -a /dev/nvme0n1"),
        node("ethtool -S eno2np1"),
        (Tool::EsApi, json!({"method": "GET", "path": "/_cluster/health"})),
        (Tool::EsApi, json!({"method": "GET", "path": "/_cat/shards?v"})),
        kubectl("get pods -n elasticsearch-benchmark"),
        kubectl("describe pod es-master-0 -n elasticsearch-benchmark"),
        es("DELETE", "/logs-000001"),
        kubectl("delete pod es-data-3 -n elasticsearch-benchmark"),
    ];
    let denied = destructive.iter().filter(|(t, a)| !validate_command(*t, a).is_allowed()).count();
    let allowed = diagnostic.iter().filter(|(t, a)| validate_command(*t, a).is_allowed()).count();

    let mut sim = Simulator::new(ClusterSpec::default(), 5, SimOptions::default()).unwrap();
    let before = sim.state().state_hash();
    struct Destroyer(Vec<ProposedCall>);
    impl Investigator for Destroyer {
        fn propose(&mut self, _: &LoopContext, _: &[HistoryStep]) -> ProposedCall {
            self.0.pop().unwrap_or_else(|| ProposedCall::report(LoopOutcome::NeedsEscalation, "done", &[], &[]))
        }
    }
    let calls = destructive.iter().map(|(t, a)| ProposedCall::new(*t, a.clone())).collect();
    let mut tb = SimToolbox::new(&mut sim, 0);
    let r = run_loop(&LoopContext::default(), &mut Destroyer(calls), &mut tb, LoopBudget::default()).unwrap();
    let attempted: Vec<_> = r.audit.iter().filter(|e| e.tool != Tool::Report).collect();
    let all_denied = attempted.len() == destructive.len() && attempted.iter().all(|e| !e.verdict.is_allowed() && !e.executed);
    let unchanged = sim.state().state_hash() == before;
    (
        denied == destructive.len() && allowed == diagnostic.len() && all_denied && unchanged,
        format!(
            "destructive denied {denied}/{}; diagnostic allowed {allowed}/{}; loop executed none: {all_denied}; state hash unchanged: {unchanged}",
            destructive.len(),
            diagnostic.len()
        ),
    )
}

fn budget() -> (bool, String) {
    struct Never;
    impl Investigator for Never {
        fn propose(&mut self, _: &LoopContext, _: &[HistoryStep]) -> ProposedCall {
            ProposedCall::es_get("/_cluster/health")
        }
    }
    struct Verbose;
    impl Investigator for Verbose {
        fn propose(&mut self, _: &LoopContext, _: &[HistoryStep]) -> ProposedCall {
            ProposedCall::es_get("/_cat/shards?v")
        }
    }
    let mut sim = Simulator::new(ClusterSpec::default(), 3, SimOptions::default()).unwrap();
    let never = run_loop(&LoopContext::default(), &mut Never, &mut SimToolbox::new(&mut sim, 5), LoopBudget::default()).unwrap();
    let verbose = run_loop(&LoopContext::default(), &mut Verbose, &mut SimToolbox::new(&mut sim, 5), LoopBudget::default()).unwrap();
    let ok = never.totals.iterations == 20
        && never.outcome == LoopOutcome::BudgetExhausted
        && verbose.totals.tokens == 150_000
        && verbose.outcome == LoopOutcome::BudgetExhausted;
    (
        ok,
        format!(
            "never-reporting: {} iterations, {}; verbose: {} tokens in {} iterations, {}",
            never.totals.iterations,
            never.outcome.as_str(),
            verbose.totals.tokens,
            verbose.totals.iterations,
            verbose.outcome.as_str()
        ),
    )
}

fn escalation_latency() -> (bool, String) {
    let mut s = Scheduler::new(Default::default(), 0);
    for t in 1..=44 {
        s.tick(t);
    }
    s.raise_critical(45);
    let at45 = s.tick(45).ai;
    let d = s.tick(46);
    (!at45 && d.ai && d.preempted, format!("critical at 45 s -> AI loop at 46 s: {}; next scheduled boundary 300 s", d.ai))
}

fn prediction_math() -> (bool, String) {
    let pts: Vec<(u64, f64)> = (0..50).map(|i| (i * 30, 12.5 + 3.75 * (i * 30) as f64 / 3600.0)).collect();
    let fit = fit_trend(&Series::from_points("d", &pts).unwrap()).unwrap();
    let slope_ok = ((fit.slope_per_hour - 3.75) / 3.75).abs() <= SLOPE_REL_TOL;
    let eta = eta_hours(50.0, 5.0, 85.0);
    let eta_ok = eta == Some(7.0);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut in_range = true;
    for _ in 0..10_000 {
        let n = rng.random_range(2..32);
        let values: Vec<(u64, f64)> = (0..n).map(|i| (i as u64 * 30, rng.random_range(-1e3..1e3))).collect();
        let s = Series::from_points("n", &values).unwrap();
        let f = guardian_core::predictor::nic_risk(&s, rng.random(), rng.random_range(0.01..100.0)).unwrap();
        in_range &= (0.0..=1.0).contains(&f.risk.unwrap()) && (0.0..=1.0).contains(&f.confidence);
    }
    (slope_ok && eta_ok && in_range, format!("slope {} (exact 3.75); eta {eta:?} h; 10,000 risk cases in [0,1]: {in_range}", fit.slope_per_hour))
}

fn calibration_contract() -> (bool, String) {
    let mut sim = Simulator::new(ClusterSpec::default(), 11, SimOptions::default()).unwrap();
    let before = sim.probe_count();
    let b = calibrate(&mut sim).unwrap();
    let issued = sim.probe_count() - before;
    let queries: Vec<u32> = ["match_all", "term_status", "range_timestamp", "bool_compound"]
        .iter()
        .filter_map(|p| b.probes.get(*p).map(|x| x.iterations))
        .collect();
    let writes: Vec<u32> = b.probes.iter().filter(|(k, _)| k.starts_with("write")).map(|(_, v)| v.iterations).collect();
    let p95 = b.probes.values().all(|p| p.p95_ms == 2.0 * p.p50_ms);
    let mut red = Simulator::new(ClusterSpec::default(), 11, SimOptions::default()).unwrap();
    red.inject_fault(FaultSpec::new(0, FaultKind::ShardCopyCorruption { index_count: 1 })).unwrap();
    red.tick(1).unwrap();
    let refused = calibrate(&mut red).is_err();
    let ok = issued == 520 && queries == vec![30; 4] && writes == vec![200; 2] && p95 && refused;
    (ok, format!("{issued} probes issued; query iterations {queries:?}; write iterations {writes:?}; p95 = 2 x p50: {p95}; refused when not GREEN: {refused}"))
}

fn determinism() -> (bool, String) {
    let a = run("nic_degradation");
    let b = run("nic_degradation");
    let identical = a.run_log.join("\n").into_bytes() == b.run_log.join("\n").into_bytes();
    let v = replay(&a.manifest).unwrap();
    (identical && v.matches, format!("{} lines byte-identical: {identical}; replay verdict: {}", a.run_log.len(), v.matches))
}

fn metrics() -> (bool, String) {
    let a = run("outage18h");
    let mut ok = !a.metric_history.is_empty();
    let mut last: BTreeMap<String, f64> = BTreeMap::new();
    let mut monotone = true;
    for text in &a.metric_history {
        match parse_exposition(text) {
            Ok((names, _)) => ok &= names.len() == 16,
            Err(_) => ok = false,
        }
        let counters: Vec<&str> = text
            .lines()
            .filter_map(|l| l.strip_prefix("# TYPE "))
            .filter(|l| l.ends_with(" counter"))
            .map(|l| l.split(' ').next().unwrap())
            .collect();
        for line in text.lines().filter(|l| !l.starts_with('#')) {
            let (key, v) = line.rsplit_once(' ').unwrap();
            let name = key.split('{').next().unwrap();
            if counters.contains(&name) {
                let v: f64 = v.parse().unwrap();
                if last.get(key).is_some_and(|p| v < *p) {
                    monotone = false;
                }
                last.insert(key.to_string(), v);
            }
        }
    }
    (ok && monotone, format!("{} expositions; 16 names and parseable: {ok}; counters monotone: {monotone}", a.metric_history.len()))
}

fn rolling_upgrade() -> (bool, String) {
    let mut sc = scenario("healthy");
    sc.duration_s = 2400;
    let a = run_cfg(upgrade_config(600, "8.12.0", 300), sc, IncidentMemory::in_memory());
    let Some(up) = a.upgrade.as_ref() else { return (false, "upgrade did not run".into()) };
    let green_between = a
        .run_log
        .iter()
        .filter(|l| l.contains("\"kind\":\"upgrade_restart\""))
        .count()
        == 15
        && up.paused_at.is_none();
    let ok = up.restarted.len() == 15 && a.observations.max_down_during_upgrade <= 1 && green_between && up.baselines_replaced;
    (
        ok,
        format!(
            "{} pods restarted; max non-Running per tick {}; GREEN between restarts: {green_between}; baselines replaced: {}",
            up.restarted.len(),
            a.observations.max_down_during_upgrade,
            up.baselines_replaced
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let results = vec![
        check(1, "scaling-model reproduction", scaling_model),
        check(2, "write-model reproduction", write_model),
        check(3, "incident 1 golden scenario", incident_one),
        check(4, "incident 2 golden scenario", incident_two),
        check(5, "learning from memory", learning),
        check(6, "safety-guard corpus", guard_corpus),
        check(7, "budget enforcement", budget),
        check(8, "escalation latency", escalation_latency),
        check(9, "prediction math", prediction_math),
        check(10, "calibration contract", calibration_contract),
        check(11, "determinism and replay", determinism),
        check(12, "metrics exposition", metrics),
        check(13, "rolling upgrade", rolling_upgrade),
    ];
    for r in &results {
        println!("[{}] {:>2}. {:<28} {}", if r.pass { "PASS" } else { "FAIL" }, r.id, r.name, r.detail);
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.pass).map(|r| r.id).collect();
    println!("{}/{} criteria pass", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
