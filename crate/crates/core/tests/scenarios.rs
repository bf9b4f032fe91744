mod common;

use common::*;
use guardian_core::config::GuardianConfig;
use guardian_core::heal::LoopOutcome;
use guardian_core::memory::{IncidentMemory, MemoryOutcome, RecordSource};
use guardian_core::monitors::{AlertCode, Severity};
use guardian_core::orchestrator::{
    replay, run_lifecycle, PlanSource, PlanStatus, RunStatus,
};
use guardian_core::predictor::ForecastModel;
use guardian_core::sim::{FaultKind, FaultSpec, Health, PodPhase};

/// Position of the first chain step after `from` whose finding contains `needle`.
fn step_after(findings: &[String], from: usize, needle: &str) -> Option<usize> {
    findings.iter().enumerate().skip(from).find(|(_, f)| f.contains(needle)).map(|(i, _)| i)
}

#[test]
fn outage_is_healed_without_operator() {
    let a = run("outage18h");
    let r = acting_report(&a);
    assert_eq!(r.outcome, LoopOutcome::Resolved);
    let findings: Vec<String> = r.causal_chain.iter().map(|s| s.finding.clone()).collect();
    let mut at = 0;
    for needle in ["FailedScheduling", "DiskPressure", "at 85%", "cassandra-disk1", "freed", "85% -> 2%", "no_valid_shard_copy"] {
        at = step_after(&findings, at, needle).unwrap_or_else(|| panic!("no '{needle}' step in order: {findings:#?}"));
    }
    assert!(r.causal_chain.len() >= 6);

    let st = a.final_state.as_ref().unwrap();
    assert_eq!(st.health, Health::Green);
    for h in ["s797", "s812"] {
        assert!(st.host(h).unwrap().df_pct() <= 2, "{h} at {}%", st.host(h).unwrap().df_pct());
    }
    assert_eq!(st.count_phase(PodPhase::Running), 15);
    let deleted = indices_touched(r, "DELETE");
    let created = indices_touched(r, "PUT");
    assert_eq!(deleted.len(), 109);
    assert_eq!(deleted, created);
    assert!(deleted.iter().all(|i| st.index(i).is_some()));
    assert!(a.observations.max_pending_pods >= 9);
}

#[test]
fn runs_are_deterministic() {
    let a = run("outage18h");
    let b = run("outage18h");
    assert_eq!(a.run_log, b.run_log);
    assert_eq!(a.final_state.unwrap().state_hash(), b.final_state.unwrap().state_hash());
}

#[test]
fn different_seeds_change_the_log() {
    let a = run("healthy");
    let b = run_cfg(GuardianConfig { seed: Some(99), ..Default::default() }, scenario("healthy"), IncidentMemory::in_memory());
    assert_ne!(a.run_log_hash(), b.run_log_hash());
}

#[test]
fn second_outage_is_prevented_by_memory() {
    let first = run("disk_fill");
    assert!(first.observations.max_pending_pods >= 9);
    let second = run_cfg(GuardianConfig::default(), scenario("disk_fill"), retained(&first));
    let staged = second
        .plan_executions
        .iter()
        .find(|e| e.plan.source == PlanSource::MemoryMatch && e.status == PlanStatus::Completed)
        .expect("memory plan executed");
    assert!(staged.executed.iter().any(|c| c.command_line().contains("rm -rf /mnt/cassandra-disk1")));
    assert_eq!(second.observations.max_pending_pods, 0);
    assert!(second.observations.first_pending_at_s.is_none());
    assert!(second.alerts.iter().all(|x| x.code != AlertCode::PodsPending));
    let rec = second.new_records.iter().find(|r| r.source == RecordSource::MemoryMatch).unwrap();
    assert_eq!(rec.outcome, MemoryOutcome::Resolved);
}

#[test]
fn nic_degradation_is_throttled_and_flagged() {
    let a = run("nic_degradation");
    for host in ["s797", "s811", "s812"] {
        let first = a
            .forecasts
            .iter()
            .find(|f| f.model == ForecastModel::NicRisk && f.subject == host && f.risk.unwrap_or(0.0) >= 0.5);
        assert!(first.is_some(), "no nic risk >= 0.5 for {host}");
    }
    let r = a.reports.iter().find(|r| r.outcome == LoopOutcome::Mitigated).expect("mitigating report");
    assert!(r.actions.iter().any(|c| c.args["method"] == "PUT" && c.args["path"] == "/_settings"));
    assert!(r.flags.iter().any(|f| f.starts_with("hardware:")));
    assert_eq!(a.final_state.unwrap().health, Health::Green);
}

#[test]
fn healthy_cluster_stays_quiet() {
    let a = run("healthy");
    assert!(a.alerts.iter().all(|x| x.severity != Severity::Critical));
    assert!(a.reports.iter().all(|r| r.outcome == LoopOutcome::NoAnomaly));
    assert!(a.new_records.is_empty());
}

#[test]
fn rolling_upgrade_keeps_one_pod_down() {
    let mut sc = scenario("healthy");
    sc.duration_s = 2400;
    let a = run_cfg(upgrade_config(600, "8.12.0", 300), sc, IncidentMemory::in_memory());
    let up = a.upgrade.as_ref().expect("upgrade ran");
    assert_eq!(up.restarted.len(), 15);
    assert!(up.paused_at.is_none());
    assert!(up.baselines_replaced);
    assert!(a.observations.max_down_during_upgrade <= 1);
    assert!(up.max_pods_down <= 1);
    assert!(a.baselines.as_ref().unwrap().calibrated_at_s >= up.started_at_s);
    let st = a.final_state.unwrap();
    assert_eq!(st.es_version, "8.12.0");
    assert!(st.pods.iter().all(|p| p.version == "8.12.0"));
    let restarts = a.run_log.iter().filter(|l| l.contains("\"kind\":\"upgrade_restart\"")).count();
    assert_eq!(restarts, 15);
}

#[test]
fn upgrade_to_running_version_is_noop() {
    let sc = scenario("healthy");
    let version = guardian_core::sim::ClusterSpec::default().es_version;
    let a = run_cfg(upgrade_config(300, &version, 300), sc, IncidentMemory::in_memory());
    let up = a.upgrade.unwrap();
    assert!(up.no_op);
    assert!(up.restarted.is_empty());
}

#[test]
fn upgrade_pauses_when_green_is_not_reattained() {
    let mut sc = scenario("healthy");
    sc.duration_s = 1800;
    sc.faults.push(FaultSpec::new(650, FaultKind::NodeKill { pod: "es-data-7".into(), down_s: Some(3000) }));
    let a = run_cfg(upgrade_config(600, "8.12.0", 120), sc, IncidentMemory::in_memory());
    let up = a.upgrade.unwrap();
    assert!(up.paused_at.is_some());
    assert!(!up.baselines_replaced);
    assert!(a.alerts.iter().any(|x| x.code == AlertCode::UpgradePaused && x.severity == Severity::Critical));
}

#[test]
fn infeasible_sla_stops_before_deploy() {
    let mut cfg = GuardianConfig::default();
    cfg.sla.query_p50_ms = 20.0;
    let a = run_cfg(cfg, scenario("healthy"), IncidentMemory::in_memory());
    assert_eq!(a.status, RunStatus::Halted);
    assert!(a.final_state.is_none());
    assert!(a.reports.is_empty());
}

#[test]
fn run_directory_round_trips_through_replay() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = scenario("nic_degradation");
    sc.duration_s = 900;
    let cfg = GuardianConfig { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let a = run_lifecycle(cfg, sc).unwrap();
    for f in ["run-log.jsonl", "alerts.jsonl", "forecasts.jsonl", "metrics.prom", "manifest.json", "baselines.json", "incidents.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(dir.path().join("run-log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), a.run_log.len());
    let manifest: guardian_core::orchestrator::RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    let v = replay(&manifest).unwrap();
    assert!(v.matches, "{v:?}");

    let mut tampered = manifest.clone();
    tampered.config.seed = Some(12345);
    assert!(!replay(&tampered).unwrap().matches);
}

#[test]
fn memory_persists_across_runs_in_one_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GuardianConfig { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    run_lifecycle(cfg.clone(), scenario("disk_fill")).unwrap();
    let second = run_lifecycle(cfg, scenario("disk_fill")).unwrap();
    assert!(!second.manifest.memory_before.is_empty());
    assert_eq!(second.observations.max_pending_pods, 0);
}
