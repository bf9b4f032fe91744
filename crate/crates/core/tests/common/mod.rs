#![allow(dead_code)]

use guardian_core::config::{GuardianConfig, UpgradeConfig};
use guardian_core::heal::IncidentReport;
use guardian_core::memory::IncidentMemory;
use guardian_core::orchestrator::{run_with_memory, RunArtifacts};
use guardian_core::sim::Scenario;

pub fn scenario(name: &str) -> Scenario {
    Scenario::builtin(name).expect("bundled scenario")
}

pub fn run(name: &str) -> RunArtifacts {
    run_cfg(GuardianConfig::default(), scenario(name), IncidentMemory::in_memory())
}

pub fn run_cfg(cfg: GuardianConfig, sc: Scenario, memory: IncidentMemory) -> RunArtifacts {
    run_with_memory(cfg, sc, memory).expect("lifecycle runs")
}

/// Memory holding everything a finished run knew.
pub fn retained(a: &RunArtifacts) -> IncidentMemory {
    let mut m = IncidentMemory::in_memory();
    for r in a.manifest.memory_before.iter().chain(&a.new_records) {
        m.append(r.clone()).expect("append");
    }
    m
}

/// The report that acted on the cluster first.
pub fn acting_report(a: &RunArtifacts) -> &IncidentReport {
    a.reports.iter().find(|r| !r.actions.is_empty()).expect("an acting report")
}

pub fn upgrade_config(at_s: u64, target: &str, green_timeout_s: u64) -> GuardianConfig {
    GuardianConfig {
        upgrade: Some(UpgradeConfig { at_s, target_version: target.into(), green_timeout_s }),
        ..Default::default()
    }
}

/// Indices named by DELETE or PUT actions of a report.
pub fn indices_touched(r: &IncidentReport, method: &str) -> std::collections::BTreeSet<String> {
    r.actions
        .iter()
        .filter(|c| c.tool.as_str() == "es_api_write" && c.args["method"] == method)
        .flat_map(|c| {
            c.args["path"]
                .as_str()
                .unwrap_or_default()
                .trim_start_matches('/')
                .split(',')
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Minimal text-format reader: returns metric family names in HELP order
/// and the sample count, failing on any malformed line.
pub fn parse_exposition(text: &str) -> Result<(Vec<String>, usize), String> {
    let mut names = Vec::new();
    let mut typed = std::collections::BTreeSet::new();
    let mut samples = 0;
    for (n, line) in text.lines().enumerate() {
        let bad = |why: &str| format!("line {}: {why}: {line}", n + 1);
        if let Some(rest) = line.strip_prefix("# HELP ") {
            let name = rest.split_whitespace().next().ok_or_else(|| bad("no name"))?;
            names.push(name.to_string());
        } else if let Some(rest) = line.strip_prefix("# TYPE ") {
            let mut it = rest.split_whitespace();
            let name = it.next().ok_or_else(|| bad("no name"))?;
            let kind = it.next().ok_or_else(|| bad("no type"))?;
            if !["counter", "gauge"].contains(&kind) {
                return Err(bad("unknown type"));
            }
            typed.insert(name.to_string());
        } else {
            let (head, value) = line.rsplit_once(' ').ok_or_else(|| bad("no value"))?;
            let name = head.split('{').next().unwrap();
            if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') || name.is_empty() {
                return Err(bad("bad name"));
            }
            if head.contains('{') && !head.ends_with('}') {
                return Err(bad("unclosed labels"));
            }
            if !typed.contains(name) {
                return Err(bad("sample before TYPE"));
            }
            if !matches!(value, "+Inf" | "-Inf" | "NaN") && value.parse::<f64>().is_err() {
                return Err(bad("bad value"));
            }
            samples += 1;
        }
    }
    Ok((names, samples))
}
