//! Deterministic rule-driven investigator used offline and in tests.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde_json::{json, Value};

use super::{ChainStep, HistoryStep, Investigator, LoopContext, LoopOutcome, ProposedCall, Tool};
use crate::monitors::AlertCode;
use crate::sim::{DATA_MOUNT, ES_DATA_DIR};

/// Indices per delete or create request.
pub const DELETE_BATCH: usize = 55;

const MAX_HEALTH_POLLS: u32 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Idle,
    Scheduling,
    Shards,
    Nic,
    Heap,
    Disk,
    Yellow,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Purpose {
    Events,
    Describe(String),
    Df(String),
    Du(String),
    Rm(String, String),
    VerifyDf(String),
    Health,
    CatShards,
    Delete(usize),
    Create(usize),
    Bond(String),
    Ethtool(String),
    Merge,
    CatIndices,
    HeapShards(String),
    Move,
    Retry,
}

#[derive(Debug, Default)]
struct Facts {
    disk_pct: BTreeMap<String, u64>,
    cleaned: Vec<(String, String)>,
    health: Option<String>,
    nodes: Option<u64>,
    unassigned: u64,
    health_polls: u32,
    shards_checked: bool,
    broken: Vec<String>,
    recreated: usize,
    degraded: BTreeSet<String>,
    retransmit: BTreeMap<String, f64>,
    merge_applied: bool,
    heavy_index: Option<String>,
    moved: bool,
    retried: bool,
    rm_allowed: bool,
    foreign: Vec<(String, String, String)>,
}

/// Scripted investigator that follows fixed playbooks keyed on alert codes.
#[derive(Debug)]
pub struct PlaybookInvestigator {
    flow: Flow,
    queue: VecDeque<(ProposedCall, Purpose)>,
    awaiting: Option<Purpose>,
    chain: Vec<ChainStep>,
    facts: Facts,
    seen: usize,
}

impl Default for PlaybookInvestigator {
    fn default() -> Self {
        Self::new()
    }
}

fn parse_size(s: &str) -> Option<f64> {
    let s = s.trim();
    let (num, mult) = match s.chars().last()? {
        'G' => (&s[..s.len() - 1], 1e9),
        'M' => (&s[..s.len() - 1], 1e6),
        'K' => (&s[..s.len() - 1], 1e3),
        'T' => (&s[..s.len() - 1], 1e12),
        _ => (s, 1.0),
    };
    num.parse::<f64>().ok().map(|v| v * mult)
}

fn df_percent(out: &str) -> Option<u64> {
    out.lines()
        .filter(|l| l.contains(DATA_MOUNT))
        .flat_map(|l| l.split_whitespace())
        .find_map(|w| w.strip_suffix('%').and_then(|n| n.parse().ok()))
}

/// Largest directory under the mount other than the ES data dir.
fn largest_foreign(out: &str) -> Option<(String, String)> {
    let es = format!("{DATA_MOUNT}/{ES_DATA_DIR}");
    out.lines()
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            let size = parts.next()?;
            let path = parts.next()?;
            if path == es || !path.starts_with(DATA_MOUNT) {
                return None;
            }
            Some((parse_size(size)?, size.to_string(), path.to_string()))
        })
        .fold(None::<(f64, String, String)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        })
        .map(|(_, size, path)| (path, size))
}

fn pressured_hosts(out: &str) -> (Vec<String>, Vec<String>) {
    let mut hosts = BTreeSet::new();
    let mut pods = Vec::new();
    for line in out.lines() {
        if !line.contains("DiskPressure") {
            continue;
        }
        let words: Vec<&str> = line.split_whitespace().collect();
        if let Some(i) = words.iter().position(|w| *w == "node") {
            if let Some(h) = words.get(i + 1) {
                hosts.insert(h.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_string());
            }
        }
        if line.contains("FailedScheduling") {
            if let Some(pod) = words.iter().find_map(|w| w.strip_prefix("pod/")) {
                if !pods.iter().any(|p| p == pod) {
                    pods.push(pod.to_string());
                }
            }
        }
    }
    (hosts.into_iter().collect(), pods)
}

impl PlaybookInvestigator {
    pub fn new() -> Self {
        Self {
            flow: Flow::Idle,
            queue: VecDeque::new(),
            awaiting: None,
            chain: Vec::new(),
            facts: Facts::default(),
            seen: 0,
        }
    }

    fn push(&mut self, call: ProposedCall, purpose: Purpose) {
        self.queue.push_back((call, purpose));
    }

    fn push_front(&mut self, call: ProposedCall, purpose: Purpose) {
        self.queue.push_front((call, purpose));
    }

    fn note(&mut self, step: &HistoryStep, finding: String) {
        self.chain.push(ChainStep::new(step.call.tool.as_str(), &step.call.command_line(), &finding));
    }

    fn start(&mut self, ctx: &LoopContext) {
        let codes: BTreeSet<AlertCode> = ctx.trigger.iter().map(|a| a.code).collect();
        let subjects = |code: AlertCode| -> Vec<String> {
            ctx.trigger
                .iter()
                .filter(|a| a.code == code)
                .map(|a| a.subject.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect()
        };
        if !ctx.trigger.is_empty() {
            let mut ordered: Vec<&crate::monitors::Alert> = ctx.trigger.iter().collect();
            ordered.sort_by_key(|a| (std::cmp::Reverse(a.severity), a.layer));
            let codes_line = ordered.iter().map(|a| a.code.as_str()).collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>().join(",");
            let finding = ordered
                .iter()
                .filter(|a| a.severity == ordered[0].severity)
                .map(|a| a.message.clone())
                .collect::<Vec<_>>()
                .join("; ");
            self.chain.push(ChainStep::new("alert", &codes_line, &finding));
        }
        if codes.contains(&AlertCode::PodsPending) || codes.contains(&AlertCode::QuorumLost) {
            self.flow = Flow::Scheduling;
            self.facts.rm_allowed = true;
            self.push(ProposedCall::kubectl("get events -n elasticsearch-benchmark"), Purpose::Events);
        } else if codes.contains(&AlertCode::ClusterRed) {
            self.flow = Flow::Shards;
            self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
        } else if codes.contains(&AlertCode::NicDegradation) {
            self.flow = Flow::Nic;
            for h in subjects(AlertCode::NicDegradation) {
                self.push(ProposedCall::node(&h, "cat /proc/net/bonding/bond0"), Purpose::Bond(h.clone()));
                self.push(ProposedCall::node(&h, "ethtool -S eno2np1"), Purpose::Ethtool(h.clone()));
            }
            let body = json!({"index": {"merge": {"scheduler": {"max_thread_count": 1}, "policy": {"max_merged_segment": "2gb"}}}});
            self.push(ProposedCall::es_write("PUT", "/_settings", Some(body)), Purpose::Merge);
        } else if codes.contains(&AlertCode::HeapPressure) {
            self.flow = Flow::Heap;
            let pod = subjects(AlertCode::HeapPressure).into_iter().next().unwrap_or_default();
            self.push(ProposedCall::es_get("/_cat/indices?s=store.size:desc"), Purpose::CatIndices);
            self.push(ProposedCall::es_get("/_cat/shards"), Purpose::HeapShards(pod));
        } else if codes.contains(&AlertCode::DiskUsageHigh) {
            self.flow = Flow::Disk;
            self.facts.rm_allowed = ctx.precedents.iter().any(|r| {
                r.actions.iter().any(|a| {
                    a.tool == Tool::ExecOnNode
                        && super::normalize_command(a.args.get("command").and_then(Value::as_str).unwrap_or(""))
                            .starts_with("rm ")
                })
            });
            for h in subjects(AlertCode::DiskUsageHigh) {
                self.push(ProposedCall::node(&h, "df -h /mnt"), Purpose::Df(h.clone()));
                self.push(ProposedCall::node(&h, "du -sh /mnt/*"), Purpose::Du(h.clone()));
            }
        } else if codes.contains(&AlertCode::ClusterYellow) || codes.contains(&AlertCode::PodDown) {
            self.flow = Flow::Yellow;
            self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
        } else if ctx.trigger.is_empty() {
            self.flow = Flow::Idle;
            self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
        } else {
            self.flow = Flow::Unknown;
        }
    }

    fn interpret(&mut self, step: &HistoryStep, purpose: Purpose) {
        let out = step.result.output.as_str();
        if !step.result.verdict.is_allowed() {
            self.note(step, "denied by safety guard".into());
            return;
        }
        match purpose {
            Purpose::Events => {
                let (hosts, pods) = pressured_hosts(out);
                if hosts.is_empty() {
                    self.note(step, "no DiskPressure scheduling failures".into());
                } else {
                    self.note(step, format!("FailedScheduling citing DiskPressure on {}", hosts.join(", ")));
                    if let Some(p) = pods.first() {
                        self.push(ProposedCall::kubectl(&format!("describe pod {p}")), Purpose::Describe(p.clone()));
                    }
                    for h in &hosts {
                        self.push(ProposedCall::node(h, "df -h /mnt"), Purpose::Df(h.clone()));
                        self.push(ProposedCall::node(h, "du -sh /mnt/*"), Purpose::Du(h.clone()));
                    }
                    for h in &hosts {
                        self.push(ProposedCall::node(h, "df -h /mnt"), Purpose::VerifyDf(h.clone()));
                    }
                }
                self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
            }
            Purpose::Describe(pod) => {
                let line = out.lines().rev().find(|l| l.contains("DiskPressure")).map(str::trim).unwrap_or("no events");
                self.note(step, format!("{pod}: {line}"));
            }
            Purpose::Df(host) => match df_percent(out) {
                Some(p) => {
                    self.facts.disk_pct.insert(host.clone(), p);
                    self.note(step, format!("{host}: {DATA_MOUNT} at {p}%"));
                }
                None => self.note(step, format!("{host}: df unreadable")),
            },
            Purpose::Du(host) => match largest_foreign(out) {
                Some((path, size)) => {
                    self.note(step, format!("{host}: {path} holds {size} of non-Elasticsearch data"));
                    self.facts.foreign.push((host.clone(), path.clone(), size));
                    if self.facts.rm_allowed {
                        self.push_front(ProposedCall::node(&host, &format!("rm -rf {path}")), Purpose::Rm(host, path));
                    }
                }
                None => self.note(step, format!("{host}: no foreign data under {DATA_MOUNT}")),
            },
            Purpose::Rm(host, path) => {
                if step.failed {
                    self.note(step, format!("{host}: {}", out.trim()));
                } else {
                    self.facts.cleaned.push((host.clone(), path));
                    self.note(step, format!("{host}: {}", out.trim()));
                    if self.flow == Flow::Disk {
                        self.push_front(ProposedCall::node(&host, "df -h /mnt"), Purpose::VerifyDf(host));
                    }
                }
            }
            Purpose::VerifyDf(host) => {
                let before = self.facts.disk_pct.get(&host).copied();
                match (before, df_percent(out)) {
                    (Some(b), Some(a)) => {
                        self.note(step, format!("{host}: disk {b}% -> {a}%"));
                        self.facts.disk_pct.insert(host, a);
                    }
                    (_, Some(a)) => {
                        self.note(step, format!("{host}: disk {a}%"));
                        self.facts.disk_pct.insert(host, a);
                    }
                    _ => self.note(step, format!("{host}: df unreadable")),
                }
            }
            Purpose::Health => self.on_health(step),
            Purpose::CatShards => {
                let mut broken: Vec<String> = Vec::new();
                for l in out.lines().filter(|l| l.contains("no_valid_shard_copy")) {
                    if let Some(name) = l.split_whitespace().next() {
                        if broken.last().map(String::as_str) != Some(name) && !broken.iter().any(|b| b == name) {
                            broken.push(name.to_string());
                        }
                    }
                }
                self.facts.shards_checked = true;
                if broken.is_empty() {
                    self.note(step, "no shards without a valid copy".into());
                    self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
                    return;
                }
                self.note(step, format!("{} indices report no_valid_shard_copy", broken.len()));
                let batches: Vec<Vec<String>> = broken.chunks(DELETE_BATCH).map(<[String]>::to_vec).collect();
                for (i, b) in batches.iter().enumerate() {
                    self.push(ProposedCall::es_write("DELETE", &format!("/{}", b.join(",")), None), Purpose::Delete(i));
                }
                for (i, b) in batches.iter().enumerate() {
                    self.push(ProposedCall::es_write("PUT", &format!("/{}", b.join(",")), None), Purpose::Create(i));
                }
                self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
                self.facts.broken = broken;
            }
            Purpose::Delete(i) => {
                let ok = !step.failed && !out.starts_with("HTTP");
                self.note(step, format!("delete batch {}: {}", i + 1, if ok { "acknowledged" } else { out.trim() }));
            }
            Purpose::Create(i) => {
                let ok = !step.failed && !out.starts_with("HTTP");
                if ok {
                    let n = self.facts.broken.chunks(DELETE_BATCH).nth(i).map_or(0, <[String]>::len);
                    self.facts.recreated += n;
                }
                self.note(step, format!("create batch {}: {}", i + 1, if ok { "acknowledged" } else { out.trim() }));
            }
            Purpose::Bond(host) => {
                let degraded = out.contains("degraded");
                if degraded {
                    self.facts.degraded.insert(host.clone());
                }
                self.note(
                    step,
                    format!("{host}: bond0 {}", if degraded { "degraded to single-NIC mode" } else { "healthy" }),
                );
            }
            Purpose::Ethtool(host) => {
                let rate = out
                    .lines()
                    .find(|l| l.contains("tcp_retransmit_rate"))
                    .and_then(|l| l.split(':').nth(1))
                    .and_then(|v| v.trim().trim_end_matches("/s").parse::<f64>().ok());
                match rate {
                    Some(r) => {
                        self.facts.retransmit.insert(host.clone(), r);
                        self.note(step, format!("{host}: eno2np1 retransmits {r:.2}/s"));
                    }
                    None => self.note(step, format!("{host}: ethtool unreadable")),
                }
            }
            Purpose::Merge => {
                self.facts.merge_applied = !step.failed;
                self.note(step, "merge throttled to cut replication traffic".into());
            }
            Purpose::CatIndices => {
                self.facts.heavy_index = out.lines().nth(1).and_then(|l| l.split_whitespace().nth(1)).map(str::to_string);
                let finding = match &self.facts.heavy_index {
                    Some(i) => format!("largest index {i}"),
                    None => "no indices".into(),
                };
                self.note(step, finding);
            }
            Purpose::HeapShards(pod) => self.plan_move(step, &pod),
            Purpose::Move => {
                self.facts.moved = !step.failed;
                self.note(step, if step.failed { out.trim().to_string() } else { "shard relocation started".into() });
            }
            Purpose::Retry => {
                self.facts.retried = !step.failed;
                self.note(step, "unassigned copies reallocated to live data pods".into());
            }
        }
    }

    fn on_health(&mut self, step: &HistoryStep) {
        let doc: Value = serde_json::from_str(&step.result.output).unwrap_or(Value::Null);
        let status = doc.get("status").and_then(Value::as_str).map(str::to_string);
        self.facts.nodes = doc.get("number_of_nodes").and_then(Value::as_u64);
        self.facts.unassigned = doc.get("unassigned_shards").and_then(Value::as_u64).unwrap_or(0);
        self.facts.health_polls += 1;
        let finding = match (&status, self.facts.nodes) {
            (Some(s), Some(n)) => format!("cluster {} with {n} nodes", s.to_uppercase()),
            _ => "health unavailable".into(),
        };
        self.note(step, finding);
        self.facts.health = status.clone();
        let red = status.as_deref() != Some("green") && status.as_deref() != Some("yellow");
        match self.flow {
            Flow::Scheduling | Flow::Shards if red => {
                if !self.facts.shards_checked && self.facts.recreated == 0 {
                    self.push(ProposedCall::es_get("/_cat/shards?v"), Purpose::CatShards);
                } else if self.facts.health_polls < MAX_HEALTH_POLLS {
                    self.push(ProposedCall::es_get("/_cluster/health"), Purpose::Health);
                }
            }
            Flow::Yellow if status.as_deref() == Some("yellow") && self.facts.unassigned > 0 && !self.facts.retried => {
                self.push(ProposedCall::es_write("POST", "/_cluster/reroute?retry_failed=true", None), Purpose::Retry);
            }
            _ => {}
        }
    }

    fn plan_move(&mut self, step: &HistoryStep, pod: &str) {
        let rows: Vec<Vec<&str>> = step.result.output.lines().map(|l| l.split_whitespace().collect()).collect();
        let started = |r: &&Vec<&str>| r.len() >= 6 && r[3] == "STARTED";
        let on_pod: Vec<&Vec<&str>> = rows.iter().filter(started).filter(|r| r[5] == pod).collect();
        let pick = on_pod
            .iter()
            .find(|r| Some(r[0]) == self.facts.heavy_index.as_deref())
            .or_else(|| on_pod.first())
            .copied();
        let Some(row) = pick else {
            self.note(step, format!("{pod} holds no started shard copies"));
            return;
        };
        let (index, shard) = (row[0].to_string(), row[1].to_string());
        let holders: BTreeSet<&str> = rows
            .iter()
            .filter(|r| r.len() >= 6 && r[0] == index && r[1] == shard)
            .map(|r| r[5])
            .collect();
        let mut load: BTreeMap<&str, usize> = BTreeMap::new();
        for r in rows.iter().filter(started) {
            *load.entry(r[5]).or_default() += 1;
        }
        let target = load
            .iter()
            .filter(|(n, _)| !holders.contains(*n) && **n != pod)
            .min_by_key(|(n, c)| (**c, **n))
            .map(|(n, _)| n.to_string());
        let Some(target) = target else {
            self.note(step, format!("no relocation target for [{index}][{shard}]"));
            return;
        };
        self.note(step, format!("{pod} holds [{index}][{shard}]; relocating to {target}"));
        let body = json!({"commands": [{"move": {
            "index": index,
            "shard": shard.parse::<u64>().unwrap_or(0),
            "from_node": pod,
            "to_node": target,
        }}]});
        self.push(ProposedCall::es_write("POST", "/_cluster/reroute", Some(body)), Purpose::Move);
    }

    fn outcome(&self) -> (LoopOutcome, String, Vec<String>) {
        let f = &self.facts;
        let healthy = matches!(f.health.as_deref(), Some("green") | Some("yellow"));
        match self.flow {
            Flow::Scheduling | Flow::Shards => {
                let mut parts = Vec::new();
                if !f.cleaned.is_empty() {
                    let hosts: Vec<&str> = f.cleaned.iter().map(|(h, _)| h.as_str()).collect();
                    parts.push(format!("removed foreign data on {}", hosts.join(", ")));
                }
                if f.recreated > 0 {
                    parts.push(format!("recreated {} indices without a valid shard copy", f.recreated));
                }
                let status = f.health.as_deref().unwrap_or("unknown").to_uppercase();
                parts.push(format!("cluster {status}"));
                let out = if healthy && (!f.cleaned.is_empty() || f.recreated > 0) {
                    LoopOutcome::Resolved
                } else if healthy {
                    LoopOutcome::Mitigated
                } else {
                    LoopOutcome::NeedsEscalation
                };
                (out, parts.join("; "), Vec::new())
            }
            Flow::Nic => {
                let flags: Vec<String> = f
                    .degraded
                    .iter()
                    .map(|h| format!("hardware: replace eno2np1 (Broadcom BCM57416) on {h}"))
                    .collect();
                let out = if f.merge_applied { LoopOutcome::Mitigated } else { LoopOutcome::NeedsEscalation };
                let summary = format!(
                    "NIC degradation on {} host(s); merge throttled, hardware replacement required",
                    f.retransmit.len().max(f.degraded.len())
                );
                (out, summary, flags)
            }
            Flow::Heap => {
                if f.moved {
                    (LoopOutcome::Mitigated, "relocated a shard away from the hot pod".into(), Vec::new())
                } else {
                    (LoopOutcome::NeedsEscalation, "heap pressure without a relocation option".into(), Vec::new())
                }
            }
            Flow::Disk => {
                let over: Vec<&String> = f.disk_pct.iter().filter(|(_, p)| **p >= 80).map(|(h, _)| h).collect();
                if !f.cleaned.is_empty() && over.is_empty() {
                    (LoopOutcome::Resolved, "foreign data removed per precedent".into(), Vec::new())
                } else {
                    let found: Vec<String> = f.foreign.iter().map(|(h, p, s)| format!("{p} ({s}) on {h}")).collect();
                    let summary = if found.is_empty() {
                        "disk usage rising with no foreign data found".into()
                    } else {
                        format!("disk usage rising; non-Elasticsearch data: {}", found.join(", "))
                    };
                    (LoopOutcome::NeedsEscalation, summary, vec!["operator: confirm removal of foreign data".into()])
                }
            }
            Flow::Yellow => {
                if f.retried {
                    (LoopOutcome::Mitigated, "reallocated stranded shard copies".into(), Vec::new())
                } else if healthy {
                    (LoopOutcome::NoAnomaly, format!("cluster {} and recovering", f.health.as_deref().unwrap_or("")), Vec::new())
                } else {
                    (LoopOutcome::NeedsEscalation, "cluster not recovering".into(), Vec::new())
                }
            }
            Flow::Idle => {
                if healthy || f.health.is_none() {
                    (LoopOutcome::NoAnomaly, "no anomaly".into(), Vec::new())
                } else {
                    (LoopOutcome::NeedsEscalation, "cluster RED without a trigger".into(), Vec::new())
                }
            }
            Flow::Unknown => (LoopOutcome::NeedsEscalation, "no playbook for the trigger".into(), Vec::new()),
        }
    }

    fn report(&self) -> ProposedCall {
        let (outcome, summary, flags) = self.outcome();
        ProposedCall::report(outcome, &summary, &self.chain, &flags)
    }
}

impl Investigator for PlaybookInvestigator {
    fn propose(&mut self, ctx: &LoopContext, history: &[HistoryStep]) -> ProposedCall {
        if history.is_empty() && self.seen == 0 && self.chain.is_empty() && self.queue.is_empty() {
            self.start(ctx);
        }
        for step in &history[self.seen..] {
            if let Some(p) = self.awaiting.take() {
                self.interpret(step, p);
            }
        }
        self.seen = history.len();
        let max = if ctx.max_iterations == 0 { 20 } else { ctx.max_iterations } as usize;
        if history.len() + 1 >= max {
            return self.report();
        }
        match self.queue.pop_front() {
            Some((call, purpose)) => {
                self.awaiting = Some(purpose);
                call
            }
            None => self.report(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        assert_eq!(parse_size("172G"), Some(172e9));
        assert!((parse_size("4.1G").unwrap() - 4.1e9).abs() < 1.0);
        let df = "Filesystem      Size  Used Avail Use% Mounted on\n/dev/nvme0n1p1  207G  176G   31G   85% /mnt\n";
        assert_eq!(df_percent(df), Some(85));
        let du = "4.1G\t/mnt/esdata\n172G\t/mnt/cassandra-disk1\n";
        assert_eq!(largest_foreign(du), Some(("/mnt/cassandra-disk1".into(), "172G".into())));
        let ev = "LAST SEEN   TYPE      REASON             OBJECT              MESSAGE\n\
                  4600        Warning   FailedScheduling   pod/es-master-0     DiskPressure on node s797 (disk 85% >= eviction threshold 85%)\n\
                  4600        Warning   FailedScheduling   pod/es-master-2     DiskPressure on node s812 (disk 85% >= eviction threshold 85%)\n";
        let (hosts, pods) = pressured_hosts(ev);
        assert_eq!(hosts, vec!["s797".to_string(), "s812".to_string()]);
        assert_eq!(pods[0], "es-master-0");
    }
}
