//! Emulated host, Kubernetes and Elasticsearch command surfaces.
//!
//! Output formats are fixed text templates so they can be golden-tested and
//! parsed back by the investigator. Sizes use decimal units (`G` = 10^9 bytes).

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    place_copies, IndexState, PodPhase, PodRole, ShardState, SimError, Simulator, DATA_MOUNT, ES_DATA_DIR, GB,
    NAMESPACE,
};

/// Response from the emulated REST API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EsResponse {
    pub status: u16,
    pub body: Value,
}

impl EsResponse {
    fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    fn text(body: String) -> Self {
        Self::ok(Value::String(body))
    }

    /// Body as the text a client would print.
    pub fn render(&self) -> String {
        match &self.body {
            Value::String(s) => s.clone(),
            other => serde_json::to_string_pretty(other).expect("json renders"),
        }
    }
}

/// Human-readable decimal size, `df -H` style.
pub fn human_size(bytes: u64) -> String {
    let gb = bytes as f64 / GB as f64;
    if gb >= 10.0 {
        format!("{}G", gb.round() as u64)
    } else if bytes >= GB / 10 {
        format!("{gb:.1}G")
    } else {
        format!("{}M", (bytes as f64 / 1e6).round() as u64)
    }
}

fn normalize(cmd: &str) -> Vec<String> {
    cmd.split_whitespace().map(str::to_string).collect()
}

/// `true` when `name` designates exactly one index.
pub fn is_specific_index_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('_')
        && !name.starts_with('-')
        && !name.contains(['*', '?'])
        && name != "."
}

impl Simulator {
    /// Runs one emulated shell command on a host.
    pub fn exec_host_command(&mut self, host_id: &str, cmd: &str) -> Result<String, SimError> {
        let hi = self
            .state
            .hosts
            .iter()
            .position(|h| h.host_id == host_id)
            .ok_or_else(|| SimError::NotFound(format!("host {host_id}")))?;
        let words = normalize(cmd);
        let Some(program) = words.first() else {
            return Err(SimError::Unsupported(String::new()));
        };
        let host = &self.state.hosts[hi];
        match program.as_str() {
            "df" => {
                let pct = host.df_pct();
                Ok(format!(
                    "Filesystem      Size  Used Avail Use% Mounted on\n/dev/nvme0n1p1  {:>4}  {:>4}  {:>4}  {:>3}% {DATA_MOUNT}\n",
                    human_size(host.mount_capacity_bytes),
                    human_size(host.used_bytes()),
                    human_size(host.free_bytes()),
                    pct
                ))
            }
            "du" => {
                let mut out = format!("{}\t{DATA_MOUNT}/{ES_DATA_DIR}\n", human_size(host.es_used_bytes));
                for (dir, bytes) in &host.foreign_dirs {
                    out.push_str(&format!("{}\t{DATA_MOUNT}/{dir}\n", human_size(*bytes)));
                }
                Ok(out)
            }
            "dmesg" => {
                let lines: Vec<&str> = host.dmesg_ring.iter().rev().take(50).map(String::as_str).collect();
                let mut lines: Vec<&str> = lines.into_iter().rev().collect();
                lines.push("");
                Ok(lines.join("\n"))
            }
            "smartctl" | "nvme" => Ok(format!(
                "SMART/Health Information (NVMe Log 0x02)\n\
                 Critical Warning:                   0x00\n\
                 Temperature:                        {:.0} Celsius\n\
                 Percentage Used:                    {:.0}%\n\
                 Media and Data Integrity Errors:    {}\n\
                 Read Latency (avg):                 {:.0} us\n",
                host.thermal_c, host.nvme.wear_level_pct, host.nvme.media_errors, host.nvme.read_latency_us
            )),
            "ethtool" => Ok(format!(
                "NIC statistics for eno2np1 (Broadcom BCM57416 NetXtreme-E):\n\
                 \x20    rx_errors: {}\n\
                 \x20    tcp_retransmit_rate: {:.2}/s\n\
                 Link detected: {}\n",
                host.nic.error_count,
                host.nic.retransmit_rate,
                if host.nic.bond_degraded { "no" } else { "yes" }
            )),
            "cat" if words.get(1).map(String::as_str) == Some("/proc/net/bonding/bond0") => {
                let (mii, status) = if host.nic.bond_degraded {
                    ("down", "degraded (single-NIC mode)")
                } else {
                    ("up", "healthy")
                };
                Ok(format!(
                    "Bonding Mode: IEEE 802.3ad Dynamic link aggregation\n\
                     MII Status: up\n\
                     Slave Interface: eno1np0\n\
                     MII Status: up\n\
                     Slave Interface: eno2np1\n\
                     MII Status: {mii}\n\
                     Bond status: {status}\n"
                ))
            }
            "rm" => self.rm_foreign(hi, &words),
            _ => Err(SimError::Unsupported(cmd.trim().to_string())),
        }
    }

    fn rm_foreign(&mut self, hi: usize, words: &[String]) -> Result<String, SimError> {
        let targets: Vec<&String> = words[1..].iter().filter(|w| !w.starts_with('-')).collect();
        let [target] = targets.as_slice() else {
            return Err(SimError::Unsupported(words.join(" ")));
        };
        let prefix = format!("{DATA_MOUNT}/");
        let Some(dir) = target.trim_end_matches('/').strip_prefix(&prefix) else {
            return Err(SimError::Unsupported(words.join(" ")));
        };
        if dir.is_empty() || dir.contains('/') || dir == ES_DATA_DIR {
            return Err(SimError::Unsupported(words.join(" ")));
        }
        let host_id = self.state.hosts[hi].host_id.clone();
        let Some(bytes) = self.state.hosts[hi].foreign_dirs.remove(dir) else {
            return Err(SimError::CommandFailed(format!(
                "rm: cannot remove '{target}': No such file or directory"
            )));
        };
        self.end_growth(&host_id, dir);
        self.emit("host", &host_id, format!("removed {DATA_MOUNT}/{dir} ({} freed)", human_size(bytes)));
        self.flush_pending();
        Ok(format!("removed directory '{DATA_MOUNT}/{dir}' ({} freed)\n", human_size(bytes)))
    }

    /// Runs a command inside a pod: log tail or a local REST call.
    pub fn exec_pod_command(&mut self, pod_id: &str, cmd: &str) -> Result<String, SimError> {
        let pod = self
            .state
            .pod(pod_id)
            .ok_or_else(|| SimError::NotFound(format!("pod {pod_id}")))?;
        if !pod.is_running() {
            return Err(SimError::CommandFailed(format!("pod {pod_id} is not running")));
        }
        let words = normalize(cmd);
        match words.first().map(String::as_str) {
            Some("logs") | Some("tail") => {
                let mut out = String::new();
                for l in pod.log_ring.iter().rev().take(40).collect::<Vec<_>>().into_iter().rev() {
                    out.push_str(&format!("[{}][{}] {}\n", l.at_s, l.level.as_str(), l.message));
                }
                Ok(out)
            }
            Some("curl") => {
                let url = words.iter().find(|w| w.contains("localhost:9200")).cloned().unwrap_or_default();
                let path = url.split("localhost:9200").nth(1).unwrap_or("/").to_string();
                let path = if path.is_empty() { "/".to_string() } else { path };
                Ok(self.exec_es_api("GET", &path, None)?.render())
            }
            _ => Err(SimError::Unsupported(cmd.trim().to_string())),
        }
    }

    /// Emulated `kubectl` against the cluster namespace.
    pub fn exec_kubectl(&mut self, args: &str) -> Result<String, SimError> {
        let words: Vec<String> = normalize(args)
            .into_iter()
            .skip_while(|w| w == "kubectl")
            .collect();
        // drop namespace / output flags
        let mut plain = Vec::new();
        let mut skip_next = false;
        for w in &words {
            if skip_next {
                skip_next = false;
                continue;
            }
            if w == "-n" || w == "--namespace" {
                skip_next = true;
                continue;
            }
            if w.starts_with('-') {
                continue;
            }
            plain.push(w.as_str());
        }
        match plain.as_slice() {
            ["get", "pods" | "pod" | "po"] => Ok(self.render_pods()),
            ["get", "events" | "event" | "ev"] => Ok(self.render_events(None)),
            ["describe", "pod" | "pods" | "po", name] => self.describe_pod(name),
            ["delete", "pod" | "pods" | "po", name] => {
                let idx = self.pod_index(name)?;
                self.take_pod_down(idx);
                let pod = &mut self.state.pods[idx];
                pod.phase = PodPhase::Pending;
                pod.host_binding = None;
                pod.pending_reason = None;
                pod.restarts += 1;
                self.k8s_event(false, "Killing", format!("pod/{name}"), format!("Stopping container elasticsearch ({name})"));
                self.recompute(self.state.sim_time_s);
                self.flush_pending();
                Ok(format!("pod \"{name}\" deleted\n"))
            }
            [_, resource, ..] => Err(SimError::NotFound(format!("the server doesn't have a resource type \"{resource}\""))),
            _ => Err(SimError::NotFound(format!("unsupported kubectl invocation: {args}"))),
        }
    }

    fn render_pods(&self) -> String {
        let mut out = String::from("NAME           READY   STATUS       RESTARTS   NODE\n");
        for p in &self.state.pods {
            let ready = if p.is_running() { "1/1" } else { "0/1" };
            out.push_str(&format!(
                "{:<14} {:<7} {:<12} {:<10} {}\n",
                p.pod_id,
                ready,
                p.phase.to_string(),
                p.restarts,
                p.host_binding.as_deref().unwrap_or("<none>")
            ));
        }
        out
    }

    fn render_events(&self, object: Option<&str>) -> String {
        let mut out = String::from("LAST SEEN   TYPE      REASON             OBJECT              MESSAGE\n");
        for e in self.state.k8s_events.iter().filter(|e| object.is_none_or(|o| e.object == o)) {
            out.push_str(&format!(
                "{:<11} {:<9} {:<18} {:<19} {}\n",
                e.at_s,
                if e.warning { "Warning" } else { "Normal" },
                e.reason,
                e.object,
                e.message
            ));
        }
        out
    }

    fn describe_pod(&self, name: &str) -> Result<String, SimError> {
        let pod = self
            .state
            .pod(name)
            .ok_or_else(|| SimError::NotFound(format!("pods \"{name}\" not found")))?;
        let role = match pod.role {
            PodRole::Master => "master",
            PodRole::Data => "data",
        };
        let mut out = format!(
            "Name:         {}\nNamespace:    {NAMESPACE}\nNode:         {}\nStatus:       {}\nRole:         {role}\nImage:        elasticsearch:{}\nEvents:\n  Type     Reason            Message\n",
            pod.pod_id,
            pod.host_binding.as_deref().unwrap_or("<none>"),
            pod.phase,
            pod.version
        );
        let object = format!("pod/{name}");
        let recent: Vec<_> = self.state.k8s_events.iter().filter(|e| e.object == object).collect();
        for e in recent.iter().rev().take(5).rev() {
            out.push_str(&format!(
                "  {:<8} {:<17} {}\n",
                if e.warning { "Warning" } else { "Normal" },
                e.reason,
                e.message
            ));
        }
        Ok(out)
    }

    /// Emulated REST API: health, cat shards/indices, reroute, settings,
    /// forcemerge, and named index delete/create.
    pub fn exec_es_api(&mut self, method: &str, path: &str, body: Option<&Value>) -> Result<EsResponse, SimError> {
        let method = method.to_ascii_uppercase();
        let (route, query) = path.split_once('?').unwrap_or((path, ""));
        let route = route.trim_end_matches('/');
        let segments: Vec<&str> = route.split('/').filter(|s| !s.is_empty()).collect();
        match (method.as_str(), segments.as_slice()) {
            ("GET", ["_cluster", "health"]) => Ok(EsResponse::ok(self.cluster_health())),
            ("GET", ["_cat", "shards"]) => Ok(EsResponse::text(self.cat_shards(query.contains('v')))),
            ("GET", ["_cat", "indices"]) => Ok(EsResponse::text(self.cat_indices(query))),
            ("POST", ["_cluster", "reroute"]) => Ok(EsResponse::ok(self.reroute(body)?)),
            ("POST", ["_forcemerge"]) | ("POST", [_, "_forcemerge"]) => {
                for p in &mut self.state.pods {
                    if p.role == PodRole::Data {
                        p.segment_count = super::BASE_SEGMENTS;
                    }
                }
                self.emit("es", "cluster", "force merge completed".into());
                self.flush_pending();
                Ok(EsResponse::ok(json!({"_shards": {"failed": 0}})))
            }
            ("PUT", ["_settings"]) | ("PUT", [_, "_settings"]) => self.put_settings(body),
            ("DELETE", []) => Err(SimError::Request("index delete requires a specific index name".into())),
            ("DELETE", [names]) => self.delete_indices(names),
            ("PUT", [names]) => self.create_indices(names),
            _ => Err(SimError::Unsupported(format!("{method} {path}"))),
        }
    }

    fn cluster_health(&self) -> Value {
        let st = &self.state;
        let now = st.sim_time_s;
        let running: Vec<&str> = st.pods.iter().filter(|p| p.is_running()).map(|p| p.pod_id.as_str()).collect();
        let (mut active_primary, mut active, mut unassigned, mut initializing) = (0u64, 0u64, 0u64, 0u64);
        for i in &st.indices {
            for s in &i.shards {
                for c in &s.copies {
                    let up = running.contains(&c.pod.as_str()) && !s.no_valid_shard_copy;
                    match c.started_at_s {
                        Some(t) if up && t <= now => {
                            active += 1;
                            if c.primary {
                                active_primary += 1;
                            }
                        }
                        Some(_) if up => initializing += 1,
                        _ => unassigned += 1,
                    }
                }
            }
        }
        let mut doc = json!({
            "cluster_name": "es-benchmark",
            "status": st.health.as_str(),
            "number_of_nodes": running.len(),
            "number_of_data_nodes": st.pods.iter().filter(|p| p.is_running() && p.role == PodRole::Data).count(),
            "active_primary_shards": active_primary,
            "active_shards": active,
            "initializing_shards": initializing,
            "unassigned_shards": unassigned,
        });
        if !st.quorum {
            doc["error"] = json!("master_not_discovered_exception");
        }
        doc
    }

    fn cat_shards(&self, header: bool) -> String {
        let st = &self.state;
        let now = st.sim_time_s;
        let mut out = String::new();
        if header {
            out.push_str("index shard prirep state store node unassigned.reason\n");
        }
        for i in &st.indices {
            for s in &i.shards {
                for c in &s.copies {
                    let running = st.pod(&c.pod).is_some_and(|p| p.is_running());
                    let (state, node, reason) = if s.no_valid_shard_copy {
                        ("UNASSIGNED", "-", "no_valid_shard_copy")
                    } else if !running || c.started_at_s.is_none() {
                        ("UNASSIGNED", "-", "node_left")
                    } else if c.started_at_s.is_some_and(|t| t > now) {
                        ("INITIALIZING", c.pod.as_str(), "-")
                    } else {
                        ("STARTED", c.pod.as_str(), "-")
                    };
                    out.push_str(&format!(
                        "{} {} {} {} {} {} {}\n",
                        i.index_name,
                        s.number,
                        if c.primary { "p" } else { "r" },
                        state,
                        human_size(s.store_bytes),
                        node,
                        reason
                    ));
                }
            }
        }
        out
    }

    fn cat_indices(&self, query: &str) -> String {
        let mut rows: Vec<&IndexState> = self.state.indices.iter().collect();
        if query.contains("s=store.size:desc") {
            rows.sort_by(|a, b| b.store_bytes().cmp(&a.store_bytes()).then(a.index_name.cmp(&b.index_name)));
        }
        let mut out = String::from("health index pri rep store.size\n");
        for i in rows {
            let health = index_health(self, i);
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                health,
                i.index_name,
                i.primary_count,
                i.replica_count,
                human_size(i.store_bytes())
            ));
        }
        out
    }

    fn reroute(&mut self, body: Option<&Value>) -> Result<Value, SimError> {
        let now = self.state.sim_time_s;
        let mut moved = 0u64;
        if let Some(cmds) = body.and_then(|b| b.get("commands")).and_then(Value::as_array) {
            for cmd in cmds {
                let Some(mv) = cmd.get("move") else { continue };
                let field = |k: &str| {
                    mv.get(k)
                        .and_then(Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| SimError::Request(format!("move command missing {k}")))
                };
                let (index, from, to) = (field("index")?, field("from_node")?, field("to_node")?);
                let shard_no = mv.get("shard").and_then(Value::as_u64).unwrap_or(0) as u32;
                let to_ok = self.state.pod(&to).is_some_and(|p| p.is_running() && p.role == PodRole::Data);
                if !to_ok {
                    return Err(SimError::Request(format!("target node {to} is not an available data node")));
                }
                let delay = self.spec.replica_recovery_s;
                let ii = self
                    .state
                    .indices
                    .iter()
                    .position(|i| i.index_name == index)
                    .ok_or_else(|| SimError::Request(format!("no such index [{index}]")))?;
                let shard = self.state.indices[ii]
                    .shards
                    .iter_mut()
                    .find(|s| s.number == shard_no)
                    .ok_or_else(|| SimError::Request(format!("no shard {shard_no} in [{index}]")))?;
                if shard.copies.iter().any(|c| c.pod == to) {
                    return Err(SimError::Request(format!("{to} already holds a copy of [{index}][{shard_no}]")));
                }
                let copy = shard
                    .copies
                    .iter_mut()
                    .find(|c| c.pod == from)
                    .ok_or_else(|| SimError::Request(format!("[{index}][{shard_no}] has no copy on {from}")))?;
                copy.pod = to.clone();
                copy.started_at_s = Some(now + delay);
                moved += 1;
                if let Some(p) = self.state.pods.iter_mut().find(|p| p.pod_id == from) {
                    p.heap_leak_pct = (p.heap_leak_pct - 5.0).max(0.0);
                    p.heap_pct = (p.heap_pct - 5.0).max(0.0);
                }
            }
        }
        // retry allocation: copies stranded on down pods move to live data pods
        let live: Vec<String> = self
            .state
            .pods
            .iter()
            .filter(|p| p.is_running() && p.role == PodRole::Data)
            .map(|p| p.pod_id.clone())
            .collect();
        let mut reallocated = 0u64;
        if !live.is_empty() {
            let delay = self.spec.replica_recovery_s;
            let mut cursor = 0usize;
            for index in &mut self.state.indices {
                for shard in &mut index.shards {
                    if shard.no_valid_shard_copy {
                        continue;
                    }
                    for k in 0..shard.copies.len() {
                        if live.contains(&shard.copies[k].pod) {
                            continue;
                        }
                        let holders: Vec<String> = shard.copies.iter().map(|c| c.pod.clone()).collect();
                        for _ in 0..live.len() {
                            let candidate = &live[cursor % live.len()];
                            cursor += 1;
                            if !holders.contains(candidate) {
                                shard.copies[k].pod = candidate.clone();
                                shard.copies[k].started_at_s = Some(now + delay);
                                reallocated += 1;
                                break;
                            }
                        }
                    }
                }
            }
        }
        self.emit("es", "cluster", format!("reroute: {moved} moved, {reallocated} reallocated"));
        self.recompute(now);
        self.flush_pending();
        Ok(json!({"acknowledged": true, "moved": moved, "reallocated": reallocated}))
    }

    fn put_settings(&mut self, body: Option<&Value>) -> Result<EsResponse, SimError> {
        let body = body.ok_or_else(|| SimError::Request("settings body required".into()))?;
        let flat = flatten_settings(body);
        let mut changed = Vec::new();
        for (key, value) in &flat {
            let key = key.strip_prefix("index.").unwrap_or(key);
            match key {
                "refresh_interval" => {
                    let secs = value.trim_end_matches('s').parse::<u64>().ok();
                    self.state.settings.refresh_interval_s = secs;
                    changed.push("refresh_interval");
                }
                "translog.durability" => {
                    self.state.settings.translog_async = value == "async";
                    changed.push("translog.durability");
                }
                k if k.starts_with("merge.") => {
                    self.state.settings.merge_traffic_reduced = true;
                    changed.push("merge");
                }
                "number_of_replicas" => {
                    let n: u32 = value
                        .parse()
                        .map_err(|_| SimError::Request(format!("bad number_of_replicas {value}")))?;
                    self.set_replicas(n)?;
                    changed.push("number_of_replicas");
                }
                _ => {}
            }
        }
        changed.dedup();
        self.emit("es", "cluster", format!("settings updated: {}", changed.join(",")));
        self.flush_pending();
        Ok(EsResponse::ok(json!({"acknowledged": true})))
    }

    fn set_replicas(&mut self, n: u32) -> Result<(), SimError> {
        let data_ids: Vec<String> = self
            .state
            .pods
            .iter()
            .filter(|p| p.role == PodRole::Data)
            .map(|p| p.pod_id.clone())
            .collect();
        if n as usize >= data_ids.len() {
            return Err(SimError::Request(format!("cannot place {n} replicas")));
        }
        let now = self.state.sim_time_s;
        let delay = self.spec.replica_recovery_s;
        for index in &mut self.state.indices {
            index.replica_count = n;
            for shard in &mut index.shards {
                shard.copies.truncate(n as usize + 1);
                while shard.copies.len() < n as usize + 1 {
                    let holders: Vec<&String> = shard.copies.iter().map(|c| &c.pod).collect();
                    let pod = data_ids.iter().find(|d| !holders.contains(d)).cloned().expect("n < data pods");
                    shard.copies.push(super::ShardCopy { primary: false, pod, started_at_s: Some(now + delay) });
                }
            }
        }
        Ok(())
    }

    fn delete_indices(&mut self, names: &str) -> Result<EsResponse, SimError> {
        let list: Vec<&str> = names.split(',').collect();
        if let Some(bad) = list.iter().find(|n| !is_specific_index_name(n)) {
            return Err(SimError::Request(format!("index delete requires specific names, got [{bad}]")));
        }
        let missing: Vec<&str> = list.iter().copied().filter(|n| self.state.index(n).is_none()).collect();
        if !missing.is_empty() {
            return Ok(EsResponse {
                status: 404,
                body: json!({"error": {"type": "index_not_found_exception", "index": missing.join(",")}}),
            });
        }
        self.state.indices.retain(|i| !list.contains(&i.index_name.as_str()));
        self.emit("es", "cluster", format!("deleted {} indices", list.len()));
        self.recompute(self.state.sim_time_s);
        self.flush_pending();
        Ok(EsResponse::ok(json!({"acknowledged": true, "deleted": list.len()})))
    }

    fn create_indices(&mut self, names: &str) -> Result<EsResponse, SimError> {
        let list: Vec<&str> = names.split(',').collect();
        if let Some(bad) = list.iter().find(|n| !is_specific_index_name(n)) {
            return Err(SimError::Request(format!("invalid index name [{bad}]")));
        }
        if let Some(dup) = list.iter().find(|n| self.state.index(n).is_some()) {
            return Ok(EsResponse {
                status: 400,
                body: json!({"error": {"type": "resource_already_exists_exception", "index": dup}}),
            });
        }
        let data_ids: Vec<String> = self
            .state
            .pods
            .iter()
            .filter(|p| p.role == PodRole::Data)
            .map(|p| p.pod_id.clone())
            .collect();
        let now = self.state.sim_time_s;
        let (primaries, replicas) = (self.spec.primaries_per_index, self.spec.replicas.min(data_ids.len() as u32 - 1));
        let mut ordinal: usize = self.state.indices.iter().map(|i| i.shards.len()).sum();
        for name in &list {
            let shards = (0..primaries)
                .map(|n| {
                    let mut copies = place_copies(&data_ids, ordinal, replicas, None);
                    for c in &mut copies {
                        let delay = if c.primary { self.spec.primary_recovery_s } else { self.spec.replica_recovery_s };
                        c.started_at_s = Some(now + delay);
                    }
                    ordinal += 1;
                    ShardState { number: n, store_bytes: 0, copies, no_valid_shard_copy: false }
                })
                .collect();
            self.state.indices.push(IndexState {
                index_name: name.to_string(),
                primary_count: primaries,
                replica_count: replicas,
                shards,
            });
        }
        self.state.indices.sort_by(|a, b| a.index_name.cmp(&b.index_name));
        self.emit("es", "cluster", format!("created {} indices", list.len()));
        self.recompute(now);
        self.flush_pending();
        Ok(EsResponse::ok(json!({"acknowledged": true, "created": list.len()})))
    }
}

fn index_health(sim: &Simulator, index: &IndexState) -> &'static str {
    let st = &sim.state;
    let now = st.sim_time_s;
    let mut yellow = false;
    for s in &index.shards {
        if s.no_valid_shard_copy {
            return "red";
        }
        let started = s
            .copies
            .iter()
            .filter(|c| st.pod(&c.pod).is_some_and(|p| p.is_running()) && c.started_at_s.is_some_and(|t| t <= now))
            .count();
        if started == 0 {
            return "red";
        }
        yellow |= started < s.copies.len();
    }
    if yellow {
        "yellow"
    } else {
        "green"
    }
}

/// Flattens nested settings objects into dotted keys with string values.
fn flatten_settings(v: &Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::super::{ClusterSpec, FaultKind, FaultSpec, Health, HostSpec, SimOptions};
    use super::*;

    fn sim() -> Simulator {
        Simulator::new(ClusterSpec::default(), 5, SimOptions::zero_noise()).unwrap()
    }

    fn pressured_sim() -> Simulator {
        let mut spec = ClusterSpec::default();
        spec.hosts[0] = HostSpec { id: "s797".into(), mount_capacity_bytes: 207_200_000_000, es_used_bytes: 4_144_000_000 };
        let mut s = Simulator::new(spec, 5, SimOptions::zero_noise()).unwrap();
        s.inject_fault(FaultSpec::new(
            0,
            FaultKind::ForeignDataGrowth {
                host: "s797".into(),
                dir: "cassandra-disk1".into(),
                rate_bytes_per_s: 172 * GB,
                total_bytes: 172 * GB,
            },
        ))
        .unwrap();
        s.tick(1).unwrap();
        s
    }

    #[test]
    fn df_golden() {
        let mut s = pressured_sim();
        let out = s.exec_host_command("s797", "df -h /mnt").unwrap();
        assert_eq!(
            out,
            "Filesystem      Size  Used Avail Use% Mounted on\n/dev/nvme0n1p1  207G  176G   31G   85% /mnt\n"
        );
    }

    #[test]
    fn du_lists_foreign_dir() {
        let mut s = pressured_sim();
        let out = s.exec_host_command("s797", "du -sh /mnt/*").unwrap();
        assert_eq!(out, "4.1G\t/mnt/esdata\n172G\t/mnt/cassandra-disk1\n");
    }

    #[test]
    fn rm_then_df_shows_two_percent() {
        let mut s = pressured_sim();
        s.exec_host_command("s797", "rm -rf /mnt/cassandra-disk1").unwrap();
        let out = s.exec_host_command("s797", "df -h").unwrap();
        assert!(out.contains("  2% /mnt"), "{out}");
        assert!(matches!(
            s.exec_host_command("s797", "rm -rf /mnt/cassandra-disk1"),
            Err(SimError::CommandFailed(_))
        ));
    }

    #[test]
    fn unemulated_command_is_unsupported() {
        let mut s = sim();
        assert!(matches!(s.exec_host_command("s797", "reboot"), Err(SimError::Unsupported(_))));
        assert!(matches!(s.exec_host_command("s797", "rm -rf /mnt/esdata"), Err(SimError::Unsupported(_))));
        assert!(matches!(s.exec_host_command("nohost", "df"), Err(SimError::NotFound(_))));
    }

    #[test]
    fn bond_and_smart_outputs() {
        let mut s = sim();
        let bond = s.exec_host_command("s811", "cat /proc/net/bonding/bond0").unwrap();
        assert!(bond.contains("Bond status: healthy"));
        let smart = s.exec_host_command("s811", "smartctl -a /dev/nvme0n1").unwrap();
        assert!(smart.contains("Percentage Used:                    13%"), "{smart}");
    }

    #[test]
    fn health_on_fresh_cluster() {
        let mut s = sim();
        let r = s.exec_es_api("GET", "/_cluster/health", None).unwrap();
        assert_eq!(r.body["status"], "green");
        assert_eq!(r.body["number_of_nodes"], 15);
    }

    #[test]
    fn corruption_visible_in_cat_shards_and_recreate_heals() {
        let mut s = sim();
        s.inject_fault(FaultSpec::new(0, FaultKind::ShardCopyCorruption { index_count: 109 })).unwrap();
        s.tick(1).unwrap();
        let text = s.exec_es_api("GET", "/_cat/shards?v", None).unwrap().render();
        let mut flagged: Vec<&str> = text
            .lines()
            .filter(|l| l.ends_with("no_valid_shard_copy"))
            .map(|l| l.split(' ').next().unwrap())
            .collect();
        flagged.dedup();
        assert_eq!(flagged.len(), 109);
        let names = flagged.join(",");
        assert_eq!(s.exec_es_api("DELETE", &format!("/{names}"), None).unwrap().status, 200);
        assert_eq!(s.exec_es_api("PUT", &format!("/{names}"), None).unwrap().status, 200);
        assert_eq!(s.state().indices.len(), 168);
        let mut seen = vec![s.health()];
        for _ in 0..90 {
            s.tick(1).unwrap();
            if *seen.last().unwrap() != s.health() {
                seen.push(s.health());
            }
        }
        assert_eq!(seen, vec![Health::Red, Health::Yellow, Health::Green]);
    }

    #[test]
    fn delete_requires_name() {
        let mut s = sim();
        assert!(matches!(s.exec_es_api("DELETE", "/", None), Err(SimError::Request(_))));
        assert!(matches!(s.exec_es_api("DELETE", "/logs-*", None), Err(SimError::Request(_))));
        assert!(matches!(s.exec_es_api("DELETE", "/_all", None), Err(SimError::Request(_))));
        assert_eq!(s.exec_es_api("DELETE", "/logs-000042", None).unwrap().status, 200);
        assert_eq!(s.exec_es_api("DELETE", "/logs-000042", None).unwrap().status, 404);
    }

    #[test]
    fn settings_toggle_tuning() {
        let mut s = sim();
        let body = json!({"index": {"refresh_interval": "30s", "translog": {"durability": "async"}}});
        s.exec_es_api("PUT", "/_settings", Some(&body)).unwrap();
        assert!(s.state().settings.tuned());
    }

    #[test]
    fn kubectl_surfaces() {
        let mut s = pressured_sim();
        let pods = s.exec_kubectl("get pods -n elasticsearch-benchmark").unwrap();
        assert_eq!(pods.lines().filter(|l| l.contains("Pending")).count(), 5);
        let describe = s.exec_kubectl("describe pod es-data-0").unwrap();
        assert!(describe.contains("FailedScheduling") && describe.contains("DiskPressure"), "{describe}");
        let events = s.exec_kubectl("get events").unwrap();
        assert!(events.lines().any(|l| l.contains("FailedScheduling") && l.contains("s797")));
        assert!(matches!(s.exec_kubectl("get widgets"), Err(SimError::NotFound(_))));
        assert!(matches!(s.exec_kubectl("describe pod nope"), Err(SimError::NotFound(_))));
    }

    #[test]
    fn delete_running_pod_comes_back() {
        let mut s = sim();
        s.exec_kubectl("delete pod es-data-4").unwrap();
        assert_eq!(s.state().pod("es-data-4").unwrap().phase, PodPhase::Pending);
        s.tick(1).unwrap();
        assert_eq!(s.state().pod("es-data-4").unwrap().phase, PodPhase::Running);
    }

    #[test]
    fn reroute_reallocates_from_dead_pod() {
        let mut s = sim();
        s.inject_fault(FaultSpec::new(0, FaultKind::NodeKill { pod: "es-data-0".into(), down_s: None })).unwrap();
        s.tick(1).unwrap();
        assert_eq!(s.health(), Health::Yellow);
        s.exec_es_api("POST", "/_cluster/reroute?retry_failed=true", None).unwrap();
        s.tick(61).unwrap();
        assert_eq!(s.health(), Health::Green);
    }

    #[test]
    fn human_sizes() {
        assert_eq!(human_size(172 * GB), "172G");
        assert_eq!(human_size(4_144_000_000), "4.1G");
        assert_eq!(human_size(5_000_000), "5M");
    }
}
