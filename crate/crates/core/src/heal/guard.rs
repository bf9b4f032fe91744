//! Static command validation. Deterministic and side-effect free.

use serde_json::Value;

use super::{Tool, Verdict};
use crate::sim::{is_specific_index_name, DATA_MOUNT, ES_DATA_DIR};

/// Lowercases, strips quotes, turns newlines into `;` and collapses whitespace.
pub fn normalize_command(cmd: &str) -> String {
    cmd.chars()
        .filter(|c| *c != '"' && *c != '\'')
        .map(|c| if c == '\n' { ';' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn segments(normalized: &str) -> Vec<String> {
    normalized
        .split([';', '|', '&'])
        .map(|seg| {
            let mut words: Vec<&str> = seg.split_whitespace().collect();
            while words.first().is_some_and(|w| *w == "sudo" || *w == "env" || *w == "nohup") {
                words.remove(0);
            }
            words.join(" ")
        })
        .filter(|seg| !seg.is_empty())
        .collect()
}

fn check_rm(words: &[&str]) -> Verdict {
    let targets: Vec<&str> = words[1..].iter().copied().filter(|w| !w.starts_with('-')).collect();
    if targets.is_empty() {
        return Verdict::deny("rm without a target");
    }
    let prefix = format!("{DATA_MOUNT}/");
    for t in targets {
        if t.contains(['*', '?']) || t.contains("..") {
            return Verdict::deny(format!("rm target {t} uses wildcards or traversal"));
        }
        let Some(dir) = t.trim_end_matches('/').strip_prefix(&prefix) else {
            return Verdict::deny(format!("rm outside {DATA_MOUNT}: {t}"));
        };
        if dir.is_empty() || dir.contains('/') {
            return Verdict::deny(format!("rm target {t} is not a single data directory"));
        }
        if dir == ES_DATA_DIR {
            return Verdict::deny("rm of the Elasticsearch data directory");
        }
    }
    Verdict::Allowed
}

fn check_kubectl_words(words: &[&str]) -> Verdict {
    if words.iter().any(|w| *w == "--all" || w.starts_with("--all=") || *w == "--all-namespaces")
        && words.contains(&"delete") {
            return Verdict::deny("kubectl delete --all");
        }
    let plain: Vec<&str> = words.iter().copied().filter(|w| !w.starts_with('-') && *w != "kubectl").collect();
    match plain.first().copied() {
        Some("delete") => {
            let resource = plain.get(1).copied().unwrap_or("");
            let kind = resource.split('/').next().unwrap_or("");
            if matches!(
                kind,
                "node" | "nodes" | "no" | "namespace" | "namespaces" | "ns" | "pvc" | "persistentvolumeclaim"
                    | "persistentvolumeclaims" | "pv" | "persistentvolume" | "persistentvolumes"
            ) {
                return Verdict::deny(format!("kubectl delete {kind}"));
            }
            Verdict::Allowed
        }
        Some("scale") => {
            let zero = words.iter().enumerate().any(|(i, w)| {
                *w == "--replicas=0" || (*w == "--replicas" && words.get(i + 1) == Some(&"0"))
            });
            if zero {
                Verdict::deny("scale to zero replicas")
            } else {
                Verdict::Allowed
            }
        }
        Some("drain") => Verdict::deny("kubectl drain"),
        _ => Verdict::Allowed,
    }
}

fn check_es_delete(path: &str) -> Verdict {
    let route = path.split('?').next().unwrap_or("");
    let segs: Vec<&str> = route.split('/').filter(|s| !s.is_empty()).collect();
    match segs.as_slice() {
        [names] => match names.split(',').find(|n| !is_specific_index_name(n)) {
            Some(bad) => Verdict::deny(format!("index delete without a specific name: {bad}")),
            None => Verdict::Allowed,
        },
        [] => Verdict::deny("index delete without a specific name"),
        _ => Verdict::deny(format!("unsupported delete path {route}")),
    }
}

fn check_shell_segment(seg: &str) -> Verdict {
    let words: Vec<&str> = seg.split_whitespace().collect();
    let Some(program) = words.first().map(|p| p.rsplit('/').next().unwrap_or(p)) else {
        return Verdict::Allowed;
    };
    if program.starts_with("mkfs") {
        return Verdict::deny("filesystem creation");
    }
    if matches!(program, "shutdown" | "reboot" | "halt" | "poweroff") {
        return Verdict::deny(format!("host power operation {program}"));
    }
    if program == "init" && matches!(words.get(1), Some(&"0") | Some(&"6")) {
        return Verdict::deny("host power operation init");
    }
    if program == "systemctl" && words.iter().any(|w| matches!(*w, "reboot" | "poweroff" | "halt")) {
        return Verdict::deny("host power operation systemctl");
    }
    if program == "dd" && words.iter().any(|w| w.starts_with("of=/dev/")) {
        return Verdict::deny("raw device write with dd");
    }
    if program == "rm" {
        return check_rm(&words);
    }
    if program == "kubectl" {
        return check_kubectl_words(&words);
    }
    if program == "curl" {
        let delete = words.iter().enumerate().any(|(i, w)| {
            *w == "-xdelete" || *w == "--request=delete" || ((*w == "-x" || *w == "--request") && words.get(i + 1) == Some(&"delete"))
        });
        if delete {
            let url = words.iter().find(|w| w.contains("://") || w.contains("localhost:9200")).copied().unwrap_or("");
            let path = url.split_once(":9200").map(|(_, p)| p).unwrap_or("/");
            return check_es_delete(path);
        }
    }
    Verdict::Allowed
}

fn check_shell(cmd: &str) -> Verdict {
    if cmd.contains("$(") || cmd.contains('`') {
        return Verdict::deny("command substitution");
    }
    if cmd.chars().any(|c| c.is_control() && c != '\n' && c != '\t') {
        return Verdict::deny("control characters");
    }
    let norm = normalize_command(cmd);
    let dev_write = norm
        .split('>')
        .skip(1)
        .map(|rest| rest.trim_start_matches(['>', '|', '&']).trim_start())
        .any(|rest| rest.starts_with("/dev/") && !rest.starts_with("/dev/null"));
    if dev_write {
        return Verdict::deny("redirect into a device");
    }
    for seg in segments(&norm) {
        let v = check_shell_segment(&seg);
        if !v.is_allowed() {
            return v;
        }
    }
    Verdict::Allowed
}

fn str_arg<'a>(args: &'a Value, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or("")
}

fn body_sets_zero_replicas(body: &Value) -> bool {
    match body {
        Value::Object(map) => map.iter().any(|(k, v)| {
            (k.ends_with("number_of_replicas") && (v == &Value::from(0) || v.as_str() == Some("0")))
                || body_sets_zero_replicas(v)
        }),
        _ => false,
    }
}

/// Decides whether a proposed call may run.
pub fn validate_command(tool: Tool, args: &Value) -> Verdict {
    match tool {
        Tool::Report => Verdict::Allowed,
        Tool::ExecOnNode | Tool::ExecOnPod => check_shell(str_arg(args, "command")),
        Tool::Kubectl => {
            let raw = str_arg(args, "args");
            if raw.contains("$(") || raw.contains('`') {
                return Verdict::deny("command substitution");
            }
            if raw.chars().any(|c| c.is_control() && c != '\n' && c != '\t') {
                return Verdict::deny("control characters");
            }
            let norm = normalize_command(raw);
            for seg in segments(&norm) {
                let words: Vec<&str> = seg.split_whitespace().collect();
                let v = check_kubectl_words(&words);
                if !v.is_allowed() {
                    return v;
                }
            }
            Verdict::Allowed
        }
        Tool::EsApi => {
            let method = str_arg(args, "method").to_ascii_uppercase();
            if method.is_empty() || method == "GET" || method == "HEAD" {
                Verdict::Allowed
            } else {
                Verdict::deny(format!("{method} requires es_api_write"))
            }
        }
        Tool::EsApiWrite => {
            let method = str_arg(args, "method").to_ascii_uppercase();
            let path = str_arg(args, "path");
            if method == "DELETE" {
                return check_es_delete(path);
            }
            if args.get("body").is_some_and(body_sets_zero_replicas) {
                return Verdict::deny("number_of_replicas 0");
            }
            Verdict::Allowed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn node(cmd: &str) -> Verdict {
        validate_command(Tool::ExecOnNode, &json!({"host": "s797", "command": cmd}))
    }

    fn kubectl(a: &str) -> Verdict {
        validate_command(Tool::Kubectl, &json!({"args": a}))
    }

    #[test]
    fn blocks_destructive_shell() {
        for cmd in [
            "rm -rf /",
            "sudo rm -rf /",
            "RM -RF /",
            "rm -rf /mnt/*",
            "rm -rf /mnt/esdata",
            "rm -rf /mnt/../etc",
            "rm -rf /mnt",
            "mkfs.ext4 /dev/nvme0n1",
            "dd if=/dev/zero of=/dev/nvme0n1",
            "shutdown -h now",
            "reboot",
            "init 0",
            "systemctl reboot",
            "echo hi > /dev/sda",
            "df -h; rm -rf /",
            "df -h && rm -rf /var",
            "ls $(rm -rf /)",
            "ls `reboot`",
            "kubectl delete node s797",
            "curl -X DELETE localhost:9200/_all",
        ] {
            assert!(!node(cmd).is_allowed(), "{cmd} should be denied");
        }
    }

    #[test]
    fn allows_diagnostics_and_targeted_rm() {
        for cmd in [
            "df -h /mnt",
            "du -sh /mnt/*",
            "rm -rf /mnt/cassandra-disk1",
            "rm -rf '/mnt/cassandra-disk1/'",
            "dmesg | tail -50",
            "cat /proc/net/bonding/bond0",
            "echo x > /dev/null",
        ] {
            assert_eq!(node(cmd), Verdict::Allowed, "{cmd}");
        }
    }

    #[test]
    fn kubectl_rules() {
        for a in [
            "delete node s797",
            "delete nodes --all",
            "delete no/s797",
            "delete namespace elasticsearch",
            "delete ns elasticsearch",
            "delete pvc data-es-data-0",
            "delete pv pv-1",
            "delete pods --all",
            "scale statefulset es-data --replicas=0",
            "scale statefulset es-data --replicas 0",
            "DELETE NODE s797",
        ] {
            assert!(!kubectl(a).is_allowed(), "{a}");
        }
        for a in ["get pods", "describe pod es-data-0", "delete pod es-data-3", "scale sts es-data --replicas=3"] {
            assert_eq!(kubectl(a), Verdict::Allowed, "{a}");
        }
    }

    #[test]
    fn es_rules() {
        let w = |m: &str, p: &str| validate_command(Tool::EsApiWrite, &json!({"method": m, "path": p}));
        assert!(!w("DELETE", "/_all").is_allowed());
        assert!(!w("DELETE", "/*").is_allowed());
        assert!(!w("DELETE", "/logs-*").is_allowed());
        assert!(!w("DELETE", "/").is_allowed());
        assert!(!w("DELETE", "/a,b*").is_allowed());
        assert!(w("DELETE", "/logs-000001,logs-000002").is_allowed());
        let zero = validate_command(
            Tool::EsApiWrite,
            &json!({"method": "PUT", "path": "/_settings", "body": {"index": {"number_of_replicas": 0}}}),
        );
        assert!(!zero.is_allowed());
        let zero_flat = validate_command(
            Tool::EsApiWrite,
            &json!({"method": "PUT", "path": "/_settings", "body": {"index.number_of_replicas": "0"}}),
        );
        assert!(!zero_flat.is_allowed());
        assert!(!validate_command(Tool::EsApi, &json!({"method": "POST", "path": "/_cluster/reroute"})).is_allowed());
        assert!(validate_command(Tool::EsApi, &json!({"method": "GET", "path": "/_cluster/health"})).is_allowed());
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_command("  RM   -RF  \"/mnt/x\" "), "rm -rf /mnt/x");
    }
}
