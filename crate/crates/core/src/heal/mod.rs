//! Safety-guarded, budget-bounded tool-use loop.

mod guard;
mod playbook;
mod tools;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::memory::{IncidentRecord, MemoryOutcome};
use crate::monitors::Alert;
use crate::predictor::Forecast;
use crate::sim::Health;

pub use guard::{normalize_command, validate_command};
pub use playbook::{PlaybookInvestigator, DELETE_BATCH};
pub use tools::{dispatch_call, SimToolbox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HealError {
    #[error("protocol error at iteration {iteration}: {reason}")]
    Protocol { iteration: u32, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tool {
    EsApi,
    EsApiWrite,
    ExecOnPod,
    ExecOnNode,
    Kubectl,
    Report,
}

impl Tool {
    pub const ALL: [Tool; 6] = [
        Tool::EsApi,
        Tool::EsApiWrite,
        Tool::ExecOnPod,
        Tool::ExecOnNode,
        Tool::Kubectl,
        Tool::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tool::EsApi => "es_api",
            Tool::EsApiWrite => "es_api_write",
            Tool::ExecOnPod => "exec_on_pod",
            Tool::ExecOnNode => "exec_on_node",
            Tool::Kubectl => "kubectl",
            Tool::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Tool> {
        Tool::ALL.into_iter().find(|t| t.as_str() == name)
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an investigator sends: the tool name travels as free text so an
/// out-of-set name is detectable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposedCall {
    pub tool: String,
    pub args: Value,
}

impl ProposedCall {
    pub fn new(tool: Tool, args: Value) -> Self {
        Self { tool: tool.as_str().to_string(), args }
    }

    pub fn es_get(path: &str) -> Self {
        Self::new(Tool::EsApi, json!({"method": "GET", "path": path}))
    }

    pub fn es_write(method: &str, path: &str, body: Option<Value>) -> Self {
        let mut args = json!({"method": method, "path": path});
        if let Some(b) = body {
            args["body"] = b;
        }
        Self::new(Tool::EsApiWrite, args)
    }

    pub fn node(host: &str, command: &str) -> Self {
        Self::new(Tool::ExecOnNode, json!({"host": host, "command": command}))
    }

    pub fn pod(pod: &str, command: &str) -> Self {
        Self::new(Tool::ExecOnPod, json!({"pod": pod, "command": command}))
    }

    pub fn kubectl(args: &str) -> Self {
        Self::new(Tool::Kubectl, json!({"args": args}))
    }

    pub fn report(outcome: LoopOutcome, summary: &str, chain: &[ChainStep], flags: &[String]) -> Self {
        Self::new(
            Tool::Report,
            json!({"outcome": outcome, "summary": summary, "causal_chain": chain, "flags": flags}),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: Tool,
    pub args: Value,
    pub at_iteration: u32,
}

fn arg<'a>(args: &'a Value, key: &str) -> &'a str {
    args.get(key).and_then(Value::as_str).unwrap_or("")
}

impl ToolCall {
    pub fn new(tool: Tool, args: Value, at_iteration: u32) -> Self {
        Self { tool, args, at_iteration }
    }

    /// One-line human rendering, e.g. `exec_on_node[s797] df -h`.
    pub fn command_line(&self) -> String {
        let a = &self.args;
        match self.tool {
            Tool::EsApi | Tool::EsApiWrite => {
                let method = if arg(a, "method").is_empty() { "GET" } else { arg(a, "method") };
                format!("{} {}", method.to_ascii_uppercase(), arg(a, "path"))
            }
            Tool::ExecOnNode => format!("[{}] {}", arg(a, "host"), arg(a, "command")),
            Tool::ExecOnPod => format!("[{}] {}", arg(a, "pod"), arg(a, "command")),
            Tool::Kubectl => format!("kubectl {}", arg(a, "args")),
            Tool::Report => format!("report {}", arg(a, "outcome")),
        }
    }

    /// Calls that change cluster or host state.
    pub fn is_mutating(&self) -> bool {
        match self.tool {
            Tool::EsApiWrite => true,
            Tool::ExecOnNode | Tool::ExecOnPod => {
                normalize_command(arg(&self.args, "command")).split_whitespace().next() == Some("rm")
            }
            Tool::Kubectl => {
                let n = normalize_command(arg(&self.args, "args"));
                let verb = n.split_whitespace().find(|w| !w.starts_with('-'));
                matches!(verb, Some("delete" | "scale" | "patch" | "apply" | "drain" | "cordon"))
            }
            Tool::EsApi | Tool::Report => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Allowed,
    Denied { reason: String },
}

impl Verdict {
    pub fn is_allowed(&self) -> bool {
        matches!(self, Verdict::Allowed)
    }

    fn deny(reason: impl Into<String>) -> Self {
        Verdict::Denied { reason: reason.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub output: String,
    pub token_cost: u64,
    pub verdict: Verdict,
}

/// One investigation step, as written into the incident report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStep {
    pub tool: String,
    pub command: String,
    pub finding: String,
}

impl ChainStep {
    pub fn new(tool: &str, command: &str, finding: &str) -> Self {
        Self { tool: tool.into(), command: command.into(), finding: finding.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopOutcome {
    Resolved,
    Mitigated,
    NeedsEscalation,
    BudgetExhausted,
    NoAnomaly,
}

impl LoopOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopOutcome::Resolved => "resolved",
            LoopOutcome::Mitigated => "mitigated",
            LoopOutcome::NeedsEscalation => "needs_escalation",
            LoopOutcome::BudgetExhausted => "budget_exhausted",
            LoopOutcome::NoAnomaly => "no_anomaly",
        }
    }

    /// Memory outcome; `None` for runs that found nothing.
    pub fn memory_outcome(self) -> Option<MemoryOutcome> {
        match self {
            LoopOutcome::Resolved => Some(MemoryOutcome::Resolved),
            LoopOutcome::Mitigated => Some(MemoryOutcome::Mitigated),
            LoopOutcome::NeedsEscalation => Some(MemoryOutcome::Escalated),
            LoopOutcome::BudgetExhausted => Some(MemoryOutcome::BudgetExhausted),
            LoopOutcome::NoAnomaly => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopBudget {
    pub max_iterations: u32,
    pub max_tokens: u64,
    pub iterations_used: u32,
    pub tokens_used: u64,
}

impl Default for LoopBudget {
    fn default() -> Self {
        Self::new(20, 150_000)
    }
}

impl LoopBudget {
    pub fn new(max_iterations: u32, max_tokens: u64) -> Self {
        Self { max_iterations, max_tokens, iterations_used: 0, tokens_used: 0 }
    }

    pub fn exhausted(&self) -> bool {
        self.iterations_used >= self.max_iterations || self.tokens_used >= self.max_tokens
    }

    /// Adds `cost`, saturating at the cap.
    fn charge(&mut self, cost: u64) {
        self.tokens_used = self.tokens_used.saturating_add(cost).min(self.max_tokens);
    }
}

/// Synthetic token cost: a quarter of the bytes exchanged, rounded up.
pub fn token_cost(request_bytes: usize, response_bytes: usize) -> u64 {
    ((request_bytes + response_bytes) as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub iteration: u32,
    pub at_s: u64,
    pub tool: Tool,
    pub args: Value,
    pub verdict: Verdict,
    pub executed: bool,
    pub output_bytes: usize,
    /// First 512 bytes of the output.
    pub output_head: String,
    pub token_cost: u64,
}

/// One exchange as seen by the investigator.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryStep {
    pub call: ToolCall,
    pub result: ToolResult,
    /// Tool-level failure (e.g. unsupported command); the output holds its message.
    pub failed: bool,
}

/// Everything the investigator knows when a loop starts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoopContext {
    pub trigger: Vec<Alert>,
    pub forecasts: Vec<Forecast>,
    /// Resolved precedents from incident memory, best match first.
    pub precedents: Vec<IncidentRecord>,
    pub started_at_s: u64,
    pub max_iterations: u32,
}

/// Proposes the next call given the context and every prior exchange.
pub trait Investigator {
    fn propose(&mut self, ctx: &LoopContext, history: &[HistoryStep]) -> ProposedCall;
}

/// Executes allowed calls against the world.
pub trait Toolbox {
    /// Runs a non-report call. `Err` carries a tool-level failure message.
    fn execute(&mut self, call: &ToolCall) -> Result<String, String>;
    fn now(&self) -> u64;
    fn health(&self) -> Health;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopTotals {
    pub iterations: u32,
    pub tool_calls: u32,
    pub tokens: u64,
    pub duration_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentReport {
    pub trigger: Vec<Alert>,
    pub causal_chain: Vec<ChainStep>,
    pub actions: Vec<ToolCall>,
    pub outcome: LoopOutcome,
    pub summary: String,
    pub flags: Vec<String>,
    pub final_health: Health,
    pub totals: LoopTotals,
    pub opened_at_s: u64,
    pub closed_at_s: u64,
    pub audit: Vec<AuditEntry>,
}

fn parse_report(args: &Value, iteration: u32) -> Result<(LoopOutcome, String, Vec<ChainStep>, Vec<String>), HealError> {
    let protocol = |reason: String| HealError::Protocol { iteration, reason };
    let outcome: LoopOutcome = serde_json::from_value(args.get("outcome").cloned().unwrap_or(Value::Null))
        .map_err(|e| protocol(format!("report outcome: {e}")))?;
    let summary = args.get("summary").and_then(Value::as_str).unwrap_or("").to_string();
    let chain: Vec<ChainStep> = match args.get("causal_chain") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| protocol(format!("report causal_chain: {e}")))?,
    };
    let flags: Vec<String> = match args.get("flags") {
        None | Some(Value::Null) => Vec::new(),
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| protocol(format!("report flags: {e}")))?,
    };
    Ok((outcome, summary, chain, flags))
}

/// Runs propose → validate → execute until a report arrives or the budget ends.
pub fn run_loop(
    ctx: &LoopContext,
    investigator: &mut dyn Investigator,
    toolbox: &mut dyn Toolbox,
    mut budget: LoopBudget,
) -> Result<IncidentReport, HealError> {
    let mut ctx = ctx.clone();
    ctx.max_iterations = budget.max_iterations;
    let opened = toolbox.now();
    let mut history: Vec<HistoryStep> = Vec::new();
    let mut audit = Vec::new();
    let mut actions = Vec::new();
    let mut tool_calls = 0u32;

    while !budget.exhausted() {
        let proposal = investigator.propose(&ctx, &history);
        budget.iterations_used += 1;
        let iteration = budget.iterations_used;
        let tool = Tool::parse(&proposal.tool).ok_or_else(|| HealError::Protocol {
            iteration,
            reason: format!("unknown tool {:?}", proposal.tool),
        })?;
        let call = ToolCall::new(tool, proposal.args.clone(), iteration);
        let request_bytes = serde_json::to_vec(&proposal).expect("proposal serializes").len();
        let verdict = validate_command(tool, &call.args);
        let at_s = toolbox.now();

        if tool == Tool::Report && verdict.is_allowed() {
            let (outcome, summary, chain, flags) = parse_report(&call.args, iteration)?;
            let cost = token_cost(request_bytes, 0);
            budget.charge(cost);
            audit.push(AuditEntry {
                iteration,
                at_s,
                tool,
                args: call.args.clone(),
                verdict,
                executed: true,
                output_bytes: 0,
                output_head: String::new(),
                token_cost: cost,
            });
            let closed = toolbox.now();
            return Ok(IncidentReport {
                trigger: ctx.trigger.clone(),
                causal_chain: chain,
                actions,
                outcome,
                summary,
                flags,
                final_health: toolbox.health(),
                totals: LoopTotals {
                    iterations: budget.iterations_used,
                    tool_calls: tool_calls + 1,
                    tokens: budget.tokens_used,
                    duration_s: closed - opened,
                },
                opened_at_s: opened,
                closed_at_s: closed,
                audit,
            });
        }

        let (output, executed, failed) = if verdict.is_allowed() {
            tool_calls += 1;
            match toolbox.execute(&call) {
                Ok(out) => (out, true, false),
                Err(msg) => (msg, true, true),
            }
        } else {
            (String::new(), false, false)
        };
        if executed && !failed && call.is_mutating() {
            actions.push(call.clone());
        }
        let cost = token_cost(request_bytes, output.len());
        budget.charge(cost);
        let head_end = (0..=output.len().min(512)).rev().find(|&i| output.is_char_boundary(i)).unwrap_or(0);
        audit.push(AuditEntry {
            iteration,
            at_s,
            tool,
            args: call.args.clone(),
            verdict: verdict.clone(),
            executed,
            output_bytes: output.len(),
            output_head: output[..head_end].to_string(),
            token_cost: cost,
        });
        history.push(HistoryStep {
            call,
            result: ToolResult { output, token_cost: cost, verdict },
            failed,
        });
    }

    let closed = toolbox.now();
    let causal_chain = history
        .iter()
        .filter(|h| h.result.verdict.is_allowed())
        .map(|h| {
            let first = h.result.output.lines().next().unwrap_or("").to_string();
            ChainStep::new(h.call.tool.as_str(), &h.call.command_line(), &first)
        })
        .collect();
    Ok(IncidentReport {
        trigger: ctx.trigger.clone(),
        causal_chain,
        actions,
        outcome: LoopOutcome::BudgetExhausted,
        summary: format!(
            "budget exhausted after {} iterations and {} tokens",
            budget.iterations_used, budget.tokens_used
        ),
        flags: Vec::new(),
        final_health: toolbox.health(),
        totals: LoopTotals {
            iterations: budget.iterations_used,
            tool_calls,
            tokens: budget.tokens_used,
            duration_s: closed - opened,
        },
        opened_at_s: opened,
        closed_at_s: closed,
        audit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{ClusterSpec, SimOptions, Simulator};

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

    struct Rogue;

    impl Investigator for Rogue {
        fn propose(&mut self, _: &LoopContext, _: &[HistoryStep]) -> ProposedCall {
            ProposedCall { tool: "ssh".into(), args: json!({}) }
        }
    }

    struct Destroyer(u32);

    impl Investigator for Destroyer {
        fn propose(&mut self, ctx: &LoopContext, history: &[HistoryStep]) -> ProposedCall {
            self.0 += 1;
            if history.len() >= 3 {
                return ProposedCall::report(LoopOutcome::NeedsEscalation, "stop", &[], &[]);
            }
            let _ = ctx;
            match self.0 {
                1 => ProposedCall::node("s797", "rm -rf /"),
                2 => ProposedCall::kubectl("delete node s797"),
                _ => ProposedCall::es_write("DELETE", "/logs-*", None),
            }
        }
    }

    fn sim() -> Simulator {
        Simulator::new(ClusterSpec::default(), 9, SimOptions::default()).unwrap()
    }

    #[test]
    fn never_reporting_stops_at_twenty() {
        let mut s = sim();
        let mut tb = SimToolbox::new(&mut s, 5);
        let r = run_loop(&LoopContext::default(), &mut Never, &mut tb, LoopBudget::default()).unwrap();
        assert_eq!(r.outcome, LoopOutcome::BudgetExhausted);
        assert_eq!(r.totals.iterations, 20);
        assert_eq!(r.audit.len(), 20);
        assert!(r.totals.tokens < 150_000);
    }

    #[test]
    fn verbose_exhausts_tokens() {
        let mut s = sim();
        let mut tb = SimToolbox::new(&mut s, 5);
        let r = run_loop(&LoopContext::default(), &mut Verbose, &mut tb, LoopBudget::default()).unwrap();
        assert_eq!(r.outcome, LoopOutcome::BudgetExhausted);
        assert_eq!(r.totals.tokens, 150_000);
        assert!(r.totals.iterations < 20);
    }

    #[test]
    fn unknown_tool_is_protocol_error() {
        let mut s = sim();
        let mut tb = SimToolbox::new(&mut s, 5);
        let err = run_loop(&LoopContext::default(), &mut Rogue, &mut tb, LoopBudget::default()).unwrap_err();
        assert_eq!(err, HealError::Protocol { iteration: 1, reason: "unknown tool \"ssh\"".into() });
    }

    #[test]
    fn denied_calls_do_not_mutate() {
        let mut s = sim();
        let before = s.state().state_hash();
        let mut tb = SimToolbox::new(&mut s, 5);
        let r = run_loop(&LoopContext::default(), &mut Destroyer(0), &mut tb, LoopBudget::default()).unwrap();
        assert_eq!(r.outcome, LoopOutcome::NeedsEscalation);
        assert!(r.audit[..3].iter().all(|a| !a.verdict.is_allowed() && !a.executed));
        assert!(r.actions.is_empty());
        assert_eq!(s.state().state_hash(), before);
    }

    #[test]
    fn token_cost_rounds_up() {
        assert_eq!(token_cost(0, 0), 0);
        assert_eq!(token_cost(1, 0), 1);
        assert_eq!(token_cost(4, 4), 2);
        assert_eq!(token_cost(5, 4), 3);
    }

    #[test]
    fn mutating_classification() {
        let rm = ToolCall::new(Tool::ExecOnNode, json!({"host": "s797", "command": "rm -rf /mnt/x"}), 1);
        let df = ToolCall::new(Tool::ExecOnNode, json!({"host": "s797", "command": "df -h"}), 1);
        let del = ToolCall::new(Tool::Kubectl, json!({"args": "delete pod es-data-3"}), 1);
        let get = ToolCall::new(Tool::Kubectl, json!({"args": "get pods"}), 1);
        assert!(rm.is_mutating() && del.is_mutating());
        assert!(!df.is_mutating() && !get.is_mutating());
    }
}
