use serde_json::Value;

use super::{ToolCall, Toolbox, Tool};
use crate::sim::{Health, SimEvent, Simulator};

fn arg<'a>(call: &'a ToolCall, key: &str) -> &'a str {
    call.args.get(key).and_then(Value::as_str).unwrap_or("")
}

/// Runs one non-report call against the simulator without advancing time.
pub fn dispatch_call(sim: &mut Simulator, call: &ToolCall) -> Result<String, String> {
    let res = match call.tool {
        Tool::EsApi | Tool::EsApiWrite => {
            let method = match arg(call, "method") {
                "" => "GET",
                m => m,
            };
            sim.exec_es_api(method, arg(call, "path"), call.args.get("body")).map(|r| {
                if r.status == 200 {
                    r.render()
                } else {
                    format!("HTTP {}\n{}", r.status, r.render())
                }
            })
        }
        Tool::ExecOnNode => sim.exec_host_command(arg(call, "host"), arg(call, "command")),
        Tool::ExecOnPod => sim.exec_pod_command(arg(call, "pod"), arg(call, "command")),
        Tool::Kubectl => sim.exec_kubectl(arg(call, "args")),
        Tool::Report => return Err("report is not executable".into()),
    };
    res.map_err(|e| format!("error: {e}"))
}

/// Toolbox over a bare simulator; each executed call is followed by
/// `settle_s` seconds of simulated time.
pub struct SimToolbox<'a> {
    sim: &'a mut Simulator,
    settle_s: u64,
    events: Vec<SimEvent>,
}

impl<'a> SimToolbox<'a> {
    pub fn new(sim: &'a mut Simulator, settle_s: u64) -> Self {
        Self { sim, settle_s, events: Vec::new() }
    }

    pub fn events(&self) -> &[SimEvent] {
        &self.events
    }
}

impl Toolbox for SimToolbox<'_> {
    fn execute(&mut self, call: &ToolCall) -> Result<String, String> {
        let out = dispatch_call(self.sim, call);
        if self.settle_s > 0 {
            let evs = self.sim.tick(self.settle_s).map_err(|e| format!("error: {e}"))?;
            self.events.extend(evs);
        }
        out
    }

    fn now(&self) -> u64 {
        self.sim.now()
    }

    fn health(&self) -> Health {
        self.sim.health()
    }
}
