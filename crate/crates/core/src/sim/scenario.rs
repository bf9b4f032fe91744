use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClusterSpec, FaultSpec, SimError, SimOptions, Simulator};

/// A replayable scenario: cluster shape, seed, scripted faults and run length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_s: u64,
    #[serde(default)]
    pub cluster_spec: ClusterSpec,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

const BUILTIN: [(&str, &str); 4] = [
    ("outage18h", include_str!("../../scenarios/outage18h.json")),
    ("disk_fill", include_str!("../../scenarios/disk_fill.json")),
    ("nic_degradation", include_str!("../../scenarios/nic_degradation.json")),
    ("healthy", include_str!("../../scenarios/healthy.json")),
];

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Config(format!("scenario: {e}")))
    }

    /// Names of the scenarios compiled into the library.
    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Option<Self> {
        let name = name.trim_end_matches(".json");
        BUILTIN
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("bundled scenario parses"))
    }

    /// Loads a scenario from a file, falling back to a bundled scenario of the same name.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_json(&text),
            Err(e) => {
                let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                Self::builtin(stem).ok_or_else(|| SimError::Config(format!("{}: {e}", path.display())))
            }
        }
    }

    /// Builds the simulator with every fault registered.
    pub fn instantiate(&self, seed: u64, options: SimOptions) -> Result<Simulator, SimError> {
        let mut sim = Simulator::new(self.cluster_spec.clone(), seed, options)?;
        for f in &self.faults {
            sim.inject_fault(f.clone())?;
        }
        Ok(sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse_and_build() {
        for name in Scenario::builtin_names() {
            let sc = Scenario::builtin(name).unwrap();
            assert_eq!(sc.name, name);
            sc.instantiate(sc.seed, SimOptions::default()).unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let sc = Scenario::builtin("outage18h").unwrap();
        let text = serde_json::to_string(&sc).unwrap();
        assert_eq!(Scenario::from_json(&text).unwrap(), sc);
    }

    #[test]
    fn missing_file_falls_back_to_builtin() {
        let sc = Scenario::load(Path::new("does/not/exist/outage18h.json")).unwrap();
        assert_eq!(sc.name, "outage18h");
        assert!(Scenario::load(Path::new("nowhere.json")).is_err());
    }
}
