//! Run configuration: one TOML file plus `key=value` overrides.
//!
//! ```toml
//! seed = 7
//!
//! [scenario]
//! name = "router_misconfig"
//! affected_fraction = 0.1
//!
//! [controller]
//! tau = 0.8
//! ```
//!
//! Every section is optional and falls back to the module defaults, so a
//! config holding just a seed and a scenario name reproduces the desk-scale
//! runs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::controller::ControllerConfig;
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::mitigation::MitigationConfig;
use crate::sim::{PhaseSpec, Role, ScenarioKind, ScenarioSpec, TrafficModelParams};
use crate::trace::Micros;

/// Scenario fields left unset take the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: ScenarioKind,
    pub vm_count: Option<u32>,
    pub agent_count: Option<u32>,
    pub window_length_us: Option<Micros>,
    pub total_windows: Option<u64>,
    pub affected_fraction: Option<f64>,
    pub onset_window: Option<u64>,
    pub link_group_size: Option<u32>,
    pub primary_share: Option<f64>,
    pub primary_role: Option<Role>,
    pub secondary_role: Option<Role>,
    pub state_reset_fraction: Option<f64>,
    pub phases: Option<Vec<PhaseSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSettings {
    pub idle_timeout_us: Micros,
    pub reorder_tolerance_us: Micros,
}

impl Default for FlowSettings {
    fn default() -> Self {
        let d = FlowConfig::default();
        FlowSettings {
            idle_timeout_us: d.idle_timeout_us,
            reorder_tolerance_us: d.reorder_tolerance_us,
        }
    }
}

impl FlowSettings {
    pub fn flow_config(&self, window_length_us: Micros) -> FlowConfig {
        FlowConfig {
            window_length_us,
            idle_timeout_us: self.idle_timeout_us,
            reorder_tolerance_us: self.reorder_tolerance_us,
        }
    }
}

/// Detector-side settings, shared by detect and run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub flow: FlowSettings,
    pub agent: AgentConfig,
    pub controller: ControllerConfig,
    pub mitigation: MitigationConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub scenario: ScenarioConfig,
    pub traffic: TrafficModelParams,
    pub flow: FlowSettings,
    pub agent: AgentConfig,
    pub controller: ControllerConfig,
    pub mitigation: MitigationConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies one `dotted.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string (`scenario.name=dns_misconfig`).
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a setting")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            node = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override `{key}`: {e}")))?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::param("seed", "a seed is required (no wall-clock seeding)"))
    }

    pub fn scenario_spec(&self) -> Result<ScenarioSpec> {
        let c = &self.scenario;
        let mut s = ScenarioSpec::preset(c.name, self.seed()?);
        if let Some(v) = c.vm_count {
            s.vm_count = v;
        }
        if let Some(v) = c.agent_count {
            s.agent_count = v;
        }
        if let Some(v) = c.window_length_us {
            s.window_length_us = v;
        }
        if let Some(v) = c.total_windows {
            s.total_windows = v;
        }
        if let Some(v) = c.affected_fraction {
            s.affected_fraction = v;
        }
        if let Some(v) = c.onset_window {
            s.onset_window = v;
        }
        if let Some(v) = c.link_group_size {
            s.link_group_size = v;
        }
        if let Some(v) = c.primary_share {
            s.primary_share = v;
        }
        if let Some(v) = c.primary_role {
            s.primary_role = v;
        }
        if let Some(v) = c.secondary_role {
            s.secondary_role = v;
        }
        if let Some(v) = c.state_reset_fraction {
            s.state_reset_fraction = v;
        }
        if let Some(v) = &c.phases {
            s.phases = v.clone();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            flow: self.flow.clone(),
            agent: self.agent.clone(),
            controller: self.controller.clone(),
            mitigation: self.mitigation.clone(),
        }
    }

    /// Checks everything a simulate or run invocation needs.
    pub fn validate(&self) -> Result<()> {
        self.scenario_spec()?;
        self.traffic.validate()?;
        self.validate_detector()
    }

    /// Checks what a detect invocation needs; the scenario is not used.
    pub fn validate_detector(&self) -> Result<()> {
        self.seed()?;
        self.agent.validate()?;
        self.controller.validate()?;
        self.mitigation.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_needs_seed() {
        let c = RunConfig::from_toml("").unwrap();
        assert!(matches!(c.seed(), Err(Error::InvalidParameter { field: "seed", .. })));
        assert!(c.validate().is_err());
    }

    #[test]
    fn sections_fill_defaults() {
        let c = RunConfig::from_toml(
            "seed = 3\n[scenario]\nname = \"dns_misconfig\"\ntotal_windows = 12\n[controller]\ntau = 0.7\n",
        )
        .unwrap();
        let s = c.scenario_spec().unwrap();
        assert_eq!(s.name, ScenarioKind::DnsMisconfig);
        assert_eq!(s.total_windows, 12);
        assert_eq!(s.vm_count, 200);
        assert_eq!(c.controller.tau, 0.7);
        assert_eq!(c.controller.min_anomaly_size, 3);
        assert_eq!(c.agent.kappa, 10.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::from_toml("[scenario]\nvms = 2\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.set("seed=9").unwrap();
        c.set("scenario.name=lb_misconfig").unwrap();
        c.set("scenario.affected_fraction = 0.2").unwrap();
        c.set("mitigation.rho=0.25").unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.scenario.name, ScenarioKind::LbMisconfig);
        assert_eq!(c.scenario.affected_fraction, Some(0.2));
        assert_eq!(c.mitigation.rho, 0.25);
        assert!(c.set("controller.tau=high").is_err());
        assert!(c.set("nonsense").is_err());
    }

    #[test]
    fn invalid_fraction_names_field() {
        let mut c = RunConfig::default();
        c.set("seed=1").unwrap();
        c.set("scenario.affected_fraction=1.5").unwrap();
        match c.validate() {
            Err(e @ Error::InvalidParameter { .. }) => assert!(e.to_string().contains("affected_fraction")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.set("seed=4").unwrap();
        c.set("scenario.name=router_misconfig").unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back.seed, Some(4));
        assert_eq!(back.scenario, c.scenario);
    }
}
