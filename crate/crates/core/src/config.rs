//! Scenario configuration: track layout, perception and certificate models,
//! controller parameters, and run limits. Configs are plain JSON; every field
//! has a default so partial files stay valid.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::certcontrol::{CertMode, CertModel};
use crate::controller::KnownMap;
use crate::perception::{ConfusionModel, DetectionClass};
use crate::signvision::CvParams;
use crate::worldmodel::{Aspect, Derailer, Signal};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config is invalid: {0}")]
    Invalid(String),
}

/// Which perception channel feeds detections into the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptionMode {
    /// Sample detections from the confusion matrix.
    Confusion,
    /// Render a sign image and run the weak image classifier on it.
    Cv,
    /// Query a perception service over TCP.
    External,
    /// Replay a fixed list of detection classes.
    Script,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub mode: PerceptionMode,
    pub confusion: ConfusionModel,
    pub cv: CvParams,
    /// host:port of the external perception service.
    pub endpoint: String,
    pub script: Vec<DetectionClass>,
    pub timeout_ms: u64,
}

impl Default for PerceptionConfig {
    fn default() -> PerceptionConfig {
        PerceptionConfig {
            mode: PerceptionMode::Confusion,
            confusion: ConfusionModel([
                [0.90, 0.08, 0.02],
                [0.10, 0.89, 0.01],
                [0.10, 0.05, 0.85],
            ]),
            cv: CvParams::default(),
            endpoint: "127.0.0.1:9090".to_string(),
            script: Vec::new(),
            timeout_ms: 5000,
        }
    }
}

/// Full description of one scenario. Field order is fixed; `config_hash`
/// digests the canonical JSON rendering in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub route_length: u32,
    pub signals: Vec<Signal>,
    pub derailers: Vec<Derailer>,
    pub obstacles: Vec<u32>,
    pub known_map: KnownMap,
    /// How far ahead a signal can be seen.
    pub visibility: u32,
    /// Fixed offset at which detections are reported in front of the train.
    pub d_fix: u32,
    /// Per-step probability that the environment moves instead of the train.
    pub p_env: f64,
    pub shield: bool,
    pub cert: CertMode,
    pub cert_model: CertModel,
    pub perception: PerceptionConfig,
    /// Consecutive no-progress steps before the run counts as halted.
    pub halt_patience: u32,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> ScenarioConfig {
        ScenarioConfig::default_scenario()
    }
}

impl ScenarioConfig {
    /// The standard route: four stop signals, one derailer, noisy perception.
    pub fn default_scenario() -> ScenarioConfig {
        let signals = vec![
            Signal {
                id: 0,
                position: 60,
                aspect: Aspect::Stop,
            },
            Signal {
                id: 1,
                position: 120,
                aspect: Aspect::Stop,
            },
            Signal {
                id: 2,
                position: 180,
                aspect: Aspect::Stop,
            },
            Signal {
                id: 3,
                position: 240,
                aspect: Aspect::Stop,
            },
        ];
        let known_map = KnownMap::from_signals(&signals, 5);
        ScenarioConfig {
            route_length: 250,
            signals,
            derailers: vec![Derailer {
                id: 0,
                position: 200,
                active: false,
            }],
            obstacles: Vec::new(),
            known_map,
            visibility: 10,
            d_fix: 5,
            p_env: 0.25,
            shield: true,
            cert: CertMode::On,
            cert_model: CertModel::default(),
            perception: PerceptionConfig::default(),
            halt_patience: 50,
            max_steps: 10_000,
            seed: 1,
        }
    }

    /// A short route small enough for exhaustive state exploration.
    pub fn small_preset() -> ScenarioConfig {
        let signals = vec![
            Signal {
                id: 0,
                position: 15,
                aspect: Aspect::Stop,
            },
            Signal {
                id: 1,
                position: 30,
                aspect: Aspect::Stop,
            },
        ];
        let known_map = KnownMap::from_signals(&signals, 5);
        let mut perception = PerceptionConfig::default();
        perception.confusion = ConfusionModel::identity();
        ScenarioConfig {
            route_length: 40,
            signals,
            derailers: vec![Derailer {
                id: 0,
                position: 22,
                active: false,
            }],
            obstacles: Vec::new(),
            known_map,
            visibility: 10,
            d_fix: 5,
            p_env: 0.25,
            shield: true,
            cert: CertMode::Off,
            cert_model: CertModel::default(),
            perception,
            halt_patience: 10,
            max_steps: 1000,
            seed: 1,
        }
    }

    pub fn from_json(text: &str) -> Result<ScenarioConfig, ConfigError> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.route_length == 0 {
            return fail("route_length must be at least 1".into());
        }
        if self.visibility == 0 {
            return fail("visibility must be at least 1".into());
        }
        if self.d_fix == 0 {
            return fail("d_fix must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_env) {
            return fail(format!("p_env must lie in [0, 1], got {}", self.p_env));
        }
        if self.halt_patience == 0 {
            return fail("halt_patience must be at least 1".into());
        }
        if self.max_steps == 0 {
            return fail("max_steps must be at least 1".into());
        }

        let mut seen_positions = std::collections::BTreeSet::new();
        let mut seen_ids = std::collections::BTreeSet::new();
        for s in &self.signals {
            if s.position == 0 || s.position > self.route_length {
                return fail(format!(
                    "signal {} at {} lies outside the route (1..={})",
                    s.id, s.position, self.route_length
                ));
            }
            if !seen_ids.insert(s.id) {
                return fail(format!("duplicate signal id {}", s.id));
            }
            if !seen_positions.insert(s.position) {
                return fail(format!("two signals share position {}", s.position));
            }
        }
        let mut seen_ids = std::collections::BTreeSet::new();
        for d in &self.derailers {
            if d.position == 0 || d.position > self.route_length {
                return fail(format!(
                    "derailer {} at {} lies outside the route (1..={})",
                    d.id, d.position, self.route_length
                ));
            }
            if !seen_ids.insert(d.id) {
                return fail(format!("duplicate derailer id {}", d.id));
            }
        }
        for &q in &self.obstacles {
            if q == 0 || q > self.route_length {
                return fail(format!(
                    "obstacle at {q} lies outside the route (1..={})",
                    self.route_length
                ));
            }
        }
        for p in &self.known_map.positions {
            if p.position == 0 || p.position > self.route_length {
                return fail(format!(
                    "mapped signal {} at {} lies outside the route",
                    p.id, p.position
                ));
            }
        }

        self.perception
            .confusion
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.cert_model.validate().map_err(ConfigError::Invalid)?;
        if self.perception.mode == PerceptionMode::External && self.perception.endpoint.is_empty() {
            return fail("external perception requires an endpoint".into());
        }
        if self.perception.timeout_ms == 0 {
            return fail("timeout_ms must be at least 1".into());
        }
        self.perception.cv.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON rendering. Ties traces to the exact
    /// configuration that produced them.
    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }
}
