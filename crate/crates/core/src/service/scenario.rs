//! Scenario files: TOML with a fixed set of keys. Unknown keys are errors.
//!
//! ```toml
//! seed = 1
//! duration = 2_000_000
//! program = """
//! LD X0
//! OUT Y1
//! """
//!
//! [network]
//! name = "Bluetooth"
//!
//! [channel]
//! loss = 0.0
//! jitter_us = 0
//!
//! [[stimuli]]
//! time = 0
//! switch = 0
//! state = "on"
//!
//! [expect]
//! output_image = 0b000010
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::{BridgeConfig, EndToEnd, Stimulus, SystemConfig};
use crate::btlink::ChannelModel;
use crate::electrical::RelayConfig;
use crate::ladder::{parse_program, LadderProgram, Warning, INPUT_COUNT};
use crate::netmodels::{network_spec, Network, NetworkSpec};
use crate::simkernel::Micros;

/// Scenario shipped with the binary: the switch -> Y1 demonstration.
pub const DEMO_SCENARIO: &str = include_str!("../../scenarios/demo_switch_y1.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
}

impl ScenarioError {
    fn invalid(field: impl Into<String>, message: impl ToString) -> Self {
        ScenarioError::Invalid {
            field: field.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSelector {
    pub name: String,
    pub segment_length: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub jitter_us: Micros,
}

/// Per-run overrides of the built-in timing and threshold defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub scan_period_us: Option<Micros>,
    pub report_period_us: Option<Micros>,
    pub debounce_us: Option<Micros>,
    pub relay_pull_in_v: Option<f64>,
    pub relay_settle_us: Option<Micros>,
    pub input_threshold_v: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchState {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulusEntry {
    pub time: Micros,
    pub switch: u8,
    pub state: SwitchState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    pub output_image: Option<u8>,
    pub input_image: Option<u8>,
}

/// Raw scenario as written in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub program: String,
    pub network: NetworkSelector,
    #[serde(default = "ChannelSection::lossless")]
    pub channel: ChannelSection,
    #[serde(default)]
    pub overrides: Overrides,
    #[serde(default)]
    pub stimuli: Vec<StimulusEntry>,
    pub duration: Micros,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub expect: Option<Expectations>,
}

impl ChannelSection {
    fn lossless() -> Self {
        ChannelSection {
            loss: 0.0,
            jitter_us: 0,
        }
    }
}

/// A scenario that passed validation.
#[derive(Debug, Clone)]
pub struct ValidScenario {
    pub run: EndToEnd,
    pub expect: Option<Expectations>,
    pub warnings: Vec<Warning>,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        toml::from_str(text).map_err(|e| ScenarioError::Syntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Scenario::parse(&text)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, ScenarioError> {
        let name: Network = self
            .network
            .name
            .parse()
            .map_err(|e| ScenarioError::invalid("network.name", e))?;
        network_spec(name, self.network.segment_length)
            .map_err(|e| ScenarioError::invalid("network.segment_length", e))
    }

    pub fn program(&self) -> Result<LadderProgram, ScenarioError> {
        parse_program(&self.program).map_err(|e| ScenarioError::invalid("program", e))
    }

    pub fn system_config(&self) -> Result<SystemConfig, ScenarioError> {
        let defaults = BridgeConfig::default();
        let o = &self.overrides;
        let bridge = BridgeConfig {
            scan_period_us: o.scan_period_us.unwrap_or(defaults.scan_period_us),
            report_period_us: o.report_period_us.unwrap_or(defaults.report_period_us),
            debounce_us: o.debounce_us.unwrap_or(defaults.debounce_us),
            relay: RelayConfig {
                pull_in_threshold: o
                    .relay_pull_in_v
                    .unwrap_or(defaults.relay.pull_in_threshold),
                settle_time: o.relay_settle_us.unwrap_or(defaults.relay.settle_time),
            },
            input_threshold_v: o.input_threshold_v.unwrap_or(defaults.input_threshold_v),
        };
        bridge
            .validate()
            .map_err(|e| ScenarioError::invalid("overrides", e))?;
        let loss = self.channel.loss;
        if !(0.0..=1.0).contains(&loss) {
            return Err(ScenarioError::invalid(
                "channel.loss",
                format!("{loss} is outside [0, 1]"),
            ));
        }
        Ok(SystemConfig {
            bridge,
            channel: ChannelModel {
                network: self.network_spec()?,
                loss,
                jitter_us: self.channel.jitter_us,
            },
        })
    }

    pub fn validate(&self) -> Result<ValidScenario, ScenarioError> {
        let program = self.program()?;
        let config = self.system_config()?;
        let mut stimuli = Vec::with_capacity(self.stimuli.len());
        for (i, s) in self.stimuli.iter().enumerate() {
            if s.switch >= INPUT_COUNT {
                return Err(ScenarioError::invalid(
                    format!("stimuli[{i}].switch"),
                    format!("{} is out of range 0..{INPUT_COUNT}", s.switch),
                ));
            }
            if s.time > self.duration {
                return Err(ScenarioError::invalid(
                    format!("stimuli[{i}].time"),
                    format!("{} exceeds duration {}", s.time, self.duration),
                ));
            }
            stimuli.push(Stimulus {
                time: s.time,
                switch: s.switch,
                on: s.state == SwitchState::On,
            });
        }
        if let Some(Expectations {
            output_image: Some(out),
            ..
        }) = &self.expect
        {
            if *out >= 1 << 6 {
                return Err(ScenarioError::invalid(
                    "expect.output_image",
                    format!("{out:#b} has bits beyond Y5"),
                ));
            }
        }
        let warnings = program.warnings().to_vec();
        Ok(ValidScenario {
            run: EndToEnd {
                config,
                program,
                stimuli,
                duration: self.duration,
                seed: self.seed,
            },
            expect: self.expect.clone(),
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_scenario_is_valid() {
        let scenario = Scenario::parse(DEMO_SCENARIO).unwrap();
        let valid = scenario.validate().unwrap();
        assert_eq!(valid.run.program.to_source(), "LD X0\nOUT Y1");
        assert_eq!(valid.run.config.channel.loss, 0.0);
        assert_eq!(valid.run.config.channel.network.name, Network::Bluetooth);
        assert_eq!(valid.expect.unwrap().output_image, Some(0b10));
        assert_eq!(valid.run.stimuli.len(), 3);
    }

    fn with(extra: &str) -> String {
        format!("program = \"LD X0\\nOUT Y1\"\nduration = 1000\n{extra}")
    }

    fn field_of(err: ScenarioError) -> String {
        match err {
            ScenarioError::Invalid { field, .. } => field,
            other => panic!("expected a field error, got {other}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Scenario::parse(&with(
            "[network]\nname = \"Bluetooth\"\n[overrides]\nrelay_setle_us = 3",
        ))
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("relay_setle_us"), "{msg}");
        assert!(msg.contains("line"), "{msg}");
    }

    #[test]
    fn field_diagnostics() {
        let cases = [
            ("[network]\nname = \"Token Ring\"", "network.name"),
            ("[network]\nname = \"ZigBee\"\nsegment_length = 50", "network.segment_length"),
            ("[network]\nname = \"Profibus\"", "network.segment_length"),
            ("[network]\nname = \"Bluetooth\"\n[channel]\nloss = 1.5", "channel.loss"),
            ("[network]\nname = \"Bluetooth\"\n[overrides]\nscan_period_us = 0", "overrides"),
            ("[network]\nname = \"Bluetooth\"\n[overrides]\ninput_threshold_v = 30.0", "overrides"),
            ("[network]\nname = \"Bluetooth\"\n[[stimuli]]\ntime = 5\nswitch = 8\nstate = \"on\"", "stimuli[0].switch"),
            ("[network]\nname = \"Bluetooth\"\n[[stimuli]]\ntime = 5000\nswitch = 1\nstate = \"on\"", "stimuli[0].time"),
            ("[network]\nname = \"Bluetooth\"\n[expect]\noutput_image = 0b1000000", "expect.output_image"),
        ];
        for (extra, field) in cases {
            let scenario = Scenario::parse(&with(extra)).unwrap();
            assert_eq!(field_of(scenario.validate().unwrap_err()), field, "{extra}");
        }
        let bad_program =
            "program = \"LD X0\\nOUT X1\"\nduration = 1\n[network]\nname = \"Bluetooth\"";
        let err = Scenario::parse(bad_program)
            .unwrap()
            .validate()
            .unwrap_err();
        assert_eq!(
            err.to_string(),
            "program: line 2: OUT cannot target input X1"
        );
    }

    #[test]
    fn bad_state_word() {
        let err = Scenario::parse(&with(
            "[network]\nname = \"Bluetooth\"\n[[stimuli]]\ntime = 5\nswitch = 1\nstate = \"high\"",
        ))
        .unwrap_err();
        assert!(err.to_string().contains("high"));
    }

    #[test]
    fn overrides_apply() {
        let scenario = Scenario::parse(&with(
            "[network]\nname = \"Profibus\"\nsegment_length = 600\n[overrides]\ndebounce_us = 0\nrelay_settle_us = 2000\n[channel]\nloss = 0.25\njitter_us = 7",
        ))
        .unwrap();
        let config = scenario.system_config().unwrap();
        assert_eq!(config.bridge.debounce_us, 0);
        assert_eq!(config.bridge.relay.settle_time, 2000);
        assert_eq!(config.bridge.scan_period_us, 10_000);
        assert_eq!(config.channel.network.data_rate_bps, 182_500);
        assert_eq!((config.channel.loss, config.channel.jitter_us), (0.25, 7));
    }
}
