//! Voltage-level I/O channels and the 5 V coil relay that switches 24 V into
//! the PLC input module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::Micros;

pub const SUPPLY_24V: f64 = 24.0;
pub const LOGIC_5V: f64 = 5.0;
pub const DEFAULT_24V_THRESHOLD: f64 = 15.0;
pub const DEFAULT_5V_THRESHOLD: f64 = 2.5;
pub const DEFAULT_PULL_IN: f64 = 3.75;
pub const DEFAULT_SETTLE_US: Micros = 5_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElectricalError {
    #[error("logic threshold {threshold} V must lie in (0, {supply}) V")]
    Threshold { threshold: f64, supply: f64 },
}

/// A voltage on a channel together with the level at which it reads as 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelLevel {
    pub voltage: f64,
    logic_threshold: f64,
}

impl ChannelLevel {
    pub fn new(voltage: f64, logic_threshold: f64, supply: f64) -> Result<Self, ElectricalError> {
        if !(logic_threshold > 0.0 && logic_threshold < supply) {
            return Err(ElectricalError::Threshold {
                threshold: logic_threshold,
                supply,
            });
        }
        Ok(ChannelLevel {
            voltage,
            logic_threshold,
        })
    }

    /// A 24 VDC channel with the default threshold.
    pub fn plc_24v(voltage: f64) -> Self {
        ChannelLevel {
            voltage,
            logic_threshold: DEFAULT_24V_THRESHOLD,
        }
    }

    pub fn logic_5v(voltage: f64) -> Self {
        ChannelLevel {
            voltage,
            logic_threshold: DEFAULT_5V_THRESHOLD,
        }
    }

    pub fn logic_threshold(&self) -> f64 {
        self.logic_threshold
    }

    pub fn with_voltage(self, voltage: f64) -> Self {
        ChannelLevel { voltage, ..self }
    }
}

/// 1 iff the voltage reaches the threshold (inclusive).
pub fn sample_input_channel(level: &ChannelLevel) -> bool {
    level.voltage >= level.logic_threshold
}

/// PLC output drive: 24 V for 1, 0 V for 0.
pub fn drive_output_channel(bit: bool) -> ChannelLevel {
    ChannelLevel::plc_24v(if bit { SUPPLY_24V } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Contact {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelayConfig {
    pub pull_in_threshold: f64,
    pub settle_time: Micros,
}

impl Default for RelayConfig {
    fn default() -> Self {
        RelayConfig {
            pull_in_threshold: DEFAULT_PULL_IN,
            settle_time: DEFAULT_SETTLE_US,
        }
    }
}

/// A contact transition waiting for the settle time to run out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PendingSettle {
    pub target: Contact,
    pub due: Micros,
}

/// What the caller must do with its scheduled settle event after a coil
/// change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SettleAction {
    None,
    /// Schedule a relay-settle event at `at`.
    Schedule {
        at: Micros,
    },
    /// Cancel the outstanding relay-settle event.
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Relay {
    config: RelayConfig,
    coil_voltage: f64,
    contact: Contact,
    pending: Option<PendingSettle>,
}

impl Relay {
    pub fn new(config: RelayConfig) -> Self {
        Relay {
            config,
            coil_voltage: 0.0,
            contact: Contact::Open,
            pending: None,
        }
    }

    pub fn contact(&self) -> Contact {
        self.contact
    }

    pub fn is_closed(&self) -> bool {
        self.contact == Contact::Closed
    }

    pub fn coil_voltage(&self) -> f64 {
        self.coil_voltage
    }

    pub fn pending(&self) -> Option<PendingSettle> {
        self.pending
    }

    pub fn config(&self) -> RelayConfig {
        self.config
    }

    fn target_for(&self, coil_voltage: f64) -> Contact {
        if coil_voltage >= self.config.pull_in_threshold {
            Contact::Closed
        } else {
            Contact::Open
        }
    }

    /// Applies a coil voltage at `now`.
    ///
    /// Crossing the pull-in threshold starts a settle timer; returning to the
    /// side that matches the current contact before it expires cancels it. A
    /// change that stays on the same side of the threshold leaves a running
    /// timer alone.
    pub fn step(&mut self, coil_voltage: f64, now: Micros) -> SettleAction {
        self.coil_voltage = coil_voltage;
        let target = self.target_for(coil_voltage);
        if target == self.contact {
            return match self.pending.take() {
                Some(_) => SettleAction::Cancel,
                None => SettleAction::None,
            };
        }
        match self.pending {
            Some(p) if p.target == target => SettleAction::None,
            _ => {
                let due = now + self.config.settle_time;
                self.pending = Some(PendingSettle { target, due });
                SettleAction::Schedule { at: due }
            }
        }
    }

    /// Completes a pending transition whose settle time has elapsed.
    /// Returns true when the contact changed.
    pub fn settle(&mut self, now: Micros) -> bool {
        match self.pending {
            Some(p) if p.due <= now => {
                self.pending = None;
                let changed = self.contact != p.target;
                self.contact = p.target;
                changed
            }
            _ => false,
        }
    }

    /// Voltage the contact passes through from a `supply` rail.
    pub fn switched_voltage(&self, supply: f64) -> f64 {
        match self.contact {
            Contact::Closed => supply,
            Contact::Open => 0.0,
        }
    }
}

impl Default for Relay {
    fn default() -> Self {
        Relay::new(RelayConfig::default())
    }
}

/// Functional form of [`Relay::step`].
pub fn relay_step(relay: &Relay, coil_voltage: f64, now: Micros) -> (Relay, SettleAction) {
    let mut next = *relay;
    let action = next.step(coil_voltage, now);
    (next, action)
}
