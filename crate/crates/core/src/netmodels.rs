//! Fieldbus and wireless network reference data plus serialization-delay
//! arithmetic.
//!
//! Rates are stored as integer bits per second so that every delay is an
//! exact rational and rounds reproducibly to whole microseconds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Network {
    Profibus,
    DeviceNet,
    ZigBee,
    Bluetooth,
    WiFi,
}

impl Network {
    pub const ALL: [Network; 5] = [
        Network::Profibus,
        Network::DeviceNet,
        Network::ZigBee,
        Network::Bluetooth,
        Network::WiFi,
    ];

    /// Name as printed in the reference table.
    pub fn label(self) -> &'static str {
        match self {
            Network::Profibus => "Profibus",
            Network::DeviceNet => "DeviceNet",
            Network::ZigBee => "ZigBee",
            Network::Bluetooth => "Bluetooth",
            Network::WiFi => "Wi-Fi",
        }
    }

    pub fn is_wired(self) -> bool {
        matches!(self, Network::Profibus | Network::DeviceNet)
    }

    fn has_multiple_rows(self) -> bool {
        TABLE.iter().filter(|row| row.name == self).count() > 1
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Network {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .flat_map(char::to_lowercase)
            .collect();
        match folded.as_str() {
            "profibus" => Ok(Network::Profibus),
            "devicenet" => Ok(Network::DeviceNet),
            "zigbee" => Ok(Network::ZigBee),
            "bluetooth" => Ok(Network::Bluetooth),
            "wifi" => Ok(Network::WiFi),
            _ => Err(NetError::UnknownNetwork(s.to_string())),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("unknown network `{0}`")]
    UnknownNetwork(String),
    #[error("{network} has no row with segment length {segment_m} m")]
    UnknownSegment { network: Network, segment_m: u32 },
    #[error("{0} has several segment lengths; one must be given")]
    SegmentRequired(Network),
    #[error("{0} has a single row; a segment length must not be given")]
    SegmentNotAllowed(Network),
}

/// One row of the reference network table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct NetworkSpec {
    pub name: Network,
    pub wired: bool,
    pub segment_length_m: u32,
    pub data_rate_bps: u64,
    pub max_nodes: u32,
}

impl NetworkSpec {
    const fn row(
        name: Network,
        wired: bool,
        segment_length_m: u32,
        data_rate_bps: u64,
        max_nodes: u32,
    ) -> Self {
        NetworkSpec {
            name,
            wired,
            segment_length_m,
            data_rate_bps,
            max_nodes,
        }
    }

    /// Rate in kbps, formatted without trailing zeros (`93.75`, `1000`).
    pub fn rate_kbps_display(&self) -> String {
        let whole = self.data_rate_bps / 1000;
        let frac = self.data_rate_bps % 1000;
        if frac == 0 {
            whole.to_string()
        } else {
            let digits = format!("{frac:03}");
            format!("{whole}.{}", digits.trim_end_matches('0'))
        }
    }

    pub fn data_rate_kbps(&self) -> f64 {
        self.data_rate_bps as f64 / 1000.0
    }

    /// `name,segment_m,rate_kbps,max_nodes`
    pub fn table_line(&self) -> String {
        format!(
            "{},{},{},{}",
            self.name.label(),
            self.segment_length_m,
            self.rate_kbps_display(),
            self.max_nodes
        )
    }
}

pub static TABLE: [NetworkSpec; 9] = [
    NetworkSpec::row(Network::Profibus, true, 1200, 93_750, 32),
    NetworkSpec::row(Network::Profibus, true, 600, 182_500, 32),
    NetworkSpec::row(Network::Profibus, true, 200, 500_000, 32),
    NetworkSpec::row(Network::DeviceNet, true, 500, 125_000, 64),
    NetworkSpec::row(Network::DeviceNet, true, 250, 250_000, 64),
    NetworkSpec::row(Network::DeviceNet, true, 100, 500_000, 64),
    NetworkSpec::row(Network::ZigBee, false, 100, 250_000, 260),
    NetworkSpec::row(Network::Bluetooth, false, 10, 1_000_000, 10),
    NetworkSpec::row(Network::WiFi, false, 50, 5_500_000, 40),
];

/// Looks up a table row. Multi-row networks need a segment length;
/// single-row networks reject one.
pub fn network_spec(name: Network, segment_length_m: Option<u32>) -> Result<NetworkSpec, NetError> {
    match (name.has_multiple_rows(), segment_length_m) {
        (true, None) => Err(NetError::SegmentRequired(name)),
        (false, Some(_)) => Err(NetError::SegmentNotAllowed(name)),
        (_, seg) => TABLE
            .iter()
            .find(|row| row.name == name && seg.is_none_or(|s| row.segment_length_m == s))
            .copied()
            .ok_or(NetError::UnknownSegment {
                network: name,
                segment_m: seg.unwrap_or_default(),
            }),
    }
}

/// Serialization delay of `payload_bits` at the row's rate, rounded half-up
/// to whole microseconds.
pub fn tx_delay(spec: &NetworkSpec, payload_bits: u64) -> Micros {
    let num = u128::from(payload_bits) * 1_000_000;
    let den = u128::from(spec.data_rate_bps);
    ((2 * num + den) / (2 * den)) as Micros
}

pub fn process_scan_time(
    spec: &NetworkSpec,
    signals_per_scan: u64,
    bits_per_signal: u64,
    base_scan: Micros,
) -> Micros {
    base_scan + signals_per_scan * tx_delay(spec, bits_per_signal)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RankedNetwork {
    pub spec: NetworkSpec,
    pub scan_time_us: Micros,
}

/// All table rows ranked by ascending process scan time. Ties keep table
/// order.
pub fn compare_networks(
    signals_per_scan: u64,
    bits_per_signal: u64,
    base_scan: Micros,
) -> Vec<RankedNetwork> {
    let mut ranked: Vec<RankedNetwork> = TABLE
        .iter()
        .map(|spec| RankedNetwork {
            spec: *spec,
            scan_time_us: process_scan_time(spec, signals_per_scan, bits_per_signal, base_scan),
        })
        .collect();
    ranked.sort_by_key(|r| r.scan_time_us);
    ranked
}

/// The full table in `name,segment_m,rate_kbps,max_nodes` lines.
pub fn dump_table() -> String {
    let mut out = String::new();
    for row in &TABLE {
        out.push_str(&row.table_line());
        out.push('\n');
    }
    out
}
