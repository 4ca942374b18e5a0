//! Emulated HC05-style Bluetooth serial modules.
//!
//! Covers the AT configuration subset needed to set up a master/slave pair,
//! the pairing handshake, the frame codec used on the link, and a lossy
//! serialization-delay channel.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodels::{tx_delay, NetworkSpec};
use crate::simkernel::Micros;

pub const DEFAULT_BAUD: u32 = 9600;

/// Baud rates the module accepts via `AT+UART`.
pub const SUPPORTED_BAUDS: [u32; 10] = [
    4800, 9600, 19200, 38400, 57600, 115200, 230400, 460800, 921600, 1382400,
];

/// 48-bit module address, written `NAP:UAP:LAP` as `hhhh:hh:hhhhhh`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BtAddress([u8; 6]);

impl BtAddress {
    pub const fn new(bytes: [u8; 6]) -> Self {
        BtAddress(bytes)
    }

    pub fn bytes(&self) -> [u8; 6] {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed address `{0}` (expected hhhh:hh:hhhhhh)")]
pub struct AddressError(pub String);

impl FromStr for BtAddress {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || AddressError(s.to_string());
        let parts: Vec<&str> = s.split(':').collect();
        let widths = [4, 2, 6];
        if parts.len() != 3
            || parts
                .iter()
                .zip(widths)
                .any(|(p, w)| p.len() != w || !p.bytes().all(|b| b.is_ascii_hexdigit()))
        {
            return Err(err());
        }
        let hex: String = parts.concat();
        let mut bytes = [0u8; 6];
        for (i, byte) in bytes.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| err())?;
        }
        Ok(BtAddress(bytes))
    }
}

impl fmt::Display for BtAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}{:02x}:{:02x}:{:02x}{:02x}{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl Serialize for BtAddress {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BtAddress {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Master,
    Slave,
    Unset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    AtCommand,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct LinkId(pub u32);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModuleError {
    #[error("module is in data mode; AT commands need command mode")]
    DataMode,
    #[error("module holds link {0:?}; disconnect before entering command mode")]
    Linked(LinkId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AtErrorCode {
    /// `ERROR:(0)`
    UnknownCommand,
    /// `ERROR:(1)`
    BadArgument,
}

/// Reply text of one AT command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AtReply {
    Ok,
    /// A query result line followed by `OK`.
    Value(String),
    Error(AtErrorCode),
}

impl AtReply {
    pub fn is_ok(&self) -> bool {
        !matches!(self, AtReply::Error(_))
    }
}

impl fmt::Display for AtReply {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AtReply::Ok => f.write_str("OK"),
            AtReply::Value(v) => write!(f, "{v}\r\nOK"),
            AtReply::Error(AtErrorCode::UnknownCommand) => f.write_str("ERROR:(0)"),
            AtReply::Error(AtErrorCode::BadArgument) => f.write_str("ERROR:(1)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BtModule {
    pub address: BtAddress,
    pub role: Role,
    pub baud: u32,
    pub bind_address: Option<BtAddress>,
    pub mode: Mode,
    pub link: Option<LinkId>,
}

impl BtModule {
    /// Factory state: no role, 9600 baud, unbound, powered up in command
    /// mode.
    pub fn new(address: BtAddress) -> Self {
        BtModule {
            address,
            role: Role::Unset,
            baud: DEFAULT_BAUD,
            bind_address: None,
            mode: Mode::AtCommand,
            link: None,
        }
    }

    pub fn enter_command_mode(&mut self) -> Result<(), ModuleError> {
        if let Some(link) = self.link {
            return Err(ModuleError::Linked(link));
        }
        self.mode = Mode::AtCommand;
        Ok(())
    }

    pub fn enter_data_mode(&mut self) {
        self.mode = Mode::Data;
    }

    /// Executes one AT command line. Only valid in command mode.
    pub fn at_command(&mut self, command: &str) -> Result<AtReply, ModuleError> {
        if self.mode != Mode::AtCommand {
            return Err(ModuleError::DataMode);
        }
        let line = command.trim_end_matches(['\r', '\n']);
        let upper = line.to_ascii_uppercase();
        let reply = match upper.as_str() {
            "AT" => AtReply::Ok,
            "AT+ROLE?" => AtReply::Value(format!(
                "+ROLE:{}",
                match self.role {
                    Role::Master => "1",
                    Role::Slave => "0",
                    Role::Unset => "?",
                }
            )),
            "AT+ADDR?" => AtReply::Value(format!("+ADDR:{}", self.address)),
            _ => match upper.split_once('=') {
                Some(("AT+ROLE", arg)) => match arg {
                    "1" => {
                        self.role = Role::Master;
                        AtReply::Ok
                    }
                    "0" => {
                        self.role = Role::Slave;
                        AtReply::Ok
                    }
                    _ => AtReply::Error(AtErrorCode::BadArgument),
                },
                Some(("AT+UART", arg)) => match parse_uart(arg) {
                    Some(baud) => {
                        self.baud = baud;
                        AtReply::Ok
                    }
                    None => AtReply::Error(AtErrorCode::BadArgument),
                },
                Some(("AT+BIND", arg)) => match arg.parse::<BtAddress>() {
                    Ok(addr) => {
                        self.bind_address = Some(addr);
                        AtReply::Ok
                    }
                    Err(_) => AtReply::Error(AtErrorCode::BadArgument),
                },
                _ => AtReply::Error(AtErrorCode::UnknownCommand),
            },
        };
        Ok(reply)
    }
}

/// `<baud>` or `<baud>,<stop>,<parity>` with stop in {0,1}, parity in {0,1,2}.
fn parse_uart(arg: &str) -> Option<u32> {
    let mut fields = arg.split(',');
    let baud: u32 = fields.next()?.parse().ok()?;
    if !SUPPORTED_BAUDS.contains(&baud) {
        return None;
    }
    match (fields.next(), fields.next(), fields.next()) {
        (None, None, None) => Some(baud),
        (Some(stop), Some(parity), None)
            if matches!(stop, "0" | "1") && matches!(parity, "0" | "1" | "2") =>
        {
            Some(baud)
        }
        _ => None,
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PairError {
    #[error("both modules must be in data mode")]
    NotDataMode,
    #[error("{0} already holds a link")]
    AlreadyLinked(BtAddress),
    #[error("role conflict: master is {master:?}, slave is {slave:?}")]
    RoleConflict { master: Role, slave: Role },
    #[error("baud mismatch: {master} vs {slave}")]
    BaudMismatch { master: u32, slave: u32 },
    #[error("master is bound to {bound:?}, slave address is {slave}")]
    BindMismatch {
        bound: Option<BtAddress>,
        slave: BtAddress,
    },
    #[error("link is down")]
    LinkDown,
}

/// Loss and jitter of the radio channel between two modules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelModel {
    pub network: NetworkSpec,
    /// Drop probability per frame, in [0, 1].
    pub loss: f64,
    /// Upper bound of a uniform extra delay per frame.
    pub jitter_us: Micros,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bad_sync: u64,
    pub short_frame: u64,
    pub bad_length: u64,
    pub checksum_fail: u64,
}

impl LinkStats {
    pub fn record_decode_error(&mut self, err: FrameError) {
        match err {
            FrameError::BadSync => self.bad_sync += 1,
            FrameError::ShortFrame => self.short_frame += 1,
            FrameError::BadLength => self.bad_length += 1,
            FrameError::ChecksumFail => self.checksum_fail += 1,
        }
    }

    pub fn corrupt(&self) -> u64 {
        self.bad_sync + self.short_frame + self.bad_length + self.checksum_fail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Link {
    pub id: LinkId,
    pub master: BtAddress,
    pub slave: BtAddress,
    pub channel: ChannelModel,
    pub established_at: Micros,
    pub up: bool,
    pub stats: LinkStats,
}

/// Outcome of handing a frame to the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxOutcome {
    Delivered { arrival: Micros },
    Dropped,
}

impl Link {
    /// Sends `bytes` at `now`. Loss is drawn first, then jitter (only when
    /// the bound is non-zero), both from `rng`.
    pub fn transmit<R: Rng + ?Sized>(
        &mut self,
        bytes: &[u8],
        now: Micros,
        rng: &mut R,
    ) -> Result<TxOutcome, PairError> {
        if !self.up {
            return Err(PairError::LinkDown);
        }
        self.stats.sent += 1;
        let lost = self.channel.loss > 0.0 && rng.gen::<f64>() < self.channel.loss;
        if lost {
            self.stats.dropped += 1;
            return Ok(TxOutcome::Dropped);
        }
        let jitter = if self.channel.jitter_us > 0 {
            rng.gen_range(0..=self.channel.jitter_us)
        } else {
            0
        };
        self.stats.delivered += 1;
        let bits = 8 * bytes.len() as u64;
        Ok(TxOutcome::Delivered {
            arrival: now + tx_delay(&self.channel.network, bits) + jitter,
        })
    }

    pub fn tear_down(&mut self, master: &mut BtModule, slave: &mut BtModule) {
        self.up = false;
        for m in [master, slave] {
            if m.link == Some(self.id) {
                m.link = None;
            }
        }
    }
}

/// Runs the master/slave handshake. Checks run in the order mode,
/// existing links, roles, baud, bind; the first failing one is reported.
pub fn pair(
    master: &mut BtModule,
    slave: &mut BtModule,
    id: LinkId,
    channel: ChannelModel,
    now: Micros,
) -> Result<Link, PairError> {
    if master.mode != Mode::Data || slave.mode != Mode::Data {
        return Err(PairError::NotDataMode);
    }
    for m in [&*master, &*slave] {
        if m.link.is_some() {
            return Err(PairError::AlreadyLinked(m.address));
        }
    }
    if master.role != Role::Master || slave.role != Role::Slave {
        return Err(PairError::RoleConflict {
            master: master.role,
            slave: slave.role,
        });
    }
    if master.baud != slave.baud {
        return Err(PairError::BaudMismatch {
            master: master.baud,
            slave: slave.baud,
        });
    }
    if master.bind_address != Some(slave.address) {
        return Err(PairError::BindMismatch {
            bound: master.bind_address,
            slave: slave.address,
        });
    }
    master.link = Some(id);
    slave.link = Some(id);
    Ok(Link {
        id,
        master: master.address,
        slave: slave.address,
        channel,
        established_at: now,
        up: true,
        stats: LinkStats::default(),
    })
}

pub const FRAME_SYNC: u8 = 0xAA;
/// Sync, seq, len and checksum.
pub const FRAME_OVERHEAD: usize = 4;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FrameError {
    #[error("bad sync byte")]
    BadSync,
    #[error("frame shorter than its header claims")]
    ShortFrame,
    #[error("length field disagrees with frame size")]
    BadLength,
    #[error("checksum mismatch")]
    ChecksumFail,
}

fn checksum(seq: u8, payload: &[u8]) -> u8 {
    payload
        .iter()
        .fold(seq ^ payload.len() as u8, |acc, b| acc ^ b)
}

/// `AA seq 01 image xor(seq, 01, image)`
pub fn encode_frame(input_image: u8, seq: u8) -> [u8; 5] {
    [
        FRAME_SYNC,
        seq,
        1,
        input_image,
        checksum(seq, &[input_image]),
    ]
}

/// Validates sync, length and checksum; returns `(payload[0], seq)`.
pub fn decode_frame(bytes: &[u8]) -> Result<(u8, u8), FrameError> {
    match bytes.first() {
        None => return Err(FrameError::ShortFrame),
        Some(&b) if b != FRAME_SYNC => return Err(FrameError::BadSync),
        Some(_) => {}
    }
    if bytes.len() < FRAME_OVERHEAD + 1 {
        return Err(FrameError::ShortFrame);
    }
    let seq = bytes[1];
    let len = bytes[2] as usize;
    if len == 0 {
        return Err(FrameError::BadLength);
    }
    let expected = FRAME_OVERHEAD + len;
    if bytes.len() < expected {
        return Err(FrameError::ShortFrame);
    }
    if bytes.len() > expected {
        return Err(FrameError::BadLength);
    }
    let payload = &bytes[3..3 + len];
    if checksum(seq, payload) != bytes[3 + len] {
        return Err(FrameError::ChecksumFail);
    }
    Ok((payload[0], seq))
}
