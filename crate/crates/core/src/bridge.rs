//! Field-side and PLC-side bridge controllers, and the end-to-end system
//! that wires switches, the Bluetooth link, relays and the soft PLC onto
//! the simulation kernel.
//!
//! Signal path:
//!
//! ```text
//! switch -> FieldBridge (debounce, refresh) -> slave module ~~ link ~~>
//!   master module -> PlcBridge (decode) -> relay coil (5 V) -> contact (24 V)
//!   -> PLC input channel -> scan_cycle -> output image
//! ```

use serde::Serialize;
use thiserror::Error;

use crate::btlink::{
    decode_frame, encode_frame, pair, AtReply, BtAddress, BtModule, ChannelModel, FrameError, Link,
    LinkId, LinkStats, TxOutcome,
};
use crate::electrical::{
    sample_input_channel, ChannelLevel, ElectricalError, Relay, RelayConfig, SettleAction,
    DEFAULT_24V_THRESHOLD, LOGIC_5V, SUPPLY_24V,
};
use crate::ladder::{scan_cycle, ImageTables, LadderProgram, INPUT_COUNT};
use crate::netmodels::NetworkSpec;
use crate::simkernel::{
    EventHandle, EventKind, Kernel, KernelError, Micros, Model, SimEvent, Trace,
};

pub const DEFAULT_SCAN_PERIOD_US: Micros = 10_000;
pub const DEFAULT_REPORT_PERIOD_US: Micros = 50_000;
pub const DEFAULT_DEBOUNCE_US: Micros = 10_000;

/// Address of the field-side (slave) module.
pub const FIELD_MODULE_ADDR: BtAddress = BtAddress::new([0x98, 0xd3, 0x31, 0xfc, 0x19, 0x0f]);
/// Address of the PLC-side (master) module.
pub const PLC_MODULE_ADDR: BtAddress = BtAddress::new([0x98, 0xd3, 0x31, 0x20, 0x4a, 0x11]);

const CHANNELS: usize = INPUT_COUNT as usize;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("{network} allows at most {cap} nodes")]
    NodeCapExceeded { network: String, cap: u32 },
    #[error("node {0} is already attached")]
    DuplicateNode(BtAddress),
    #[error("switch index {0} out of range (0..8)")]
    SwitchIndex(u8),
    #[error("period `{0}` must be positive")]
    ZeroPeriod(&'static str),
    #[error("loss probability {0} outside [0, 1]")]
    Loss(f64),
    #[error("stimulus at {at}us is after the run ends at {duration}us")]
    StimulusAfterEnd { at: Micros, duration: Micros },
    #[error("module setup command `{command}` failed: {reply}")]
    ModuleSetup { command: String, reply: String },
    #[error(transparent)]
    Electrical(#[from] ElectricalError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Timing and threshold knobs for the whole system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeConfig {
    pub scan_period_us: Micros,
    pub report_period_us: Micros,
    pub debounce_us: Micros,
    pub relay: RelayConfig,
    pub input_threshold_v: f64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            scan_period_us: DEFAULT_SCAN_PERIOD_US,
            report_period_us: DEFAULT_REPORT_PERIOD_US,
            debounce_us: DEFAULT_DEBOUNCE_US,
            relay: RelayConfig::default(),
            input_threshold_v: DEFAULT_24V_THRESHOLD,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<(), BridgeError> {
        if self.scan_period_us == 0 {
            return Err(BridgeError::ZeroPeriod("scan_period_us"));
        }
        if self.report_period_us == 0 {
            return Err(BridgeError::ZeroPeriod("report_period_us"));
        }
        ChannelLevel::new(0.0, self.input_threshold_v, SUPPLY_24V)?;
        ChannelLevel::new(0.0, self.relay.pull_in_threshold, LOGIC_5V + f64::EPSILON)?;
        Ok(())
    }
}

/// Field nodes attached to one network, bounded by the table's node cap.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deployment {
    network: NetworkSpec,
    field_nodes: Vec<BtAddress>,
}

impl Deployment {
    pub fn new(network: NetworkSpec) -> Self {
        Deployment {
            network,
            field_nodes: Vec::new(),
        }
    }

    pub fn attach_field_node(&mut self, address: BtAddress) -> Result<usize, BridgeError> {
        if self.field_nodes.contains(&address) {
            return Err(BridgeError::DuplicateNode(address));
        }
        if self.field_nodes.len() as u32 >= self.network.max_nodes {
            return Err(BridgeError::NodeCapExceeded {
                network: self.network.name.to_string(),
                cap: self.network.max_nodes,
            });
        }
        self.field_nodes.push(address);
        Ok(self.field_nodes.len() - 1)
    }

    pub fn field_nodes(&self) -> &[BtAddress] {
        &self.field_nodes
    }

    pub fn network(&self) -> &NetworkSpec {
        &self.network
    }
}

/// Result of a raw switch edge at the field bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchEdge {
    /// Already in that position.
    Unchanged,
    /// Changed; the debounced state is re-evaluated at `at`.
    DebounceUntil { at: Micros },
    /// Changed and accepted immediately (no debounce configured).
    Accepted,
}

/// What one call of [`FieldBridge::field_step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldStep {
    Idle,
    Send([u8; 5]),
    /// A frame was due but the link is down; it was skipped.
    LinkDown,
}

/// Field-side controller: debounces switches and reports the whole input
/// image on change and at every refresh boundary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldBridge {
    raw: u8,
    switch_states: u8,
    last_reported: u8,
    seq: u8,
    report_period: Micros,
    next_report: Micros,
    debounce: Micros,
    last_edge: [Micros; CHANNELS],
    frames_sent: u64,
}

impl FieldBridge {
    pub fn new(report_period: Micros, debounce: Micros) -> Self {
        FieldBridge {
            raw: 0,
            switch_states: 0,
            last_reported: 0,
            seq: 0,
            report_period,
            next_report: report_period,
            debounce,
            last_edge: [0; CHANNELS],
            frames_sent: 0,
        }
    }

    /// Debounced switch image.
    pub fn switch_states(&self) -> u8 {
        self.switch_states
    }

    /// Physical switch positions, before debouncing.
    pub fn raw(&self) -> u8 {
        self.raw
    }

    pub fn seq(&self) -> u8 {
        self.seq
    }

    pub fn last_reported(&self) -> u8 {
        self.last_reported
    }

    pub fn frames_sent(&self) -> u64 {
        self.frames_sent
    }

    pub fn set_raw(&mut self, index: u8, on: bool, now: Micros) -> SwitchEdge {
        let mask = 1u8 << index;
        if (self.raw & mask != 0) == on {
            return SwitchEdge::Unchanged;
        }
        self.raw ^= mask;
        self.last_edge[index as usize] = now;
        if self.debounce == 0 {
            self.switch_states = (self.switch_states & !mask) | (self.raw & mask);
            SwitchEdge::Accepted
        } else {
            SwitchEdge::DebounceUntil {
                at: now + self.debounce,
            }
        }
    }

    /// Re-evaluates switch `index` once its debounce window has passed.
    /// Returns true when the debounced state changed.
    pub fn debounce_elapsed(&mut self, index: u8, now: Micros) -> bool {
        let mask = 1u8 << index;
        if now < self.last_edge[index as usize] + self.debounce {
            // a newer edge restarted the window
            return false;
        }
        if (self.raw ^ self.switch_states) & mask == 0 {
            return false;
        }
        self.switch_states ^= mask;
        true
    }

    pub fn field_step(&mut self, now: Micros, link_up: bool) -> FieldStep {
        let boundary = now >= self.next_report;
        if boundary {
            let periods = (now - self.next_report) / self.report_period + 1;
            self.next_report += periods * self.report_period;
        }
        if !boundary && self.switch_states == self.last_reported {
            return FieldStep::Idle;
        }
        if !link_up {
            return FieldStep::LinkDown;
        }
        let frame = encode_frame(self.switch_states, self.seq);
        self.seq = self.seq.wrapping_add(1);
        self.last_reported = self.switch_states;
        self.frames_sent += 1;
        FieldStep::Send(frame)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PlcBridgeStats {
    pub ok: u64,
    pub stale: u64,
    pub corrupt: u64,
}

/// Coil changes produced by one accepted frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoilCommands {
    pub voltages: [f64; CHANNELS],
    pub settle: [SettleAction; CHANNELS],
    pub stale: bool,
}

/// PLC-side controller: decodes frames and drives one relay coil per input
/// channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlcBridge {
    last_seq: Option<u8>,
    relays: [Relay; CHANNELS],
    stats: PlcBridgeStats,
}

impl PlcBridge {
    pub fn new(relay: RelayConfig) -> Self {
        PlcBridge {
            last_seq: None,
            relays: [Relay::new(relay); CHANNELS],
            stats: PlcBridgeStats::default(),
        }
    }

    pub fn relays(&self) -> &[Relay; CHANNELS] {
        &self.relays
    }

    pub fn stats(&self) -> PlcBridgeStats {
        self.stats
    }

    pub fn last_seq(&self) -> Option<u8> {
        self.last_seq
    }

    /// Bitmask of energized coils.
    pub fn coil_mask(&self) -> u8 {
        self.mask(|r| r.coil_voltage() >= r.config().pull_in_threshold)
    }

    /// Bitmask of closed contacts.
    pub fn contact_mask(&self) -> u8 {
        self.mask(Relay::is_closed)
    }

    fn mask(&self, f: impl Fn(&Relay) -> bool) -> u8 {
        self.relays
            .iter()
            .enumerate()
            .filter(|(_, r)| f(r))
            .fold(0, |acc, (i, _)| acc | 1 << i)
    }

    /// Decodes a frame and sets coil `k` to 5 V iff payload bit `k` is 1.
    /// Corrupt frames are counted and leave the coils alone.
    pub fn plc_step(&mut self, frame: &[u8], now: Micros) -> Result<CoilCommands, FrameError> {
        let (image, seq) = match decode_frame(frame) {
            Ok(decoded) => decoded,
            Err(e) => {
                self.stats.corrupt += 1;
                return Err(e);
            }
        };
        let stale = self.last_seq == Some(seq);
        if stale {
            self.stats.stale += 1;
        } else {
            self.stats.ok += 1;
        }
        self.last_seq = Some(seq);
        let mut voltages = [0.0; CHANNELS];
        let mut settle = [SettleAction::None; CHANNELS];
        for (k, relay) in self.relays.iter_mut().enumerate() {
            voltages[k] = if image >> k & 1 == 1 { LOGIC_5V } else { 0.0 };
            settle[k] = relay.step(voltages[k], now);
        }
        Ok(CoilCommands {
            voltages,
            settle,
            stale,
        })
    }

    /// Completes relay `k`'s pending transition. True if the contact moved.
    pub fn settle_relay(&mut self, k: usize, now: Micros) -> bool {
        self.relays[k].settle(now)
    }
}

/// The soft PLC: input channels, program and image tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SoftPlc {
    program: LadderProgram,
    images: ImageTables,
    inputs: [ChannelLevel; CHANNELS],
    scans: u64,
}

impl SoftPlc {
    pub fn new(program: LadderProgram, input_threshold_v: f64) -> Result<Self, BridgeError> {
        let level = ChannelLevel::new(0.0, input_threshold_v, SUPPLY_24V)?;
        Ok(SoftPlc {
            program,
            images: ImageTables::default(),
            inputs: [level; CHANNELS],
            scans: 0,
        })
    }

    pub fn images(&self) -> &ImageTables {
        &self.images
    }

    pub fn program(&self) -> &LadderProgram {
        &self.program
    }

    pub fn scans(&self) -> u64 {
        self.scans
    }

    pub fn set_input_voltage(&mut self, k: usize, voltage: f64) {
        self.inputs[k] = self.inputs[k].with_voltage(voltage);
    }

    /// Reads the input channels into the input image, then runs one scan.
    pub fn scan(&mut self) -> &ImageTables {
        let input = self
            .inputs
            .iter()
            .enumerate()
            .filter(|(_, level)| sample_input_channel(level))
            .fold(0u8, |acc, (k, _)| acc | 1 << k);
        self.images.set_input(input);
        self.images = scan_cycle(&self.program, &self.images);
        self.scans += 1;
        &self.images
    }
}

/// A scripted switch change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Stimulus {
    pub time: Micros,
    pub switch: u8,
    pub on: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StimulusStatus {
    /// Waiting for debounce or for the PLC to see it.
    Pending,
    /// Reverted or overtaken within the debounce window.
    Filtered,
    /// A later change of the same switch was accepted first.
    Superseded,
    Resolved,
}

/// Per-stimulus timing. `latency_us` runs from the debounced field event to
/// the scan that first reads the new level and writes outputs from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StimulusRecord {
    pub switch: u8,
    pub on: bool,
    pub stimulus_at: Micros,
    pub field_event_at: Option<Micros>,
    pub scan_at: Option<Micros>,
    pub latency_us: Option<Micros>,
    pub stimulus_to_output_us: Option<Micros>,
    pub outputs_after: Option<u8>,
    pub status: StimulusStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
struct LatencyTracker {
    records: Vec<StimulusRecord>,
    open: [Option<usize>; CHANNELS],
}

impl LatencyTracker {
    fn edge(&mut self, switch: u8, on: bool, now: Micros) {
        if let Some(prev) = self.open[switch as usize] {
            let rec = &mut self.records[prev];
            if rec.status == StimulusStatus::Pending {
                rec.status = if rec.field_event_at.is_some() {
                    StimulusStatus::Superseded
                } else {
                    StimulusStatus::Filtered
                };
            }
        }
        self.open[switch as usize] = Some(self.records.len());
        self.records.push(StimulusRecord {
            switch,
            on,
            stimulus_at: now,
            field_event_at: None,
            scan_at: None,
            latency_us: None,
            stimulus_to_output_us: None,
            outputs_after: None,
            status: StimulusStatus::Pending,
        });
    }

    fn accepted(&mut self, switch: u8, now: Micros) {
        if let Some(i) = self.open[switch as usize] {
            self.records[i].field_event_at = Some(now);
        }
    }

    /// The debounce window closed without a state change.
    fn rejected(&mut self, switch: u8) {
        if let Some(i) = self.open[switch as usize] {
            let rec = &mut self.records[i];
            if rec.status == StimulusStatus::Pending && rec.field_event_at.is_none() {
                rec.status = StimulusStatus::Filtered;
            }
        }
    }

    fn scanned(&mut self, images: &ImageTables, now: Micros) -> Vec<usize> {
        let mut resolved = Vec::new();
        for i in self.open.iter().flatten().copied() {
            let rec = &mut self.records[i];
            let Some(field_at) = rec.field_event_at else {
                continue;
            };
            if rec.status != StimulusStatus::Pending
                || (images.input() >> rec.switch & 1 == 1) != rec.on
            {
                continue;
            }
            rec.status = StimulusStatus::Resolved;
            rec.scan_at = Some(now);
            rec.latency_us = Some(now - field_at);
            rec.stimulus_to_output_us = Some(now - rec.stimulus_at);
            rec.outputs_after = Some(images.output());
            resolved.push(i);
        }
        resolved
    }

    fn last_latency(&self) -> Option<Micros> {
        self.records
            .iter()
            .filter_map(|r| r.scan_at.zip(r.latency_us))
            .max_by_key(|(at, _)| *at)
            .map(|(_, l)| l)
    }
}

/// Event payloads of the end-to-end model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Pair the two modules.
    Handshake,
    /// Physical switch edge.
    SetSwitch {
        index: u8,
        on: bool,
    },
    DebounceElapsed {
        index: u8,
    },
    /// Field-side refresh boundary.
    ReportTick,
    FrameArrival {
        bytes: Vec<u8>,
    },
    RelaySettle {
        relay: u8,
    },
    PlcScan,
}

impl Payload {
    pub fn kind(&self) -> EventKind {
        match self {
            Payload::Handshake => EventKind::UserCommand,
            Payload::SetSwitch { .. } | Payload::DebounceElapsed { .. } => EventKind::InputChange,
            Payload::ReportTick | Payload::PlcScan => EventKind::ScanTick,
            Payload::FrameArrival { .. } => EventKind::FrameDelivery,
            Payload::RelaySettle { .. } => EventKind::RelaySettle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkState {
    Paired,
    Down,
}

/// Complete observable state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Snapshot {
    pub sim_time_us: Micros,
    pub switches: u8,
    pub field_state: u8,
    pub coils: u8,
    pub relays: u8,
    pub inputs: u8,
    pub outputs: u8,
    pub internal: u16,
    pub link: LinkState,
    pub link_stats: LinkStats,
    pub plc_bridge: PlcBridgeStats,
    pub scans: u64,
    pub last_latency_us: Option<Micros>,
}

impl Snapshot {
    /// Equality ignoring the timestamp and scan counter.
    pub fn same_state(&self, other: &Snapshot) -> bool {
        Snapshot {
            sim_time_us: 0,
            scans: 0,
            ..self.clone()
        } == Snapshot {
            sim_time_us: 0,
            scans: 0,
            ..other.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemConfig {
    pub bridge: BridgeConfig,
    pub channel: ChannelModel,
}

/// Everything between the switches and the PLC outputs, driven by the
/// kernel.
#[derive(Debug)]
pub struct System {
    config: SystemConfig,
    deployment: Deployment,
    field: FieldBridge,
    plc_bridge: PlcBridge,
    plc: SoftPlc,
    field_module: BtModule,
    plc_module: BtModule,
    link: Option<Link>,
    settle_handles: [Option<EventHandle>; CHANNELS],
    latency: LatencyTracker,
}

impl System {
    /// Builds the system and configures both modules over AT commands: the
    /// PLC side as master bound to the field side, the field side as slave.
    pub fn new(config: SystemConfig, program: LadderProgram) -> Result<Self, BridgeError> {
        config.bridge.validate()?;
        if !(0.0..=1.0).contains(&config.channel.loss) {
            return Err(BridgeError::Loss(config.channel.loss));
        }
        let mut deployment = Deployment::new(config.channel.network);
        deployment.attach_field_node(FIELD_MODULE_ADDR)?;

        let mut plc_module = BtModule::new(PLC_MODULE_ADDR);
        let mut field_module = BtModule::new(FIELD_MODULE_ADDR);
        let bind = format!("AT+BIND={FIELD_MODULE_ADDR}");
        let setup: [(&mut BtModule, &[&str]); 2] = [
            (
                &mut plc_module,
                &["AT", "AT+ROLE=1", "AT+UART=9600,0,0", &bind],
            ),
            (&mut field_module, &["AT", "AT+ROLE=0", "AT+UART=9600,0,0"]),
        ];
        for (module, commands) in setup {
            for command in commands {
                let reply = module
                    .at_command(command)
                    .map_err(|e| BridgeError::ModuleSetup {
                        command: command.to_string(),
                        reply: e.to_string(),
                    })?;
                if reply != AtReply::Ok {
                    return Err(BridgeError::ModuleSetup {
                        command: command.to_string(),
                        reply: reply.to_string(),
                    });
                }
            }
            module.enter_data_mode();
        }

        Ok(System {
            config,
            deployment,
            field: FieldBridge::new(config.bridge.report_period_us, config.bridge.debounce_us),
            plc_bridge: PlcBridge::new(config.bridge.relay),
            plc: SoftPlc::new(program, config.bridge.input_threshold_v)?,
            field_module,
            plc_module,
            link: None,
            settle_handles: [None; CHANNELS],
            latency: LatencyTracker::default(),
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn field(&self) -> &FieldBridge {
        &self.field
    }

    pub fn plc_bridge(&self) -> &PlcBridge {
        &self.plc_bridge
    }

    pub fn plc(&self) -> &SoftPlc {
        &self.plc
    }

    pub fn link(&self) -> Option<&Link> {
        self.link.as_ref()
    }

    pub fn deployment(&self) -> &Deployment {
        &self.deployment
    }

    pub fn plc_module_mut(&mut self) -> &mut BtModule {
        &mut self.plc_module
    }

    pub fn field_module_mut(&mut self) -> &mut BtModule {
        &mut self.field_module
    }

    pub fn stimuli(&self) -> &[StimulusRecord] {
        &self.latency.records
    }

    pub fn snapshot(&self, now: Micros) -> Snapshot {
        let link_up = self.link.as_ref().is_some_and(|l| l.up);
        Snapshot {
            sim_time_us: now,
            switches: self.field.raw(),
            field_state: self.field.switch_states(),
            coils: self.plc_bridge.coil_mask(),
            relays: self.plc_bridge.contact_mask(),
            inputs: self.plc.images().input(),
            outputs: self.plc.images().output(),
            internal: self.plc.images().internal(),
            link: if link_up {
                LinkState::Paired
            } else {
                LinkState::Down
            },
            link_stats: self.link.as_ref().map(|l| l.stats).unwrap_or_default(),
            plc_bridge: self.plc_bridge.stats(),
            scans: self.plc.scans(),
            last_latency_us: self.latency.last_latency(),
        }
    }

    fn link_up(&self) -> bool {
        self.link.as_ref().is_some_and(|l| l.up)
    }

    fn report(&mut self, kernel: &mut Kernel<Payload>, why: &str) -> String {
        let now = kernel.now();
        match self.field.field_step(now, self.link_up()) {
            FieldStep::Idle => format!("{why}: nothing to report"),
            FieldStep::LinkDown => format!("{why}: link down, frame skipped"),
            FieldStep::Send(frame) => {
                let link = self.link.as_mut().expect("link_up checked");
                let seq = frame[1];
                match link.transmit(&frame, now, kernel.rng()) {
                    Ok(TxOutcome::Delivered { arrival }) => {
                        kernel
                            .schedule(SimEvent::new(
                                arrival,
                                EventKind::FrameDelivery,
                                Payload::FrameArrival {
                                    bytes: frame.to_vec(),
                                },
                            ))
                            .expect("arrival is never in the past");
                        format!(
                            "{why}: sent seq={seq} image={:08b}, arrives t={arrival}",
                            frame[3]
                        )
                    }
                    Ok(TxOutcome::Dropped) => {
                        format!("{why}: sent seq={seq} image={:08b}, dropped", frame[3])
                    }
                    Err(e) => format!("{why}: transmit failed: {e}"),
                }
            }
        }
    }

    fn apply_settle(&mut self, kernel: &mut Kernel<Payload>, k: usize, action: SettleAction) {
        match action {
            SettleAction::None => {}
            SettleAction::Cancel => {
                if let Some(handle) = self.settle_handles[k].take() {
                    kernel.cancel(handle);
                }
            }
            SettleAction::Schedule { at } => {
                if let Some(handle) = self.settle_handles[k].take() {
                    kernel.cancel(handle);
                }
                let handle = kernel
                    .schedule(SimEvent::new(
                        at,
                        EventKind::RelaySettle,
                        Payload::RelaySettle { relay: k as u8 },
                    ))
                    .expect("settle is never in the past");
                self.settle_handles[k] = Some(handle);
            }
        }
    }
}

impl Model for System {
    type Payload = Payload;

    fn dispatch(&mut self, event: SimEvent<Payload>, kernel: &mut Kernel<Payload>) -> String {
        let now = event.timestamp;
        match event.payload {
            Payload::Handshake => {
                let id = LinkId(1);
                match pair(
                    &mut self.plc_module,
                    &mut self.field_module,
                    id,
                    self.config.channel,
                    now,
                ) {
                    Ok(link) => {
                        let msg = format!(
                            "handshake: master {} bound to slave {}, link established",
                            link.master, link.slave
                        );
                        self.link = Some(link);
                        msg
                    }
                    Err(e) => format!("handshake failed: {e}"),
                }
            }
            Payload::SetSwitch { index, on } => {
                let level = if on { "on" } else { "off" };
                match self.field.set_raw(index, on, now) {
                    SwitchEdge::Unchanged => format!("switch {index} {level} (no change)"),
                    SwitchEdge::DebounceUntil { at } => {
                        self.latency.edge(index, on, now);
                        kernel
                            .schedule(SimEvent::new(
                                at,
                                EventKind::InputChange,
                                Payload::DebounceElapsed { index },
                            ))
                            .expect("debounce is never in the past");
                        format!("switch {index} {level}, debounce until t={at}")
                    }
                    SwitchEdge::Accepted => {
                        self.latency.edge(index, on, now);
                        self.latency.accepted(index, now);
                        let report = self.report(kernel, "field event");
                        format!("switch {index} {level}; {report}")
                    }
                }
            }
            Payload::DebounceElapsed { index } => {
                if self.field.debounce_elapsed(index, now) {
                    self.latency.accepted(index, now);
                    let report = self.report(kernel, "field event");
                    format!("switch {index} debounced; {report}")
                } else {
                    if now >= self.field.last_edge[index as usize] + self.field.debounce {
                        self.latency.rejected(index);
                    }
                    format!("switch {index} debounce window closed, no change")
                }
            }
            Payload::ReportTick => {
                kernel
                    .schedule_in(
                        self.config.bridge.report_period_us,
                        EventKind::ScanTick,
                        Payload::ReportTick,
                    )
                    .expect("positive period");
                self.report(kernel, "refresh")
            }
            Payload::FrameArrival { bytes } => match self.plc_bridge.plc_step(&bytes, now) {
                Ok(commands) => {
                    for (k, action) in commands.settle.into_iter().enumerate() {
                        self.apply_settle(kernel, k, action);
                    }
                    let coils = self.plc_bridge.coil_mask();
                    if commands.stale {
                        format!("frame seq={} stale, coils={coils:08b}", bytes[1])
                    } else {
                        format!("frame seq={} accepted, coils={coils:08b}", bytes[1])
                    }
                }
                Err(e) => {
                    if let Some(link) = self.link.as_mut() {
                        link.stats.record_decode_error(e);
                    }
                    format!("frame rejected: {e}")
                }
            },
            Payload::RelaySettle { relay } => {
                let k = relay as usize;
                self.settle_handles[k] = None;
                if self.plc_bridge.settle_relay(k, now) {
                    let contact = &self.plc_bridge.relays()[k];
                    let volts = contact.switched_voltage(SUPPLY_24V);
                    self.plc.set_input_voltage(k, volts);
                    format!("relay {k} {:?}, input X{k} at {volts} V", contact.contact())
                } else {
                    format!("relay {k} settle, no change")
                }
            }
            Payload::PlcScan => {
                kernel
                    .schedule_in(
                        self.config.bridge.scan_period_us,
                        EventKind::ScanTick,
                        Payload::PlcScan,
                    )
                    .expect("positive period");
                let before = self.plc.images().output();
                let images = *self.plc.scan();
                let resolved = self.latency.scanned(&images, now);
                let mut msg = format!(
                    "plc scan X={:08b} Y={:06b}",
                    images.input(),
                    images.output()
                );
                if images.output() != before {
                    msg.push_str(&format!(" (outputs changed from {before:06b})"));
                }
                for i in resolved {
                    let rec = &self.latency.records[i];
                    msg.push_str(&format!(
                        "; X{} {} latency {}us",
                        rec.switch,
                        if rec.on { "on" } else { "off" },
                        rec.latency_us.unwrap_or_default()
                    ));
                }
                msg
            }
        }
    }

    fn observe(&self) -> String {
        let stats = self.link.as_ref().map(|l| l.stats).unwrap_or_default();
        format!(
            "sw={:08b} fld={:08b} coil={:08b} relay={:08b} X={:08b} Y={:06b} link={} tx={}/{}/{} bad={}",
            self.field.raw(),
            self.field.switch_states(),
            self.plc_bridge.coil_mask(),
            self.plc_bridge.contact_mask(),
            self.plc.images().input(),
            self.plc.images().output(),
            if self.link_up() { "up" } else { "down" },
            stats.sent,
            stats.delivered,
            stats.dropped,
            stats.corrupt(),
        )
    }
}

/// A kernel plus the system it drives, with the accumulated trace.
#[derive(Debug)]
pub struct Simulation {
    kernel: Kernel<Payload>,
    system: System,
    trace: Trace,
}

impl Simulation {
    /// Schedules the handshake and the first PLC scan at t=0 and the first
    /// refresh one report period later.
    pub fn new(
        config: SystemConfig,
        program: LadderProgram,
        seed: u64,
    ) -> Result<Self, BridgeError> {
        let system = System::new(config, program)?;
        Ok(Simulation::with_system(system, seed))
    }

    pub fn with_system(system: System, seed: u64) -> Self {
        let mut kernel = Kernel::new(seed);
        let report = system.config.bridge.report_period_us;
        for (t, payload) in [
            (0, Payload::Handshake),
            (0, Payload::PlcScan),
            (report, Payload::ReportTick),
        ] {
            let kind = payload.kind();
            kernel
                .schedule(SimEvent::new(t, kind, payload))
                .expect("clock starts at zero");
        }
        Simulation {
            kernel,
            system,
            trace: Trace::new(),
        }
    }

    pub fn now(&self) -> Micros {
        self.kernel.now()
    }

    pub fn next_event_time(&self) -> Option<Micros> {
        self.kernel.next_timestamp()
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    pub fn kernel(&self) -> &Kernel<Payload> {
        &self.kernel
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    pub fn snapshot(&self) -> Snapshot {
        self.system.snapshot(self.kernel.now())
    }

    /// Dispatches everything up to and including `t`. Returns the number of
    /// events dispatched.
    pub fn advance_to(&mut self, t: Micros) -> Result<usize, BridgeError> {
        let chunk = self.kernel.run_until(t, &mut self.system)?;
        let n = chunk.len();
        self.trace.extend(chunk);
        Ok(n)
    }

    /// Queues a switch edge at the current time, behind any events already
    /// queued for this instant.
    pub fn set_switch(&mut self, index: u8, on: bool) -> Result<(), BridgeError> {
        if index >= INPUT_COUNT {
            return Err(BridgeError::SwitchIndex(index));
        }
        let payload = Payload::SetSwitch { index, on };
        self.kernel
            .schedule(SimEvent::new(self.kernel.now(), payload.kind(), payload))?;
        Ok(())
    }

    /// Delivers raw bytes to the PLC side at `at`, bypassing the channel.
    pub fn inject_frame(&mut self, bytes: Vec<u8>, at: Micros) -> Result<(), BridgeError> {
        self.kernel.schedule(SimEvent::new(
            at,
            EventKind::FrameDelivery,
            Payload::FrameArrival { bytes },
        ))?;
        Ok(())
    }
}

/// Inputs of one batch run.
#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub config: SystemConfig,
    pub program: LadderProgram,
    pub stimuli: Vec<Stimulus>,
    pub duration: Micros,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunMetrics {
    pub frames_sent: u64,
    pub frames_delivered: u64,
    pub frames_dropped: u64,
    pub frames_corrupt: u64,
    pub frames_stale: u64,
    pub frames_accepted: u64,
    pub scans: u64,
    pub stimuli: Vec<StimulusRecord>,
    pub final_state: Snapshot,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub metrics: RunMetrics,
}

/// Runs the whole pipeline for `duration` microseconds. Stimuli are
/// applied in time order; each enters the queue once the clock reaches its
/// time.
pub fn run_end_to_end(run: &EndToEnd) -> Result<RunOutput, BridgeError> {
    for s in &run.stimuli {
        if s.switch >= INPUT_COUNT {
            return Err(BridgeError::SwitchIndex(s.switch));
        }
        if s.time > run.duration {
            return Err(BridgeError::StimulusAfterEnd {
                at: s.time,
                duration: run.duration,
            });
        }
    }
    let mut sim = Simulation::new(run.config, run.program.clone(), run.seed)?;
    let mut stimuli = run.stimuli.clone();
    stimuli.sort_by_key(|s| s.time);
    for s in stimuli {
        sim.advance_to(s.time)?;
        sim.set_switch(s.switch, s.on)?;
    }
    sim.advance_to(run.duration)?;
    Ok(finish(sim))
}

/// Collects metrics from a finished simulation.
pub fn finish(sim: Simulation) -> RunOutput {
    let final_state = sim.snapshot();
    let system = &sim.system;
    let link = system.link().map(|l| l.stats).unwrap_or_default();
    let bridge = system.plc_bridge().stats();
    let metrics = RunMetrics {
        frames_sent: link.sent,
        frames_delivered: link.delivered,
        frames_dropped: link.dropped,
        frames_corrupt: bridge.corrupt,
        frames_stale: bridge.stale,
        frames_accepted: bridge.ok,
        scans: system.plc().scans(),
        stimuli: system.stimuli().to_vec(),
        final_state,
    };
    RunOutput {
        trace: sim.into_trace(),
        metrics,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladder::parse_program;
    use crate::netmodels::{network_spec, Network};

    fn bt_config(loss: f64) -> SystemConfig {
        SystemConfig {
            bridge: BridgeConfig::default(),
            channel: ChannelModel {
                network: network_spec(Network::Bluetooth, None).unwrap(),
                loss,
                jitter_us: 0,
            },
        }
    }

    fn demo() -> LadderProgram {
        parse_program("LD X0\nOUT Y1").unwrap()
    }

    #[test]
    fn change_sends_immediately_and_bumps_seq() {
        let mut field = FieldBridge::new(50_000, 0);
        assert_eq!(field.set_raw(0, true, 1_000), SwitchEdge::Accepted);
        assert_eq!(
            field.field_step(1_000, true),
            FieldStep::Send([0xAA, 0, 1, 1, 0])
        );
        assert_eq!(field.seq(), 1);
        assert_eq!(field.field_step(2_000, true), FieldStep::Idle);
        assert_eq!(field.set_raw(0, true, 3_000), SwitchEdge::Unchanged);
    }

    #[test]
    fn quiescent_refresh_count() {
        let mut field = FieldBridge::new(50_000, 10_000);
        let mut frames = 0;
        for t in (0..=150_000).step_by(1_000) {
            if let FieldStep::Send(_) = field.field_step(t, true) {
                frames += 1;
            }
        }
        assert_eq!(frames, 3);
    }

    #[test]
    fn seq_wraps() {
        let mut field = FieldBridge::new(1, 0);
        for t in 1..=256u64 {
            assert!(matches!(field.field_step(t, true), FieldStep::Send(_)));
        }
        assert_eq!(field.seq(), 0);
        let FieldStep::Send(frame) = field.field_step(257, true) else {
            panic!()
        };
        assert_eq!(frame[1], 0);
    }

    #[test]
    fn link_down_skips_without_consuming_seq() {
        let mut field = FieldBridge::new(50_000, 0);
        field.set_raw(3, true, 0);
        assert_eq!(field.field_step(0, false), FieldStep::LinkDown);
        assert_eq!(field.seq(), 0);
        assert_eq!(field.last_reported(), 0);
    }

    #[test]
    fn debounce_filters_short_toggles() {
        let mut field = FieldBridge::new(50_000, 10_000);
        assert_eq!(
            field.set_raw(0, true, 0),
            SwitchEdge::DebounceUntil { at: 10_000 }
        );
        assert_eq!(
            field.set_raw(0, false, 3_000),
            SwitchEdge::DebounceUntil { at: 13_000 }
        );
        assert!(!field.debounce_elapsed(0, 10_000));
        assert!(!field.debounce_elapsed(0, 13_000));
        assert_eq!(field.switch_states(), 0);

        assert_eq!(
            field.set_raw(0, true, 20_000),
            SwitchEdge::DebounceUntil { at: 30_000 }
        );
        assert!(field.debounce_elapsed(0, 30_000));
        assert_eq!(field.switch_states(), 1);
    }

    #[test]
    fn plc_bridge_drives_coils() {
        let mut bridge = PlcBridge::new(RelayConfig::default());
        let cmds = bridge.plc_step(&encode_frame(0b1, 0), 0).unwrap();
        assert_eq!(cmds.voltages, [5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(cmds.settle[0], SettleAction::Schedule { at: 5_000 });
        assert_eq!(bridge.coil_mask(), 1);

        // corrupt frame: coils held, counter bumped
        let mut bad = encode_frame(0, 1);
        bad[4] ^= 0x10;
        assert_eq!(bridge.plc_step(&bad, 100), Err(FrameError::ChecksumFail));
        assert_eq!(bridge.coil_mask(), 1);
        assert_eq!(bridge.stats().corrupt, 1);

        // duplicate of the good frame: stale, nothing changes
        let before = bridge.clone();
        let cmds = bridge.plc_step(&encode_frame(0b1, 0), 200).unwrap();
        assert!(cmds.stale);
        assert_eq!(cmds.settle, [SettleAction::None; 8]);
        assert_eq!(bridge.relays(), before.relays());
        assert_eq!(bridge.stats().stale, 1);
    }

    #[test]
    fn release_after_settle() {
        let mut bridge = PlcBridge::new(RelayConfig::default());
        bridge.plc_step(&encode_frame(0b1, 0), 0).unwrap();
        assert!(bridge.settle_relay(0, 5_000));
        let cmds = bridge.plc_step(&encode_frame(0, 1), 8_000).unwrap();
        assert_eq!(cmds.voltages[0], 0.0);
        assert_eq!(cmds.settle[0], SettleAction::Schedule { at: 13_000 });
        assert_eq!(bridge.contact_mask(), 1);
        assert!(bridge.settle_relay(0, 13_000));
        assert_eq!(bridge.contact_mask(), 0);
    }

    #[test]
    fn node_cap() {
        let mut dep = Deployment::new(network_spec(Network::Bluetooth, None).unwrap());
        for i in 0..10u8 {
            dep.attach_field_node(BtAddress::new([0, 0, 0, 0, 0, i]))
                .unwrap();
        }
        let err = dep
            .attach_field_node(BtAddress::new([0, 0, 0, 0, 0, 10]))
            .unwrap_err();
        assert!(matches!(err, BridgeError::NodeCapExceeded { cap: 10, .. }));
        assert!(matches!(
            dep.attach_field_node(BtAddress::new([0, 0, 0, 0, 0, 1])),
            Err(BridgeError::DuplicateNode(_))
        ));
    }

    #[test]
    fn demo_end_to_end() {
        let run = EndToEnd {
            config: bt_config(0.0),
            program: demo(),
            stimuli: vec![
                Stimulus {
                    time: 0,
                    switch: 0,
                    on: true,
                },
                Stimulus {
                    time: 1_000_000,
                    switch: 0,
                    on: false,
                },
            ],
            duration: 2_000_000,
            seed: 7,
        };
        let out = run_end_to_end(&run).unwrap();
        let recs = &out.metrics.stimuli;
        assert_eq!(recs.len(), 2);
        for rec in recs {
            assert_eq!(rec.status, StimulusStatus::Resolved);
            let l = rec.latency_us.unwrap();
            assert!((5_000..=15_040).contains(&l), "latency {l}");
            assert_eq!(rec.stimulus_to_output_us.unwrap(), l + DEFAULT_DEBOUNCE_US);
        }
        assert_eq!(recs[0].outputs_after, Some(0b10));
        assert_eq!(recs[1].outputs_after, Some(0));
        assert_eq!(out.metrics.final_state.outputs, 0);
        assert_eq!(out.metrics.frames_dropped, 0);
    }

    #[test]
    fn total_loss_never_raises_output() {
        let run = EndToEnd {
            config: bt_config(1.0),
            program: demo(),
            stimuli: vec![Stimulus {
                time: 0,
                switch: 0,
                on: true,
            }],
            duration: 1_000_000,
            seed: 7,
        };
        let out = run_end_to_end(&run).unwrap();
        assert_eq!(out.metrics.final_state.outputs, 0);
        assert!(out.metrics.frames_dropped > 0);
        assert_eq!(out.metrics.frames_sent, out.metrics.frames_dropped);
        assert!(out
            .trace
            .entries()
            .iter()
            .any(|e| e.event.contains("dropped")));
    }

    #[test]
    fn one_frame_in_flight_is_one_delivery() {
        // no periodic refresh inside the horizon, one switch change
        let mut config = bt_config(0.0);
        config.bridge.report_period_us = 10_000_000;
        config.bridge.debounce_us = 0;
        let run = EndToEnd {
            config,
            program: demo(),
            stimuli: vec![Stimulus {
                time: 100,
                switch: 0,
                on: true,
            }],
            duration: 1_000,
            seed: 1,
        };
        let out = run_end_to_end(&run).unwrap();
        assert_eq!(out.trace.count_kind(EventKind::FrameDelivery), 1);
        let delivery = out
            .trace
            .entries()
            .iter()
            .find(|e| e.kind == EventKind::FrameDelivery)
            .unwrap();
        assert_eq!(delivery.t, 140);
    }

    #[test]
    fn relay_release_traced_through_settle() {
        // ON, then OFF 20ms later: the release settles 5ms after the OFF
        // frame arrives.
        let mut config = bt_config(0.0);
        config.bridge.debounce_us = 0;
        let run = EndToEnd {
            config,
            program: demo(),
            stimuli: vec![
                Stimulus {
                    time: 0,
                    switch: 0,
                    on: true,
                },
                Stimulus {
                    time: 20_000,
                    switch: 0,
                    on: false,
                },
            ],
            duration: 40_000,
            seed: 1,
        };
        let out = run_end_to_end(&run).unwrap();
        let settles: Vec<u64> = out
            .trace
            .entries()
            .iter()
            .filter(|e| e.kind == EventKind::RelaySettle)
            .map(|e| e.t)
            .collect();
        assert_eq!(settles, vec![5_040, 25_040]);
    }

    #[test]
    fn corrupt_injection_holds_coils() {
        let mut config = bt_config(0.0);
        config.bridge.debounce_us = 0;
        let mut sim = Simulation::new(config, demo(), 3).unwrap();
        sim.advance_to(0).unwrap();
        sim.set_switch(0, true).unwrap();
        sim.advance_to(1_000).unwrap();
        assert_eq!(sim.snapshot().coils, 1);
        let mut bad = encode_frame(0, 9).to_vec();
        bad[0] = 0x55;
        sim.inject_frame(bad, 2_000).unwrap();
        sim.advance_to(3_000).unwrap();
        let snap = sim.snapshot();
        assert_eq!(snap.coils, 1);
        assert_eq!(snap.plc_bridge.corrupt, 1);
        assert_eq!(snap.link_stats.bad_sync, 1);
    }

    #[test]
    fn handshake_failure_keeps_link_down() {
        let mut system = System::new(bt_config(0.0), demo()).unwrap();
        system.field_module_mut().baud = 38_400;
        let mut sim = Simulation::with_system(system, 0);
        sim.advance_to(0).unwrap();
        sim.set_switch(0, true).unwrap();
        sim.advance_to(200_000).unwrap();
        let snap = sim.snapshot();
        assert_eq!(snap.link, LinkState::Down);
        assert_eq!(snap.outputs, 0);
        assert!(sim.trace().entries()[0].event.contains("baud mismatch"));
        assert!(sim
            .trace()
            .entries()
            .iter()
            .any(|e| e.event.contains("link down")));
    }

    #[test]
    fn stimulus_validation() {
        let run = EndToEnd {
            config: bt_config(0.0),
            program: demo(),
            stimuli: vec![Stimulus {
                time: 5,
                switch: 8,
                on: true,
            }],
            duration: 10,
            seed: 0,
        };
        assert!(matches!(
            run_end_to_end(&run),
            Err(BridgeError::SwitchIndex(8))
        ));
        let run = EndToEnd {
            stimuli: vec![Stimulus {
                time: 11,
                switch: 0,
                on: true,
            }],
            ..run
        };
        assert!(matches!(
            run_end_to_end(&run),
            Err(BridgeError::StimulusAfterEnd { .. })
        ));
    }

    #[test]
    fn rapid_toggle_filtered() {
        let run = EndToEnd {
            config: bt_config(0.0),
            program: demo(),
            stimuli: vec![
                Stimulus {
                    time: 100_000,
                    switch: 0,
                    on: true,
                },
                Stimulus {
                    time: 104_000,
                    switch: 0,
                    on: false,
                },
            ],
            duration: 300_000,
            seed: 0,
        };
        let out = run_end_to_end(&run).unwrap();
        assert!(out
            .metrics
            .stimuli
            .iter()
            .all(|r| r.status == StimulusStatus::Filtered));
        assert!(out
            .trace
            .entries()
            .iter()
            .all(|e| !e.state.contains("Y=000010")));
    }
}
