//! A simulation that accepts commands while it runs.
//!
//! All outside input arrives through a channel of [`Command`]s. The session
//! drains that channel only between kernel steps, stamps each command with
//! the current simulated time and queues it behind events already due at
//! that instant. Subscribers receive a full [`Snapshot`] whenever the
//! observable state changes.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, Sender};

use serde::Serialize;

use crate::bridge::{finish, BridgeError, RunOutput, Simulation, Snapshot, Stimulus};
use crate::service::scenario::ValidScenario;
use crate::simkernel::Micros;

#[derive(Debug)]
pub enum Command {
    SetSwitch {
        index: u8,
        on: bool,
        reply: Option<Sender<Result<Micros, String>>>,
    },
    Snapshot(Sender<Snapshot>),
    Subscribe(Sender<Event>),
}

/// One entry of the live event stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub seq: u64,
    pub snapshot: Snapshot,
}

/// Cloneable handle for submitting commands.
#[derive(Debug, Clone)]
pub struct CommandSender(Sender<Command>);

impl CommandSender {
    pub fn send(&self, command: Command) -> bool {
        self.0.send(command).is_ok()
    }

    /// Fire-and-forget switch change.
    pub fn set_switch(&self, index: u8, on: bool) -> bool {
        self.send(Command::SetSwitch {
            index,
            on,
            reply: None,
        })
    }
}

pub struct LiveSession {
    sim: Simulation,
    scripted: VecDeque<Stimulus>,
    commands: Receiver<Command>,
    subscribers: Vec<Sender<Event>>,
    last_published: Option<Snapshot>,
    event_seq: u64,
}

impl LiveSession {
    /// Builds a session from a scenario. With `replay_stimuli` the
    /// scenario's scripted switch changes are applied at their times, as in
    /// a batch run.
    pub fn new(
        valid: &ValidScenario,
        replay_stimuli: bool,
    ) -> Result<(Self, CommandSender), BridgeError> {
        let sim = Simulation::new(valid.run.config, valid.run.program.clone(), valid.run.seed)?;
        let mut scripted: Vec<Stimulus> = if replay_stimuli {
            valid.run.stimuli.clone()
        } else {
            Vec::new()
        };
        scripted.sort_by_key(|s| s.time);
        let (tx, rx) = mpsc::channel();
        Ok((
            LiveSession {
                sim,
                scripted: scripted.into(),
                commands: rx,
                subscribers: Vec::new(),
                last_published: None,
                event_seq: 0,
            },
            CommandSender(tx),
        ))
    }

    pub fn now(&self) -> Micros {
        self.sim.now()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.sim.snapshot()
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }

    /// Applies every queued command in arrival order. Returns how many.
    pub fn drain_commands(&mut self) -> usize {
        let mut n = 0;
        while let Ok(command) = self.commands.try_recv() {
            n += 1;
            match command {
                Command::SetSwitch { index, on, reply } => {
                    let result = self
                        .sim
                        .set_switch(index, on)
                        .map(|()| self.sim.now())
                        .map_err(|e| e.to_string());
                    if let Some(reply) = reply {
                        let _ = reply.send(result);
                    }
                }
                Command::Snapshot(reply) => {
                    let _ = reply.send(self.sim.snapshot());
                }
                Command::Subscribe(sink) => {
                    let event = Event {
                        seq: self.event_seq,
                        snapshot: self.sim.snapshot(),
                    };
                    if sink.send(event).is_ok() {
                        self.subscribers.push(sink);
                    }
                }
            }
        }
        n
    }

    /// Drains commands, then runs the simulation up to `target`, publishing
    /// after every instant at which events were dispatched.
    pub fn step_to(&mut self, target: Micros) -> Result<(), BridgeError> {
        self.drain_commands();
        if target < self.sim.now() {
            return Ok(());
        }
        while let Some(stimulus) = self.scripted.front().copied() {
            if stimulus.time > target {
                break;
            }
            let at = stimulus.time.max(self.sim.now());
            self.advance_events(at)?;
            self.sim.set_switch(stimulus.switch, stimulus.on)?;
            self.scripted.pop_front();
        }
        self.advance_events(target)
    }

    fn advance_events(&mut self, limit: Micros) -> Result<(), BridgeError> {
        while let Some(t) = self.sim.next_event_time() {
            if t > limit {
                break;
            }
            self.sim.advance_to(t)?;
            self.publish();
        }
        self.sim.advance_to(limit)?;
        Ok(())
    }

    fn publish(&mut self) {
        let snapshot = self.sim.snapshot();
        if self
            .last_published
            .as_ref()
            .is_some_and(|last| last.same_state(&snapshot))
        {
            return;
        }
        self.event_seq += 1;
        let event = Event {
            seq: self.event_seq,
            snapshot: snapshot.clone(),
        };
        self.subscribers.retain(|s| s.send(event.clone()).is_ok());
        self.last_published = Some(snapshot);
    }

    pub fn finish(self) -> RunOutput {
        finish(self.sim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::run_end_to_end;
    use crate::service::scenario::{Scenario, DEMO_SCENARIO};

    fn demo() -> ValidScenario {
        Scenario::parse(DEMO_SCENARIO).unwrap().validate().unwrap()
    }

    #[test]
    fn initial_snapshot_is_all_zero() {
        let (session, _tx) = LiveSession::new(&demo(), false).unwrap();
        let snap = session.snapshot();
        assert_eq!(
            (snap.switches, snap.inputs, snap.outputs, snap.internal),
            (0, 0, 0, 0)
        );
    }

    #[test]
    fn switch_command_lights_y1() {
        let (mut session, tx) = LiveSession::new(&demo(), false).unwrap();
        let (sub_tx, sub_rx) = mpsc::channel();
        tx.send(Command::Subscribe(sub_tx));
        session.step_to(100_000).unwrap();
        let (reply_tx, reply_rx) = mpsc::channel();
        tx.send(Command::SetSwitch {
            index: 0,
            on: true,
            reply: Some(reply_tx),
        });
        session.step_to(200_000).unwrap();
        assert_eq!(reply_rx.recv().unwrap(), Ok(100_000));
        let events: Vec<Event> = sub_rx.try_iter().collect();
        assert_eq!(events[0].snapshot.outputs, 0);
        let x0 = events
            .iter()
            .position(|e| e.snapshot.inputs & 1 == 1)
            .unwrap();
        let y1 = events
            .iter()
            .position(|e| e.snapshot.outputs & 0b10 != 0)
            .unwrap();
        assert!(x0 <= y1);
        assert!(events.windows(2).all(|w| w[0].seq < w[1].seq));
        assert!(events
            .windows(2)
            .all(|w| w[0].snapshot.sim_time_us <= w[1].snapshot.sim_time_us));

        let (snap_tx, snap_rx) = mpsc::channel();
        tx.send(Command::Snapshot(snap_tx));
        session.step_to(200_000).unwrap();
        assert_eq!(snap_rx.recv().unwrap().outputs, 0b10);
    }

    #[test]
    fn rapid_toggles_within_debounce_do_nothing() {
        let (mut session, tx) = LiveSession::new(&demo(), false).unwrap();
        let (sub_tx, sub_rx) = mpsc::channel();
        tx.send(Command::Subscribe(sub_tx));
        session.step_to(100_000).unwrap();
        tx.set_switch(0, true);
        session.step_to(104_000).unwrap();
        tx.set_switch(0, false);
        session.step_to(400_000).unwrap();
        let events: Vec<Event> = sub_rx.try_iter().collect();
        assert!(
            events.iter().any(|e| e.snapshot.switches & 1 == 1),
            "raw switch seen"
        );
        assert!(events.iter().all(|e| e.snapshot.outputs == 0));
        assert!(events.iter().all(|e| e.snapshot.inputs == 0));
    }

    #[test]
    fn bad_switch_index_is_reported() {
        let (mut session, tx) = LiveSession::new(&demo(), false).unwrap();
        let (reply_tx, reply_rx) = mpsc::channel();
        tx.send(Command::SetSwitch {
            index: 9,
            on: true,
            reply: Some(reply_tx),
        });
        session.step_to(10).unwrap();
        assert!(reply_rx.recv().unwrap().is_err());
    }

    #[test]
    fn replayed_commands_match_batch_trace() {
        let valid = demo();
        let batch = run_end_to_end(&valid.run).unwrap();

        let (mut session, tx) = LiveSession::new(&valid, false).unwrap();
        for s in &valid.run.stimuli {
            session.step_to(s.time).unwrap();
            tx.set_switch(s.switch, s.on);
        }
        session.step_to(valid.run.duration).unwrap();
        let live = session.finish();
        assert_eq!(live.trace.to_jsonl(), batch.trace.to_jsonl());
        assert_eq!(live.metrics, batch.metrics);
    }

    #[test]
    fn scripted_replay_matches_batch_trace() {
        let valid = demo();
        let batch = run_end_to_end(&valid.run).unwrap();
        let (mut session, _tx) = LiveSession::new(&valid, true).unwrap();
        // uneven step sizes, as wall-clock pacing would produce
        let mut t = 0;
        let mut step = 1;
        while t < valid.run.duration {
            t = (t + step).min(valid.run.duration);
            session.step_to(t).unwrap();
            step = step * 3 % 77_777 + 1;
        }
        assert_eq!(session.finish().trace.to_jsonl(), batch.trace.to_jsonl());
    }
}
