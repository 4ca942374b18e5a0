//! WebSocket front end for a [`LiveSession`].
//!
//! One thread owns the simulation and paces it against the wall clock.
//! Each client connection gets its own thread, which talks to the
//! simulation only through the command queue and receives snapshot copies
//! back.

use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::service::live::{Command, CommandSender, Event, LiveSession};
use crate::service::protocol::{
    decode_request, ErrorCode, Outgoing, Request, Response, PROTOCOL_VERSION,
};
use crate::service::scenario::{ScenarioError, ValidScenario};
use crate::service::ServiceError;
use crate::simkernel::Micros;

const POLL: Duration = Duration::from_millis(20);
const SIM_TICK: Duration = Duration::from_millis(1);
const REPLY_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeOptions {
    /// 0 asks the OS for a free port.
    pub port: u16,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    /// Also apply the scenario's scripted stimuli.
    pub replay_stimuli: bool,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            port: 8765,
            time_scale: 1.0,
            replay_stimuli: false,
        }
    }
}

pub struct Server {
    listener: TcpListener,
    session: LiveSession,
    commands: CommandSender,
    time_scale: f64,
}

impl Server {
    /// Validates the options and binds 127.0.0.1. Fails immediately if the
    /// port is taken.
    pub fn bind(scenario: &ValidScenario, options: ServeOptions) -> Result<Self, ServiceError> {
        if !(options.time_scale.is_finite() && options.time_scale > 0.0) {
            return Err(ScenarioError::Invalid {
                field: "time_scale".into(),
                message: format!("{} must be a positive number", options.time_scale),
            }
            .into());
        }
        let (session, commands) = LiveSession::new(scenario, options.replay_stimuli)?;
        let listener =
            TcpListener::bind(("127.0.0.1", options.port)).map_err(|source| ServiceError::Io {
                context: format!("cannot listen on 127.0.0.1:{}", options.port),
                source,
            })?;
        Ok(Server {
            listener,
            session,
            commands,
            time_scale: options.time_scale,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener
            .local_addr()
            .expect("bound listener has an address")
    }

    /// Starts the simulation and accept threads.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        self.listener.set_nonblocking(true)?;

        let sim = {
            let stop = stop.clone();
            let mut session = self.session;
            let scale = self.time_scale;
            thread::Builder::new()
                .name("wplc-sim".into())
                .spawn(move || {
                    let start = Instant::now();
                    while !stop.load(Ordering::Relaxed) {
                        let target = (start.elapsed().as_secs_f64() * scale * 1e6) as Micros;
                        if let Err(e) = session.step_to(target) {
                            eprintln!("simulation stopped: {e}");
                            break;
                        }
                        thread::sleep(SIM_TICK);
                    }
                })?
        };

        let accept = {
            let stop = stop.clone();
            let listener = self.listener;
            let commands = self.commands;
            thread::Builder::new()
                .name("wplc-accept".into())
                .spawn(move || {
                    let mut clients = Vec::new();
                    while !stop.load(Ordering::Relaxed) {
                        match listener.accept() {
                            Ok((stream, _)) => {
                                let stop = stop.clone();
                                let commands = commands.clone();
                                clients.push(thread::spawn(move || {
                                    if let Err(e) = serve_client(stream, commands, &stop) {
                                        eprintln!("client dropped: {e}");
                                    }
                                }));
                            }
                            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                            Err(e) => {
                                eprintln!("accept failed: {e}");
                                thread::sleep(POLL);
                            }
                        }
                        clients.retain(|c: &JoinHandle<()>| !c.is_finished());
                    }
                    for c in clients {
                        let _ = c.join();
                    }
                })?
        };

        Ok(ServerHandle {
            addr,
            stop,
            threads: vec![sim, accept],
        })
    }

    /// Serves until the process is terminated.
    pub fn run(self) -> io::Result<()> {
        let handle = self.spawn()?;
        for t in handle.threads {
            let _ = t.join();
        }
        Ok(())
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    /// Stops every thread and waits for them.
    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

#[allow(clippy::result_large_err)]
fn send(ws: &mut WebSocket<TcpStream>, message: &Outgoing) -> tungstenite::Result<()> {
    ws.send(Message::text(message.to_json()))
}

#[allow(clippy::result_large_err)]
fn serve_client(
    stream: TcpStream,
    commands: CommandSender,
    stop: &AtomicBool,
) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(io::Error::new(
            ErrorKind::WouldBlock,
            "handshake interrupted",
        )),
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    send(
        &mut ws,
        &Outgoing::new(
            None,
            Response::Hello {
                server: format!("wplc {}", env!("CARGO_PKG_VERSION")),
                versions: vec![PROTOCOL_VERSION],
            },
        ),
    )?;

    let mut events: Option<Receiver<Event>> = None;
    while !stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = handle(&text, &commands, &mut events);
                send(&mut ws, &reply)?;
            }
            Ok(Message::Binary(_)) => {
                send(
                    &mut ws,
                    &Outgoing::error(
                        None,
                        ErrorCode::BadRequest,
                        "binary frames are not accepted",
                    ),
                )?;
            }
            Ok(Message::Close(_)) => break,
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        if let Some(rx) = &events {
            loop {
                match rx.try_recv() {
                    Ok(Event { seq, snapshot }) => {
                        send(
                            &mut ws,
                            &Outgoing::new(None, Response::Event { seq, snapshot }),
                        )?;
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => {
                        events = None;
                        break;
                    }
                }
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

fn handle(text: &str, commands: &CommandSender, events: &mut Option<Receiver<Event>>) -> Outgoing {
    let incoming = match decode_request(text) {
        Ok(incoming) => incoming,
        Err(reply) => return reply,
    };
    let id = incoming.id;
    let unavailable = || Outgoing::error(id, ErrorCode::Unavailable, "simulation is not running");
    match incoming.request {
        Request::Snapshot => {
            let (tx, rx) = mpsc::channel();
            if !commands.send(Command::Snapshot(tx)) {
                return unavailable();
            }
            match rx.recv_timeout(REPLY_TIMEOUT) {
                Ok(snapshot) => Outgoing::new(id, Response::Snapshot { snapshot }),
                Err(_) => unavailable(),
            }
        }
        Request::SetSwitch { index, on } => {
            let (tx, rx) = mpsc::channel();
            let command = Command::SetSwitch {
                index,
                on,
                reply: Some(tx),
            };
            if !commands.send(command) {
                return unavailable();
            }
            match rx.recv_timeout(REPLY_TIMEOUT) {
                Ok(Ok(applied_at_us)) => Outgoing::new(id, Response::Ack { applied_at_us }),
                Ok(Err(message)) => Outgoing::error(id, ErrorCode::Rejected, message),
                Err(_) => unavailable(),
            }
        }
        Request::Subscribe => {
            let (tx, rx) = mpsc::channel();
            if !commands.send(Command::Subscribe(tx)) {
                return unavailable();
            }
            *events = Some(rx);
            Outgoing::new(id, Response::Subscribed)
        }
    }
}
