//! The bridge server: TCP and WebSocket listeners in front of one shared
//! evaluator.
//!
//! Each accepted connection gets its own worker thread running
//! [`client_loop`]. Commands from all connections are serialized by the
//! evaluator mutex, so a long command delays other clients' commands but
//! never their connections.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::WebSocket;

use crate::eval::{Evaluator, Outcome};
use crate::json::sexpr_to_json_text;
use crate::protocol::{
    decode_envelope, encode_envelope, read_frame, write_message, Frame, FrameError, Kind, Message,
    PROTOCOL_VERSION,
};
use crate::sexpr::{parse_sexpr, print_sexpr, SExpr};

pub const DEFAULT_PORT: u16 = 55433;
pub const DEFAULT_MAX_CLIENTS: usize = 64;
pub const DEFAULT_MAX_COMMAND_BYTES: usize = 1024 * 1024;
pub const MIN_MAX_COMMAND_BYTES: usize = 1024;
/// Path of the WebSocket endpoint.
pub const WS_PATH: &str = "/bridge";

const ACCEPT_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub tcp_listen: Option<String>,
    pub ws_listen: Option<String>,
    pub session_name: String,
    pub max_clients: usize,
    pub max_command_bytes: usize,
}

impl Default for ServerConfig {
    fn default() -> ServerConfig {
        ServerConfig {
            tcp_listen: Some(format!("127.0.0.1:{DEFAULT_PORT}")),
            ws_listen: None,
            session_name: "default".to_string(),
            max_clients: DEFAULT_MAX_CLIENTS,
            max_command_bytes: DEFAULT_MAX_COMMAND_BYTES,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<(), ServerError> {
        if self.tcp_listen.is_none() && self.ws_listen.is_none() {
            return Err(ServerError::InvalidConfig(
                "at least one of the TCP or WebSocket listen addresses is required".into(),
            ));
        }
        if self.max_clients == 0 {
            return Err(ServerError::InvalidConfig("max clients must be positive".into()));
        }
        if self.max_command_bytes < MIN_MAX_COMMAND_BYTES {
            return Err(ServerError::InvalidConfig(format!(
                "max command bytes must be at least {MIN_MAX_COMMAND_BYTES}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

/// The evaluator behind its process-wide command lock.
pub type SharedEvaluator = Arc<Mutex<dyn Evaluator>>;

pub fn shared_evaluator<E: Evaluator + 'static>(evaluator: E) -> SharedEvaluator {
    Arc::new(Mutex::new(evaluator))
}

fn lock<T: ?Sized>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// HELLO body: `(bridge <version> "<session name>")`.
pub fn hello_body(session_name: &str) -> String {
    format!(
        "(bridge {PROTOCOL_VERSION} {})",
        print_sexpr(&SExpr::string(session_name))
    )
}

/// A duplex, message-at-a-time connection to one client.
pub trait MessageChannel {
    /// Next client frame; `Ok(None)` when the peer closed cleanly. Bodies
    /// longer than `max_body` come back as [`Frame::Oversized`].
    fn recv(&mut self, max_body: usize) -> Result<Option<Frame>, FrameError>;
    /// Sends and flushes one message.
    fn send(&mut self, msg: &Message) -> Result<(), FrameError>;
}

/// Length-prefixed framing over a TCP stream.
pub struct TcpChannel {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpChannel {
    pub fn new(stream: TcpStream) -> io::Result<TcpChannel> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(TcpChannel {
            reader: BufReader::new(stream),
            writer,
        })
    }
}

impl MessageChannel for TcpChannel {
    fn recv(&mut self, max_body: usize) -> Result<Option<Frame>, FrameError> {
        read_frame(&mut self.reader, max_body)
    }

    fn send(&mut self, msg: &Message) -> Result<(), FrameError> {
        write_message(&mut self.writer, msg).map_err(FrameError::from)
    }
}

/// JSON envelopes, one per WebSocket text frame.
pub struct WsChannel {
    socket: WebSocket<TcpStream>,
}

impl WsChannel {
    /// Performs the server side of the WebSocket handshake; only
    /// [`WS_PATH`] is accepted.
    pub fn accept(stream: TcpStream) -> Result<WsChannel, FrameError> {
        stream.set_nodelay(true)?;
        let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
            if req.uri().path() == WS_PATH {
                Ok(resp)
            } else {
                let mut refusal = ErrorResponse::new(Some(format!("use {WS_PATH}")));
                *refusal.status_mut() = StatusCode::NOT_FOUND;
                Err(refusal)
            }
        };
        let socket = tungstenite::accept_hdr(stream, check_path)
            .map_err(|e| FrameError::BadEnvelope(format!("websocket handshake failed: {e}")))?;
        Ok(WsChannel { socket })
    }
}

fn ws_error(e: tungstenite::Error) -> FrameError {
    match e {
        tungstenite::Error::Io(e) => FrameError::Io(e),
        other => FrameError::BadEnvelope(other.to_string()),
    }
}

impl MessageChannel for WsChannel {
    fn recv(&mut self, max_body: usize) -> Result<Option<Frame>, FrameError> {
        loop {
            match self.socket.read() {
                Ok(tungstenite::Message::Text(text)) => {
                    let msg = decode_envelope(&text)?;
                    if msg.body.len() > max_body {
                        return Ok(Some(Frame::Oversized {
                            kind: msg.kind,
                            len: msg.body.len(),
                        }));
                    }
                    return Ok(Some(Frame::Message(msg)));
                }
                Ok(tungstenite::Message::Binary(_)) => {
                    return Err(FrameError::BadEnvelope("binary frames are not accepted".into()))
                }
                Ok(_) => continue,
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => {
                    return Ok(None)
                }
                Err(e) => return Err(ws_error(e)),
            }
        }
    }

    fn send(&mut self, msg: &Message) -> Result<(), FrameError> {
        let text = encode_envelope(msg)?;
        self.socket
            .send(tungstenite::Message::Text(text))
            .map_err(ws_error)
    }
}

/// Per-connection settings for [`client_loop`].
#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub session_name: String,
    pub max_command_bytes: usize,
}

impl From<&ServerConfig> for LoopSettings {
    fn from(config: &ServerConfig) -> LoopSettings {
        LoopSettings {
            session_name: config.session_name.clone(),
            max_command_bytes: config.max_command_bytes,
        }
    }
}

/// Runs the protocol on one connection until the peer closes or a framing
/// error occurs.
pub fn client_loop<C: MessageChannel + ?Sized>(
    channel: &mut C,
    evaluator: &SharedEvaluator,
    settings: &LoopSettings,
) -> Result<(), FrameError> {
    run_connection(channel, evaluator, settings, None)
}

fn run_connection<C: MessageChannel + ?Sized>(
    channel: &mut C,
    evaluator: &SharedEvaluator,
    settings: &LoopSettings,
    gate: Option<&ConnGate>,
) -> Result<(), FrameError> {
    channel.send(&Message::new(Kind::Hello, hello_body(&settings.session_name)))?;
    channel.send(&Message::empty(Kind::Ready))?;
    loop {
        let Some(frame) = channel.recv(settings.max_command_bytes)? else {
            return Ok(());
        };
        let (kind, body) = match frame {
            Frame::Message(msg) if msg.kind.is_client_to_server() => (msg.kind, msg.body),
            Frame::Oversized { kind, len } if kind.is_client_to_server() => {
                if gate.is_some_and(|g| !g.begin_command()) {
                    return Ok(());
                }
                let text = format!(
                    "command of {len} bytes exceeds the limit of {} bytes",
                    settings.max_command_bytes
                );
                channel.send(&Message::new(Kind::Error, text))?;
                channel.send(&Message::empty(Kind::Ready))?;
                if gate.is_some_and(|g| !g.end_command()) {
                    return Ok(());
                }
                continue;
            }
            Frame::Message(Message { kind, .. }) | Frame::Oversized { kind, .. } => {
                return Err(FrameError::UnknownKind(format!(
                    "{kind} is not a client message"
                )));
            }
        };
        if gate.is_some_and(|g| !g.begin_command()) {
            return Ok(());
        }
        let reply = execute(channel, evaluator, kind == Kind::CommandJson, &body)?;
        channel.send(&reply)?;
        channel.send(&Message::empty(Kind::Ready))?;
        if gate.is_some_and(|g| !g.end_command()) {
            return Ok(());
        }
    }
}

/// Runs one command, streaming STDOUT as it is printed, and returns the
/// final RETURN, RETURN_JSON or ERROR message.
fn execute<C: MessageChannel + ?Sized>(
    channel: &mut C,
    evaluator: &SharedEvaluator,
    json: bool,
    body: &[u8],
) -> Result<Message, FrameError> {
    let error = |text: String| Ok(Message::new(Kind::Error, text));
    let Ok(text) = std::str::from_utf8(body) else {
        return error("command is not valid UTF-8".into());
    };
    let command = match parse_sexpr(text) {
        Ok(command) => command,
        Err(e) => return error(e.to_string()),
    };

    let mut send_failure: Option<FrameError> = None;
    let outcome = {
        let mut session = lock(evaluator);
        let mut emit = |chunk: &str| {
            if send_failure.is_none() {
                if let Err(e) = channel.send(&Message::new(Kind::Stdout, chunk)) {
                    send_failure = Some(e);
                }
            }
        };
        catch_unwind(AssertUnwindSafe(|| session.evaluate_command(&command, &mut emit)))
    };
    if let Some(e) = send_failure {
        return Err(e);
    }
    let outcome = match outcome {
        Ok(outcome) => outcome,
        Err(_) => return error("internal evaluator failure".into()),
    };

    match outcome.result {
        Outcome::Errored(message) => error(message),
        Outcome::Returned(value) if json => match sexpr_to_json_text(&value) {
            Ok(text) => Ok(Message::new(Kind::ReturnJson, text)),
            Err(e) => error(e.to_string()),
        },
        Outcome::Returned(value) => Ok(Message::new(Kind::Return, print_sexpr(&value))),
    }
}

struct ConnSlot {
    socket: TcpStream,
    busy: Mutex<bool>,
}

struct ServerState {
    shutting_down: AtomicBool,
    conns: Mutex<HashMap<u64, Arc<ConnSlot>>>,
    next_id: AtomicU64,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Ties a worker to the server's shutdown protocol: idle connections are
/// closed at once, busy ones right after their READY.
struct ConnGate {
    state: Arc<ServerState>,
    slot: Arc<ConnSlot>,
}

impl ConnGate {
    fn begin_command(&self) -> bool {
        let mut busy = lock(&self.slot.busy);
        if self.state.shutting_down.load(Ordering::SeqCst) {
            return false;
        }
        *busy = true;
        true
    }

    fn end_command(&self) -> bool {
        let mut busy = lock(&self.slot.busy);
        *busy = false;
        !self.state.shutting_down.load(Ordering::SeqCst)
    }
}

/// Requests a graceful stop of a running server.
#[derive(Clone)]
pub struct ShutdownHandle {
    state: Arc<ServerState>,
}

impl ShutdownHandle {
    pub fn shutdown(&self) {
        if self.state.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        info!("shutting down");
        let slots: Vec<Arc<ConnSlot>> = lock(&self.state.conns).values().cloned().collect();
        for slot in slots {
            let busy = lock(&slot.busy);
            if !*busy {
                let _ = slot.socket.shutdown(std::net::Shutdown::Both);
            }
        }
    }

    pub fn is_shutting_down(&self) -> bool {
        self.state.shutting_down.load(Ordering::SeqCst)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Transport {
    Tcp,
    WebSocket,
}

/// A bound, not yet running server.
pub struct Server {
    config: ServerConfig,
    evaluator: SharedEvaluator,
    tcp: Option<TcpListener>,
    ws: Option<TcpListener>,
    state: Arc<ServerState>,
}

fn bind(addr: &str) -> Result<TcpListener, ServerError> {
    let bind_err = |source| ServerError::Bind {
        addr: addr.to_string(),
        source,
    };
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(bind_err)?.collect();
    let listener = TcpListener::bind(&addrs[..]).map_err(bind_err)?;
    let local = listener.local_addr().map_err(bind_err)?;
    if !local.ip().is_loopback() {
        warn!(
            "WARNING: listening on non-loopback address {local}; there is no authentication and \
             every client that can reach it gets full control of the session"
        );
    }
    Ok(listener)
}

impl Server {
    pub fn bind(config: ServerConfig, evaluator: SharedEvaluator) -> Result<Server, ServerError> {
        config.validate()?;
        let tcp = config.tcp_listen.as_deref().map(bind).transpose()?;
        let ws = config.ws_listen.as_deref().map(bind).transpose()?;
        Ok(Server {
            config,
            evaluator,
            tcp,
            ws,
            state: Arc::new(ServerState {
                shutting_down: AtomicBool::new(false),
                conns: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(0),
                workers: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp.as_ref().and_then(|l| l.local_addr().ok())
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws.as_ref().and_then(|l| l.local_addr().ok())
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        ShutdownHandle {
            state: self.state.clone(),
        }
    }

    /// Serves until [`ShutdownHandle::shutdown`] is called, then waits for
    /// in-flight commands to finish and every connection to close.
    pub fn run(self) -> Result<(), ServerError> {
        let settings = LoopSettings::from(&self.config);
        let mut acceptors = Vec::new();
        for (listener, transport) in [(self.tcp, Transport::Tcp), (self.ws, Transport::WebSocket)] {
            let Some(listener) = listener else { continue };
            if let Ok(addr) = listener.local_addr() {
                match transport {
                    Transport::Tcp => info!("listening for TCP clients on {addr}"),
                    Transport::WebSocket => {
                        info!("listening for WebSocket clients on ws://{addr}{WS_PATH}")
                    }
                }
            }
            listener
                .set_nonblocking(true)
                .map_err(|source| ServerError::Bind {
                    addr: format!("{listener:?}"),
                    source,
                })?;
            let acceptor = Acceptor {
                listener,
                transport,
                state: self.state.clone(),
                evaluator: self.evaluator.clone(),
                settings: settings.clone(),
                max_clients: self.config.max_clients,
            };
            acceptors.push(thread::spawn(move || acceptor.run()));
        }
        for acceptor in acceptors {
            let _ = acceptor.join();
        }
        loop {
            let pending: Vec<JoinHandle<()>> = lock(&self.state.workers).drain(..).collect();
            if pending.is_empty() {
                break;
            }
            for worker in pending {
                let _ = worker.join();
            }
        }
        info!("server stopped");
        Ok(())
    }

    /// Runs the server on a background thread.
    pub fn spawn(self) -> RunningServer {
        let handle = self.shutdown_handle();
        let tcp_addr = self.tcp_addr();
        let ws_addr = self.ws_addr();
        let thread = thread::spawn(move || self.run());
        RunningServer {
            handle,
            tcp_addr,
            ws_addr,
            thread,
        }
    }
}

pub struct RunningServer {
    handle: ShutdownHandle,
    tcp_addr: Option<SocketAddr>,
    ws_addr: Option<SocketAddr>,
    thread: JoinHandle<Result<(), ServerError>>,
}

impl RunningServer {
    pub fn tcp_addr(&self) -> Option<SocketAddr> {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    pub fn shutdown_handle(&self) -> ShutdownHandle {
        self.handle.clone()
    }

    pub fn shutdown(self) -> Result<(), ServerError> {
        self.handle.shutdown();
        self.thread.join().expect("server thread panicked")
    }
}

struct Acceptor {
    listener: TcpListener,
    transport: Transport,
    state: Arc<ServerState>,
    evaluator: SharedEvaluator,
    settings: LoopSettings,
    max_clients: usize,
}

impl Acceptor {
    fn run(self) {
        while !self.state.shutting_down.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => self.admit(stream, peer),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                }
            }
        }
    }

    fn admit(&self, stream: TcpStream, peer: SocketAddr) {
        if stream.set_nonblocking(false).is_err() {
            return;
        }
        let Ok(socket) = stream.try_clone() else {
            return;
        };
        let id = self.state.next_id.fetch_add(1, Ordering::Relaxed);
        let slot = Arc::new(ConnSlot {
            socket,
            busy: Mutex::new(false),
        });
        {
            let mut conns = lock(&self.state.conns);
            if conns.len() >= self.max_clients {
                warn!("refusing {peer}: client limit of {} reached", self.max_clients);
                let _ = stream.shutdown(std::net::Shutdown::Both);
                return;
            }
            if self.state.shutting_down.load(Ordering::SeqCst) {
                return;
            }
            conns.insert(id, slot.clone());
        }
        debug!("accepted {:?} client {id} from {peer}", self.transport);

        let gate = ConnGate {
            state: self.state.clone(),
            slot,
        };
        let evaluator = self.evaluator.clone();
        let settings = self.settings.clone();
        let transport = self.transport;
        let spawned = thread::Builder::new()
            .name(format!("bridge-conn-{id}"))
            .spawn(move || {
                let result = match transport {
                    Transport::Tcp => TcpChannel::new(stream).map_err(FrameError::from).and_then(
                        |mut ch| run_connection(&mut ch, &evaluator, &settings, Some(&gate)),
                    ),
                    Transport::WebSocket => WsChannel::accept(stream).and_then(|mut ch| {
                        run_connection(&mut ch, &evaluator, &settings, Some(&gate))
                    }),
                };
                if let Err(e) = result {
                    debug!("client {id} closed: {e}");
                }
                let _ = gate.slot.socket.shutdown(std::net::Shutdown::Both);
                lock(&gate.state.conns).remove(&id);
            });
        match spawned {
            Ok(worker) => {
                let mut workers = lock(&self.state.workers);
                workers.retain(|w| !w.is_finished());
                workers.push(worker);
            }
            Err(e) => {
                warn!("cannot start worker for {peer}: {e}");
                lock(&self.state.conns).remove(&id);
            }
        }
    }
}
