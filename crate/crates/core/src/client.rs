//! Client side of the bridge protocol.
//!
//! [`ClientConnection`] hides the framing and the reply automaton: one call
//! to [`ClientConnection::run_command`] sends a command and consumes the
//! whole reply up to READY. Printed output can be observed as it streams in
//! and is also collected. Server-reported failures surface as
//! [`ClientError::Bridge`] and leave the connection usable.

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::time::Duration;

use thiserror::Error;

use crate::protocol::{read_message, write_message, FrameError, Kind, Message, PROTOCOL_VERSION};
use crate::sexpr::{parse_sexpr, SExpr};

pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientOptions {
    pub connect_timeout: Duration,
    /// Applies while waiting for any server message; `None` waits forever.
    pub read_timeout: Option<Duration>,
}

impl Default for ClientOptions {
    fn default() -> ClientOptions {
        ClientOptions {
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
            read_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sexpr,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    AwaitingHello,
    Ready,
    InFlight,
    Dead,
}

/// Parsed HELLO body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerInfo {
    pub version: u32,
    pub session_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientOutcome {
    /// Canonical S-expression text, or JSON text in [`Mode::Json`].
    pub value_text: String,
    /// All printed output of the command.
    pub stdout: String,
    pub mode: Mode,
}

/// An error reported by the server for one command.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BridgeError {
    /// The ERROR body, verbatim.
    pub message: String,
}

impl fmt::Display for BridgeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for BridgeError {}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect { endpoint: String, source: io::Error },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Bridge(#[from] BridgeError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("connection closed")]
    ConnectionClosed,
    #[error("command text is empty")]
    EmptyCommand,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ClientError {
    pub fn as_bridge_error(&self) -> Option<&BridgeError> {
        match self {
            ClientError::Bridge(e) => Some(e),
            _ => None,
        }
    }
}

pub struct ClientConnection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    socket: Option<TcpStream>,
    state: ConnectionState,
    server_info: Option<ServerInfo>,
    last_error: Option<String>,
}

impl fmt::Debug for ClientConnection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientConnection")
            .field("state", &self.state)
            .field("server_info", &self.server_info)
            .field("last_error", &self.last_error)
            .finish_non_exhaustive()
    }
}

/// Connects with default options.
pub fn connect(endpoint: &str) -> Result<ClientConnection, ClientError> {
    ClientConnection::connect(endpoint, ClientOptions::default())
}

fn parse_hello(body: &[u8]) -> Result<ServerInfo, String> {
    let text = std::str::from_utf8(body).map_err(|_| "HELLO body is not UTF-8".to_string())?;
    let value = parse_sexpr(text).map_err(|e| format!("unreadable HELLO body: {e}"))?;
    let bad = || format!("unexpected HELLO body {text}");
    let items = value.list_items().ok_or_else(bad)?;
    match items.as_slice() {
        [tag, SExpr::Integer(version), SExpr::String(name)] if tag.is_symbol("bridge") => {
            let version = u32::try_from(version).map_err(|_| bad())?;
            if version != PROTOCOL_VERSION {
                return Err(format!(
                    "unsupported protocol version {version} (expected {PROTOCOL_VERSION})"
                ));
            }
            Ok(ServerInfo {
                version,
                session_name: name.to_string(),
            })
        }
        _ => Err(bad()),
    }
}

impl ClientConnection {
    pub fn connect(endpoint: &str, options: ClientOptions) -> Result<ClientConnection, ClientError> {
        let connect_err = |source| ClientError::Connect {
            endpoint: endpoint.to_string(),
            source,
        };
        let addrs = endpoint.to_socket_addrs().map_err(connect_err)?;
        let mut last = io::Error::new(io::ErrorKind::NotFound, "no addresses resolved");
        let mut stream = None;
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, options.connect_timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last = e,
            }
        }
        let stream = stream.ok_or_else(|| connect_err(last))?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(options.read_timeout)?;
        let reader = BufReader::new(stream.try_clone()?);
        let writer = stream.try_clone()?;
        let mut conn = ClientConnection::new(Box::new(reader), Box::new(writer));
        conn.socket = Some(stream);
        conn.handshake()?;
        Ok(conn)
    }

    /// Runs the handshake over an arbitrary duplex byte channel.
    pub fn over<R, W>(reader: R, writer: W) -> Result<ClientConnection, ClientError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let mut conn = ClientConnection::new(Box::new(BufReader::new(reader)), Box::new(writer));
        conn.handshake()?;
        Ok(conn)
    }

    fn new(reader: Box<dyn BufRead + Send>, writer: Box<dyn Write + Send>) -> ClientConnection {
        ClientConnection {
            reader,
            writer,
            socket: None,
            state: ConnectionState::AwaitingHello,
            server_info: None,
            last_error: None,
        }
    }

    fn handshake(&mut self) -> Result<(), ClientError> {
        let hello = match self.next_message() {
            Ok(m) => m,
            Err(e) => return Err(self.fail_handshake(e.to_string())),
        };
        if hello.kind != Kind::Hello {
            return Err(self.fail_handshake(format!("expected HELLO, got {}", hello.kind)));
        }
        let info = parse_hello(&hello.body).map_err(|e| self.fail_handshake(e))?;
        match self.next_message() {
            Ok(m) if m.kind == Kind::Ready => {}
            Ok(m) => return Err(self.fail_handshake(format!("expected READY, got {}", m.kind))),
            Err(e) => return Err(self.fail_handshake(e.to_string())),
        }
        self.server_info = Some(info);
        self.state = ConnectionState::Ready;
        Ok(())
    }

    fn fail_handshake(&mut self, reason: String) -> ClientError {
        self.kill(&reason);
        ClientError::Handshake(reason)
    }

    pub fn state(&self) -> ConnectionState {
        self.state
    }

    pub fn server_info(&self) -> Option<&ServerInfo> {
        self.server_info.as_ref()
    }

    /// Text of the most recent failure, server-reported or local.
    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    fn next_message(&mut self) -> Result<Message, ClientError> {
        match read_message(&mut self.reader) {
            Ok(Some(m)) => Ok(m),
            Ok(None) => Err(ClientError::ConnectionClosed),
            Err(FrameError::Io(e)) => Err(ClientError::Io(e)),
            Err(e) => Err(ClientError::Protocol(e.to_string())),
        }
    }

    fn kill(&mut self, reason: &str) {
        self.last_error = Some(reason.to_string());
        self.state = ConnectionState::Dead;
        if let Some(socket) = &self.socket {
            let _ = socket.shutdown(Shutdown::Both);
        }
    }

    fn dead(&mut self, err: ClientError) -> ClientError {
        self.kill(&err.to_string());
        err
    }

    /// Sends `command_text` verbatim and consumes the full reply.
    ///
    /// `on_stdout` sees each printed chunk as soon as it arrives, before the
    /// next message is read.
    pub fn run_command(
        &mut self,
        command_text: &str,
        mode: Mode,
        mut on_stdout: Option<&mut dyn FnMut(&str)>,
    ) -> Result<ClientOutcome, ClientError> {
        match self.state {
            ConnectionState::Ready => {}
            ConnectionState::Dead => return Err(ClientError::ConnectionClosed),
            other => {
                return Err(ClientError::Protocol(format!(
                    "cannot send a command in state {other:?}"
                )))
            }
        }
        if command_text.trim().is_empty() {
            return Err(ClientError::EmptyCommand);
        }
        let kind = match mode {
            Mode::Sexpr => Kind::Command,
            Mode::Json => Kind::CommandJson,
        };
        if let Err(e) = write_message(&mut self.writer, &Message::new(kind, command_text)) {
            return Err(self.dead(ClientError::Io(e)));
        }
        self.state = ConnectionState::InFlight;

        let expected_return = match mode {
            Mode::Sexpr => Kind::Return,
            Mode::Json => Kind::ReturnJson,
        };
        let mut stdout = String::new();
        let result = loop {
            let msg = self.next_message().map_err(|e| self.dead(e))?;
            let text = match String::from_utf8(msg.body) {
                Ok(t) => t,
                Err(_) => {
                    let e = ClientError::Protocol(format!("{} body is not UTF-8", msg.kind));
                    return Err(self.dead(e));
                }
            };
            match msg.kind {
                Kind::Stdout => {
                    if let Some(cb) = on_stdout.as_mut() {
                        cb(&text);
                    }
                    stdout.push_str(&text);
                }
                k if k == expected_return => break Ok(text),
                Kind::Error => break Err(text),
                other => {
                    let e = ClientError::Protocol(format!("unexpected {other} while awaiting reply"));
                    return Err(self.dead(e));
                }
            }
        };

        match self.next_message().map_err(|e| self.dead(e))? {
            m if m.kind == Kind::Ready => self.state = ConnectionState::Ready,
            m => {
                let e = ClientError::Protocol(format!("expected READY, got {}", m.kind));
                return Err(self.dead(e));
            }
        }

        match result {
            Ok(value_text) => Ok(ClientOutcome {
                value_text,
                stdout,
                mode,
            }),
            Err(message) => {
                self.last_error = Some(message.clone());
                Err(ClientError::Bridge(BridgeError { message }))
            }
        }
    }

    /// Closes the transport. Idempotent.
    pub fn close(&mut self) {
        if self.state != ConnectionState::Dead {
            let _ = self.writer.flush();
            if let Some(socket) = &self.socket {
                let _ = socket.shutdown(Shutdown::Both);
            }
            self.state = ConnectionState::Dead;
        }
    }
}

impl Drop for ClientConnection {
    fn drop(&mut self) {
        self.close();
    }
}
