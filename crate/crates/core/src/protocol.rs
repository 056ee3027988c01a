//! Wire format.
//!
//! Every message is framed as
//!
//! ```text
//! <KIND> <LEN>\n<BODY>\n
//! ```
//!
//! where `KIND` is one of the upper-case kind names, `LEN` is the decimal byte
//! length of `BODY`, and the trailing newline is mandatory. Bodies are opaque
//! bytes and are never escaped.
//!
//! Over WebSocket the same messages travel one per text frame as
//! `{"kind":"<KIND>","body":"<body text>"}`.

use std::fmt;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Protocol version announced in HELLO.
pub const PROTOCOL_VERSION: u32 = 1;

/// Longest legal header line, newline included.
const MAX_HEADER: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Hello,
    Ready,
    Return,
    ReturnJson,
    Stdout,
    Error,
    Command,
    CommandJson,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::Hello,
        Kind::Ready,
        Kind::Return,
        Kind::ReturnJson,
        Kind::Stdout,
        Kind::Error,
        Kind::Command,
        Kind::CommandJson,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Hello => "HELLO",
            Kind::Ready => "READY",
            Kind::Return => "RETURN",
            Kind::ReturnJson => "RETURN_JSON",
            Kind::Stdout => "STDOUT",
            Kind::Error => "ERROR",
            Kind::Command => "COMMAND",
            Kind::CommandJson => "COMMAND_JSON",
        }
    }

    pub fn parse(name: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == name)
    }

    /// True for kinds only the server sends.
    pub fn is_server_to_client(self) -> bool {
        !self.is_client_to_server()
    }

    pub fn is_client_to_server(self) -> bool {
        matches!(self, Kind::Command | Kind::CommandJson)
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One framed protocol unit.
#[derive(Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: Kind,
    pub body: Vec<u8>,
}

impl Message {
    pub fn new(kind: Kind, body: impl Into<Vec<u8>>) -> Message {
        Message {
            kind,
            body: body.into(),
        }
    }

    pub fn empty(kind: Kind) -> Message {
        Message::new(kind, Vec::new())
    }

    pub fn body_str(&self) -> Result<&str, std::str::Utf8Error> {
        std::str::from_utf8(&self.body)
    }
}

impl fmt::Debug for Message {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({:?})", self.kind, String::from_utf8_lossy(&self.body))
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("invalid body length {0:?}")]
    InvalidLength(String),
    #[error("malformed header {0:?}")]
    MalformedHeader(String),
    #[error("header line too long")]
    HeaderTooLong,
    #[error("missing trailing newline after body")]
    MissingTrailingNewline,
    #[error("stream ended mid-message")]
    UnexpectedEof,
    #[error("body is not valid UTF-8")]
    NonUtf8Body,
    #[error("malformed websocket envelope: {0}")]
    BadEnvelope(String),
}

/// Result of a bounded read: either a message, or the header of one whose
/// body exceeded the limit and was skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Message(Message),
    Oversized { kind: Kind, len: usize },
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let header = format!("{} {}\n", msg.kind.as_str(), msg.body.len());
    let mut out = Vec::with_capacity(header.len() + msg.body.len() + 1);
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&msg.body);
    out.push(b'\n');
    out
}

/// Writes one message with a single `write_all` and flushes.
pub fn write_message<W: Write + ?Sized>(writer: &mut W, msg: &Message) -> io::Result<()> {
    writer.write_all(&encode_message(msg))?;
    writer.flush()
}

fn parse_header(line: &[u8]) -> Result<(Kind, usize), FrameError> {
    let text = std::str::from_utf8(line)
        .map_err(|_| FrameError::MalformedHeader(String::from_utf8_lossy(line).into_owned()))?;
    let Some((kind, len)) = text.split_once(' ') else {
        return Err(FrameError::MalformedHeader(text.to_string()));
    };
    let kind = Kind::parse(kind).ok_or_else(|| FrameError::UnknownKind(kind.to_string()))?;
    if len.is_empty() || !len.bytes().all(|b| b.is_ascii_digit()) {
        return Err(FrameError::InvalidLength(len.to_string()));
    }
    let len = len
        .parse::<usize>()
        .map_err(|_| FrameError::InvalidLength(len.to_string()))?;
    Ok((kind, len))
}

/// Reads a header line. `Ok(None)` means the stream ended cleanly at a
/// message boundary.
fn read_header<R: BufRead + ?Sized>(reader: &mut R) -> Result<Option<(Kind, usize)>, FrameError> {
    let mut line = Vec::with_capacity(32);
    let n = reader
        .take(MAX_HEADER as u64)
        .read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(if n >= MAX_HEADER {
            FrameError::HeaderTooLong
        } else {
            FrameError::UnexpectedEof
        });
    }
    line.pop();
    parse_header(&line).map(Some)
}

fn read_trailer<R: Read + ?Sized>(reader: &mut R) -> Result<(), FrameError> {
    let mut nl = [0u8; 1];
    match reader.read_exact(&mut nl) {
        Ok(()) if nl[0] == b'\n' => Ok(()),
        Ok(()) => Err(FrameError::MissingTrailingNewline),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(FrameError::UnexpectedEof),
        Err(e) => Err(e.into()),
    }
}

fn read_body<R: Read + ?Sized>(reader: &mut R, len: usize) -> Result<Vec<u8>, FrameError> {
    // Grow as bytes arrive rather than trusting the announced length up front.
    let mut body = Vec::with_capacity(len.min(64 * 1024));
    let got = reader.take(len as u64).read_to_end(&mut body)?;
    if got < len {
        return Err(FrameError::UnexpectedEof);
    }
    Ok(body)
}

/// Reads one message. Returns `Ok(None)` on a clean end of stream.
pub fn read_message<R: BufRead + ?Sized>(reader: &mut R) -> Result<Option<Message>, FrameError> {
    let Some((kind, len)) = read_header(reader)? else {
        return Ok(None);
    };
    let body = read_body(reader, len)?;
    read_trailer(reader)?;
    Ok(Some(Message { kind, body }))
}

/// Like [`read_message`], but bodies longer than `max_body` are discarded
/// and reported as [`Frame::Oversized`]; the stream stays at a boundary.
pub fn read_frame<R: BufRead + ?Sized>(
    reader: &mut R,
    max_body: usize,
) -> Result<Option<Frame>, FrameError> {
    let Some((kind, len)) = read_header(reader)? else {
        return Ok(None);
    };
    if len > max_body {
        let skipped = io::copy(&mut reader.take(len as u64), &mut io::sink())?;
        if skipped < len as u64 {
            return Err(FrameError::UnexpectedEof);
        }
        read_trailer(reader)?;
        return Ok(Some(Frame::Oversized { kind, len }));
    }
    let body = read_body(reader, len)?;
    read_trailer(reader)?;
    Ok(Some(Frame::Message(Message { kind, body })))
}

/// Decodes the first message in `bytes`, returning it and the number of
/// bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let mut cursor = io::Cursor::new(bytes);
    match read_message(&mut cursor)? {
        Some(msg) => Ok((msg, cursor.position() as usize)),
        None => Err(FrameError::UnexpectedEof),
    }
}

#[derive(Serialize, Deserialize)]
struct Envelope<'a> {
    kind: &'a str,
    body: std::borrow::Cow<'a, str>,
}

/// The JSON envelope carried by one WebSocket text frame.
pub fn encode_envelope(msg: &Message) -> Result<String, FrameError> {
    let body = msg.body_str().map_err(|_| FrameError::NonUtf8Body)?;
    let env = Envelope {
        kind: msg.kind.as_str(),
        body: body.into(),
    };
    Ok(serde_json::to_string(&env).expect("envelope serialization is infallible"))
}

pub fn decode_envelope(text: &str) -> Result<Message, FrameError> {
    let env: Envelope<'_> =
        serde_json::from_str(text).map_err(|e| FrameError::BadEnvelope(e.to_string()))?;
    let kind = Kind::parse(env.kind).ok_or_else(|| FrameError::UnknownKind(env.kind.to_string()))?;
    Ok(Message::new(kind, env.body.into_owned().into_bytes()))
}
