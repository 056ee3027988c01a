#![allow(dead_code)]

use std::io::{BufReader, Write};
use std::net::{SocketAddr, TcpStream};

use bridge_core::json::JsonValue;
use bridge_core::protocol::{encode_message, read_message, Kind, Message};
use bridge_core::server::{shared_evaluator, RunningServer, Server, ServerConfig};
use bridge_core::sexpr::{is_valid_symbol_name, SExpr};
use bridge_core::Session;
use num_bigint::BigInt;
use rand::Rng;

pub fn loopback_config() -> ServerConfig {
    ServerConfig {
        tcp_listen: Some("127.0.0.1:0".into()),
        ws_listen: Some("127.0.0.1:0".into()),
        session_name: "test-session".into(),
        ..ServerConfig::default()
    }
}

pub fn start_with(config: ServerConfig) -> RunningServer {
    Server::bind(config, shared_evaluator(Session::new()))
        .expect("bind")
        .spawn()
}

pub fn start() -> RunningServer {
    start_with(loopback_config())
}

pub fn endpoint(server: &RunningServer) -> String {
    server.tcp_addr().unwrap().to_string()
}

/// A bare protocol speaker that records every server message verbatim.
pub struct RawClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pub transcript: Vec<Message>,
    pub raw: Vec<Vec<u8>>,
}

impl RawClient {
    pub fn connect(addr: SocketAddr) -> RawClient {
        let stream = TcpStream::connect(addr).unwrap();
        RawClient {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
            transcript: Vec::new(),
            raw: Vec::new(),
        }
    }

    pub fn read(&mut self) -> Option<Message> {
        let msg = read_message(&mut self.reader).unwrap()?;
        self.raw.push(encode_message(&msg));
        self.transcript.push(msg.clone());
        Some(msg)
    }

    pub fn read_greeting(&mut self) -> (Message, Message) {
        (self.read().unwrap(), self.read().unwrap())
    }

    pub fn send(&mut self, kind: Kind, body: &str) {
        self.writer
            .write_all(&encode_message(&Message::new(kind, body)))
            .unwrap();
    }

    /// Sends one command and reads its full reply, READY included.
    pub fn command(&mut self, kind: Kind, body: &str) -> Vec<Message> {
        self.send(kind, body);
        let mut reply = Vec::new();
        loop {
            let msg = self.read().expect("server closed mid-reply");
            let done = msg.kind == Kind::Ready;
            reply.push(msg);
            if done {
                return reply;
            }
        }
    }
}

/// Checks `HELLO READY (STDOUT* (RETURN|RETURN_JSON|ERROR) READY)*` against
/// the kinds of the commands that were sent, in order.
pub fn check_transcript(msgs: &[Message], commands: &[Kind]) -> Result<(), String> {
    let kinds: Vec<Kind> = msgs.iter().map(|m| m.kind).collect();
    let mut i = 0;
    let expect = |want: &[Kind], i: &mut usize| -> Result<Kind, String> {
        match kinds.get(*i) {
            Some(k) if want.contains(k) => {
                *i += 1;
                Ok(*k)
            }
            other => Err(format!("position {}: expected one of {want:?}, got {other:?}", *i)),
        }
    };
    expect(&[Kind::Hello], &mut i)?;
    expect(&[Kind::Ready], &mut i)?;
    for (n, cmd) in commands.iter().enumerate() {
        let final_kind = match cmd {
            Kind::Command => Kind::Return,
            Kind::CommandJson => Kind::ReturnJson,
            other => return Err(format!("not a command kind: {other}")),
        };
        while kinds.get(i) == Some(&Kind::Stdout) {
            i += 1;
        }
        expect(&[final_kind, Kind::Error], &mut i).map_err(|e| format!("command {n}: {e}"))?;
        expect(&[Kind::Ready], &mut i).map_err(|e| format!("command {n}: {e}"))?;
    }
    if i != kinds.len() {
        return Err(format!("{} trailing messages", kinds.len() - i));
    }
    Ok(())
}

const STRING_POOL: &[&str] = &["", "a", "hi there", "q\"uote", "back\\slash", "new\nline", "é漢🦀", "(x . y)", "\t"];
const SYMBOL_POOL: &[&str] = &["a", "foo", "+", "-", "x1", "1x", "a.b", "..", "'q", "é", ":k", "T", "NIL", "kebab-case"];

pub fn random_atom<R: Rng>(rng: &mut R) -> SExpr {
    match rng.gen_range(0..6) {
        0 => SExpr::int(rng.gen_range(-1000i64..1000)),
        1 => {
            let digits: String = (0..rng.gen_range(19..40))
                .map(|_| char::from(b'0' + rng.gen_range(0..10)))
                .collect();
            let mut n: BigInt = digits.parse().unwrap();
            if rng.gen_bool(0.5) {
                n = -n;
            }
            SExpr::Integer(n)
        }
        2 => SExpr::string(STRING_POOL[rng.gen_range(0..STRING_POOL.len())]),
        3 => {
            let len = rng.gen_range(0..12);
            let s: String = (0..len)
                .map(|_| match rng.gen_range(0..4) {
                    0 => rng.gen_range(' '..='~'),
                    1 => ['"', '\\', '\n', '\0'][rng.gen_range(0..4)],
                    2 => rng.gen_range('\u{a0}'..='\u{2fff}'),
                    _ => rng.gen_range('a'..='z'),
                })
                .collect();
            SExpr::string(&s)
        }
        4 => SExpr::symbol(SYMBOL_POOL[rng.gen_range(0..SYMBOL_POOL.len())]).unwrap(),
        _ => loop {
            let len = rng.gen_range(1..8);
            let name: String = (0..len).map(|_| rng.gen_range('!'..='~')).collect();
            if is_valid_symbol_name(&name) {
                break SExpr::symbol(&name).unwrap();
            }
        },
    }
}

/// Random tree of depth at most `depth` (an atom has depth 1).
pub fn random_tree<R: Rng>(rng: &mut R, depth: usize, allow_improper: bool) -> SExpr {
    if depth <= 1 || rng.gen_bool(0.35) {
        return random_atom(rng);
    }
    let len = rng.gen_range(0..4);
    let items: Vec<SExpr> = (0..len)
        .map(|_| random_tree(rng, depth - 1, allow_improper))
        .collect();
    let tail = if allow_improper && len > 0 && rng.gen_bool(0.3) {
        random_atom(rng)
    } else {
        SExpr::nil()
    };
    if len == 0 && allow_improper && rng.gen_bool(0.3) {
        return SExpr::cons(random_tree(rng, depth - 1, true), random_tree(rng, depth - 1, true));
    }
    SExpr::list_with_tail(items, tail)
}

pub fn depth(value: &SExpr) -> usize {
    match value.as_pair() {
        None => 1,
        Some(cell) => (1 + depth(cell.car())).max(depth(cell.cdr())),
    }
}

/// Structural conversion for comparing against a parsed JSON document.
pub fn to_serde(value: &JsonValue) -> serde_json::Value {
    match value {
        JsonValue::Null => serde_json::Value::Null,
        JsonValue::Bool(b) => serde_json::Value::Bool(*b),
        JsonValue::Number(n) => serde_json::Value::Number(
            serde_json::from_str::<serde_json::Number>(&n.to_string()).unwrap(),
        ),
        JsonValue::String(s) => serde_json::Value::String(s.clone()),
        JsonValue::Array(items) => serde_json::Value::Array(items.iter().map(to_serde).collect()),
    }
}
