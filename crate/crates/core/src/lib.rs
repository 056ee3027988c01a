//! Embed an interactive S-expression session in a server and drive it from
//! other programs.
//!
//! The pieces, bottom up:
//!
//! * [`sexpr`]: the value universe, reader and canonical printer
//! * [`eval`]: a small deterministic evaluator with shared global state
//! * [`protocol`]: the length-prefixed message framing (and its WebSocket
//!   envelope)
//! * [`json`]: JSON encoding of return values
//! * [`server`]: TCP/WebSocket listeners, one worker per connection
//! * [`client`]: a blocking client that speaks the protocol
//!
//! ```no_run
//! use bridge_core::client::{connect, Mode};
//!
//! let mut conn = connect("127.0.0.1:55433")?;
//! let out = conn.run_command("(+ 1 2)", Mode::Sexpr, None)?;
//! assert_eq!(out.value_text, "3");
//! # Ok::<(), bridge_core::client::ClientError>(())
//! ```

pub mod client;
pub mod eval;
pub mod json;
pub mod protocol;
pub mod server;
pub mod sexpr;

pub use client::{BridgeError, ClientConnection, ClientError, ClientOptions, ClientOutcome, Mode};
pub use eval::{CommandOutcome, Evaluator, Outcome, Session};
pub use json::{sexpr_to_json, JsonValue, UnencodableValue};
pub use protocol::{decode_message, encode_message, FrameError, Kind, Message};
pub use server::{Server, ServerConfig, ServerError, SharedEvaluator};
pub use sexpr::{parse_sexpr, print_sexpr, SExpr, Symbol, SyntaxError};
