//! JSON encoding of return values.
//!
//! `NIL` becomes `null`, `T` becomes `true`, integers stay integers (in full,
//! never rounded), strings and other symbols become JSON strings, and proper
//! lists become arrays. The mapping is lossy (a symbol and a string with the
//! same text encode identically) and there is no decoder. Improper lists have
//! no JSON image and are rejected.

use std::fmt;

use num_bigint::BigInt;
use thiserror::Error;

use crate::sexpr::{print_sexpr, SExpr, STACK_GROW, STACK_RED_ZONE};

/// The subset of JSON the bridge produces. Objects are never emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JsonValue {
    Null,
    Bool(bool),
    Number(BigInt),
    String(String),
    Array(Vec<JsonValue>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("value has no JSON encoding (improper list): {0}")]
pub struct UnencodableValue(pub String);

const MAX_SHOWN: usize = 200;

/// Encodes `value`, failing on the first improper list encountered.
pub fn sexpr_to_json(value: &SExpr) -> Result<JsonValue, UnencodableValue> {
    match value {
        SExpr::Integer(n) => Ok(JsonValue::Number(n.clone())),
        SExpr::String(s) => Ok(JsonValue::String(s.to_string())),
        SExpr::Symbol(s) if s.is_nil() => Ok(JsonValue::Null),
        SExpr::Symbol(s) if s.name() == "T" => Ok(JsonValue::Bool(true)),
        SExpr::Symbol(s) => Ok(JsonValue::String(s.name().to_string())),
        SExpr::Pair(_) => {
            let mut items = Vec::new();
            let mut iter = value.iter();
            for item in iter.by_ref() {
                let encoded =
                    stacker::maybe_grow(STACK_RED_ZONE, STACK_GROW, || sexpr_to_json(item))?;
                items.push(encoded);
            }
            if !iter.rest().is_nil() {
                let mut shown = print_sexpr(value);
                if shown.len() > MAX_SHOWN {
                    let mut cut = MAX_SHOWN;
                    while !shown.is_char_boundary(cut) {
                        cut -= 1;
                    }
                    shown.truncate(cut);
                    shown.push_str("...");
                }
                return Err(UnencodableValue(shown));
            }
            Ok(JsonValue::Array(items))
        }
    }
}

/// Compact JSON text: no insignificant whitespace, only mandatory escapes.
pub fn json_text(value: &JsonValue) -> String {
    let mut out = String::new();
    write_json(&mut out, value);
    out
}

/// Encodes straight to the RETURN_JSON body text.
pub fn sexpr_to_json_text(value: &SExpr) -> Result<String, UnencodableValue> {
    sexpr_to_json(value).map(|v| json_text(&v))
}

fn write_json(out: &mut String, value: &JsonValue) {
    match value {
        JsonValue::Null => out.push_str("null"),
        JsonValue::Bool(true) => out.push_str("true"),
        JsonValue::Bool(false) => out.push_str("false"),
        JsonValue::Number(n) => out.push_str(&n.to_string()),
        JsonValue::String(s) => write_json_string(out, s),
        JsonValue::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                stacker::maybe_grow(STACK_RED_ZONE, STACK_GROW, || write_json(out, item));
            }
            out.push(']');
        }
    }
}

fn write_json_string(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '\u{08}' => out.push_str("\\b"),
            '\u{0c}' => out.push_str("\\f"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

impl fmt::Display for JsonValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&json_text(self))
    }
}
