//! S-expression values, the reader, and the canonical printer.
//!
//! The value universe is deliberately small: arbitrary-precision integers,
//! strings, case-sensitive symbols and pairs. The symbol `NIL` doubles as the
//! empty list and `T` is the canonical true value.
//!
//! Grammar accepted by [`parse_sexpr`]:
//!
//! * integers: `-?[0-9]+`
//! * strings: `"..."` with `\"` and `\\` escapes (any other escaped character
//!   stands for itself)
//! * symbols: maximal runs of characters other than whitespace, `(`, `)` and
//!   `"` that are not integers and not a lone `.`
//! * lists: `( e1 e2 ... )`, with `( e1 ... . tail )` for an improper tail
//!
//! Deep and long trees are handled without exhausting the native stack:
//! the reader is iterative, the printer grows the stack on demand, and
//! equality and drop walk the tree with an explicit worklist.

use std::fmt;
use std::sync::{Arc, OnceLock};

use num_bigint::BigInt;
use thiserror::Error;

/// Maximum list nesting accepted by the reader.
pub const MAX_NESTING: usize = 10_000;

/// Stack headroom used before recursing into a `car`.
pub(crate) const STACK_RED_ZONE: usize = 128 * 1024;
pub(crate) const STACK_GROW: usize = 4 * 1024 * 1024;

/// A symbolic expression.
#[derive(Clone)]
pub enum SExpr {
    Integer(BigInt),
    String(Arc<str>),
    Symbol(Symbol),
    Pair(Arc<Cons>),
}

/// An interned-by-value symbol name. Construction validates the name so that
/// every symbol prints back to itself.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Symbol(Arc<str>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid symbol name {0:?}")]
pub struct InvalidSymbol(pub String);

fn nil_name() -> &'static Arc<str> {
    static NIL: OnceLock<Arc<str>> = OnceLock::new();
    NIL.get_or_init(|| Arc::from("NIL"))
}

fn t_name() -> &'static Arc<str> {
    static T: OnceLock<Arc<str>> = OnceLock::new();
    T.get_or_init(|| Arc::from("T"))
}

fn is_delimiter(c: char) -> bool {
    c.is_whitespace() || c == '(' || c == ')' || c == '"'
}

fn is_integer_token(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Whether `name` can be a symbol that survives a print/parse round trip.
pub fn is_valid_symbol_name(name: &str) -> bool {
    !name.is_empty() && name != "." && !name.chars().any(is_delimiter) && !is_integer_token(name)
}

impl Symbol {
    pub fn new(name: &str) -> Result<Symbol, InvalidSymbol> {
        match name {
            "NIL" => Ok(Symbol::nil()),
            "T" => Ok(Symbol::t()),
            _ if is_valid_symbol_name(name) => Ok(Symbol(Arc::from(name))),
            _ => Err(InvalidSymbol(name.to_string())),
        }
    }

    pub fn nil() -> Symbol {
        Symbol(nil_name().clone())
    }

    pub fn t() -> Symbol {
        Symbol(t_name().clone())
    }

    pub fn name(&self) -> &str {
        &self.0
    }

    pub fn is_nil(&self) -> bool {
        &*self.0 == "NIL"
    }
}

impl fmt::Debug for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A cons cell.
pub struct Cons {
    car: SExpr,
    cdr: SExpr,
}

impl Cons {
    pub fn car(&self) -> &SExpr {
        &self.car
    }

    pub fn cdr(&self) -> &SExpr {
        &self.cdr
    }
}

impl Drop for Cons {
    fn drop(&mut self) {
        // Unlink iteratively; a recursive drop overflows on long lists.
        let mut pending = vec![
            std::mem::replace(&mut self.car, SExpr::nil()),
            std::mem::replace(&mut self.cdr, SExpr::nil()),
        ];
        while let Some(value) = pending.pop() {
            if let SExpr::Pair(cell) = value {
                if let Ok(mut cell) = Arc::try_unwrap(cell) {
                    pending.push(std::mem::replace(&mut cell.car, SExpr::nil()));
                    pending.push(std::mem::replace(&mut cell.cdr, SExpr::nil()));
                }
            }
        }
    }
}

impl SExpr {
    pub fn nil() -> SExpr {
        SExpr::Symbol(Symbol::nil())
    }

    pub fn t() -> SExpr {
        SExpr::Symbol(Symbol::t())
    }

    pub fn bool(b: bool) -> SExpr {
        if b {
            SExpr::t()
        } else {
            SExpr::nil()
        }
    }

    pub fn int(n: impl Into<BigInt>) -> SExpr {
        SExpr::Integer(n.into())
    }

    pub fn string(s: &str) -> SExpr {
        SExpr::String(Arc::from(s))
    }

    pub fn symbol(name: &str) -> Result<SExpr, InvalidSymbol> {
        Symbol::new(name).map(SExpr::Symbol)
    }

    pub fn cons(car: SExpr, cdr: SExpr) -> SExpr {
        SExpr::Pair(Arc::new(Cons { car, cdr }))
    }

    /// Builds a proper list.
    pub fn list<I>(items: I) -> SExpr
    where
        I: IntoIterator<Item = SExpr>,
        I::IntoIter: DoubleEndedIterator,
    {
        SExpr::list_with_tail(items, SExpr::nil())
    }

    /// Builds `(i1 i2 ... . tail)`.
    pub fn list_with_tail<I>(items: I, tail: SExpr) -> SExpr
    where
        I: IntoIterator<Item = SExpr>,
        I::IntoIter: DoubleEndedIterator,
    {
        items
            .into_iter()
            .rev()
            .fold(tail, |acc, item| SExpr::cons(item, acc))
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, SExpr::Symbol(s) if s.is_nil())
    }

    pub fn is_atom(&self) -> bool {
        !matches!(self, SExpr::Pair(_))
    }

    pub fn as_pair(&self) -> Option<&Cons> {
        match self {
            SExpr::Pair(cell) => Some(cell),
            _ => None,
        }
    }

    pub fn as_symbol(&self) -> Option<&Symbol> {
        match self {
            SExpr::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<&BigInt> {
        match self {
            SExpr::Integer(n) => Some(n),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            SExpr::String(s) => Some(s),
            _ => None,
        }
    }

    /// True when `self` is a symbol with the given name.
    pub fn is_symbol(&self, name: &str) -> bool {
        matches!(self, SExpr::Symbol(s) if s.name() == name)
    }

    /// Walks the cdr chain: NIL or a pair whose cdr is a proper list.
    pub fn is_proper_list(&self) -> bool {
        let mut cur = self;
        loop {
            match cur {
                SExpr::Pair(cell) => cur = &cell.cdr,
                other => return other.is_nil(),
            }
        }
    }

    /// Elements of a proper list, or `None` if the list is improper.
    pub fn list_items(&self) -> Option<Vec<SExpr>> {
        let mut items = Vec::new();
        let mut cur = self;
        loop {
            match cur {
                SExpr::Pair(cell) => {
                    items.push(cell.car.clone());
                    cur = &cell.cdr;
                }
                other if other.is_nil() => return Some(items),
                _ => return None,
            }
        }
    }

    /// Iterates the cars of the cdr chain; the terminating atom is not yielded.
    pub fn iter(&self) -> ListIter<'_> {
        ListIter { cur: self }
    }
}

pub struct ListIter<'a> {
    cur: &'a SExpr,
}

impl<'a> ListIter<'a> {
    /// What is left of the chain: NIL for a fully consumed proper list.
    pub fn rest(&self) -> &'a SExpr {
        self.cur
    }
}

impl<'a> Iterator for ListIter<'a> {
    type Item = &'a SExpr;

    fn next(&mut self) -> Option<&'a SExpr> {
        match self.cur {
            SExpr::Pair(cell) => {
                self.cur = &cell.cdr;
                Some(&cell.car)
            }
            _ => None,
        }
    }
}

impl PartialEq for SExpr {
    fn eq(&self, other: &SExpr) -> bool {
        let mut pending = vec![(self, other)];
        while let Some((a, b)) = pending.pop() {
            match (a, b) {
                (SExpr::Integer(x), SExpr::Integer(y)) if x == y => {}
                (SExpr::String(x), SExpr::String(y)) if x == y => {}
                (SExpr::Symbol(x), SExpr::Symbol(y)) if x == y => {}
                (SExpr::Pair(x), SExpr::Pair(y)) => {
                    if !Arc::ptr_eq(x, y) {
                        pending.push((&x.cdr, &y.cdr));
                        pending.push((&x.car, &y.car));
                    }
                }
                _ => return false,
            }
        }
        true
    }
}

impl Eq for SExpr {}

impl fmt::Display for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_sexpr(self))
    }
}

impl fmt::Debug for SExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_sexpr(self))
    }
}

impl From<Symbol> for SExpr {
    fn from(s: Symbol) -> SExpr {
        SExpr::Symbol(s)
    }
}

impl From<i64> for SExpr {
    fn from(n: i64) -> SExpr {
        SExpr::int(n)
    }
}

impl From<&str> for SExpr {
    fn from(s: &str) -> SExpr {
        SExpr::string(s)
    }
}

// ---------------------------------------------------------------------------
// Printer

/// Canonical single-line rendering; the exact payload of RETURN bodies.
pub fn print_sexpr(value: &SExpr) -> String {
    let mut out = String::new();
    write_sexpr(&mut out, value);
    out
}

pub(crate) fn write_string_literal(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
}

fn write_sexpr(out: &mut String, value: &SExpr) {
    match value {
        SExpr::Integer(n) => out.push_str(&n.to_string()),
        SExpr::String(s) => write_string_literal(out, s),
        SExpr::Symbol(s) => out.push_str(s.name()),
        SExpr::Pair(cell) => {
            out.push('(');
            stacker::maybe_grow(STACK_RED_ZONE, STACK_GROW, || write_sexpr(out, &cell.car));
            let mut tail = &cell.cdr;
            loop {
                match tail {
                    SExpr::Pair(next) => {
                        out.push(' ');
                        stacker::maybe_grow(STACK_RED_ZONE, STACK_GROW, || {
                            write_sexpr(out, &next.car)
                        });
                        tail = &next.cdr;
                    }
                    atom if atom.is_nil() => break,
                    atom => {
                        out.push_str(" . ");
                        write_sexpr(out, atom);
                        break;
                    }
                }
            }
            out.push(')');
        }
    }
}

// ---------------------------------------------------------------------------
// Reader

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntaxErrorKind {
    EmptyInput,
    UnclosedParen,
    UnexpectedCloseParen,
    UnterminatedString,
    StrayDot,
    TrailingInput,
    TooDeep,
}

impl fmt::Display for SyntaxErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            SyntaxErrorKind::EmptyInput => "empty input",
            SyntaxErrorKind::UnclosedParen => "unbalanced parenthesis: missing )",
            SyntaxErrorKind::UnexpectedCloseParen => "unbalanced parenthesis: unexpected )",
            SyntaxErrorKind::UnterminatedString => "unterminated string",
            SyntaxErrorKind::StrayDot => "stray dot",
            SyntaxErrorKind::TrailingInput => "unexpected input after expression",
            SyntaxErrorKind::TooDeep => "nesting too deep",
        };
        f.write_str(text)
    }
}

/// A reader failure; `offset` is a byte offset into the input.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at byte {offset}: {kind}")]
pub struct SyntaxError {
    pub offset: usize,
    pub kind: SyntaxErrorKind,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DotState {
    None,
    AwaitingTail,
    HaveTail,
}

struct Frame {
    items: Vec<SExpr>,
    tail: Option<SExpr>,
    dot: DotState,
}

/// Parses exactly one S-expression; surrounding whitespace is allowed.
pub fn parse_sexpr(text: &str) -> Result<SExpr, SyntaxError> {
    let bytes = text.as_bytes();
    let err = |offset, kind| Err(SyntaxError { offset, kind });
    let mut pos = 0;
    let mut stack: Vec<Frame> = Vec::new();

    loop {
        while let Some(c) = text[pos..].chars().next() {
            if !c.is_whitespace() {
                break;
            }
            pos += c.len_utf8();
        }
        if pos == bytes.len() {
            return if stack.is_empty() {
                err(pos, SyntaxErrorKind::EmptyInput)
            } else {
                err(pos, SyntaxErrorKind::UnclosedParen)
            };
        }

        let start = pos;
        let value = match bytes[pos] {
            b'(' => {
                if stack.len() >= MAX_NESTING {
                    return err(pos, SyntaxErrorKind::TooDeep);
                }
                stack.push(Frame {
                    items: Vec::new(),
                    tail: None,
                    dot: DotState::None,
                });
                pos += 1;
                continue;
            }
            b')' => {
                let Some(frame) = stack.pop() else {
                    return err(pos, SyntaxErrorKind::UnexpectedCloseParen);
                };
                if frame.dot == DotState::AwaitingTail {
                    return err(pos, SyntaxErrorKind::StrayDot);
                }
                pos += 1;
                let tail = frame.tail.unwrap_or_else(SExpr::nil);
                SExpr::list_with_tail(frame.items, tail)
            }
            b'"' => {
                let (s, next) = read_string(text, pos)?;
                pos = next;
                SExpr::String(Arc::from(s))
            }
            _ => {
                let end = text[pos..]
                    .char_indices()
                    .find(|&(_, c)| is_delimiter(c))
                    .map_or(bytes.len(), |(i, _)| pos + i);
                let token = &text[pos..end];
                pos = end;
                if token == "." {
                    match stack.last_mut() {
                        Some(frame) if frame.dot == DotState::None && !frame.items.is_empty() => {
                            frame.dot = DotState::AwaitingTail;
                            continue;
                        }
                        _ => return err(start, SyntaxErrorKind::StrayDot),
                    }
                }
                if is_integer_token(token) {
                    let n = token.parse::<BigInt>().expect("validated integer token");
                    SExpr::Integer(n)
                } else {
                    SExpr::Symbol(Symbol::new(token).expect("validated symbol token"))
                }
            }
        };

        match stack.last_mut() {
            None => {
                let rest = &text[pos..];
                let trimmed = rest.trim_start();
                if !trimmed.is_empty() {
                    return err(pos + (rest.len() - trimmed.len()), SyntaxErrorKind::TrailingInput);
                }
                return Ok(value);
            }
            Some(frame) => match frame.dot {
                DotState::None => frame.items.push(value),
                DotState::AwaitingTail => {
                    frame.tail = Some(value);
                    frame.dot = DotState::HaveTail;
                }
                DotState::HaveTail => return err(start, SyntaxErrorKind::StrayDot),
            },
        }
    }
}

fn read_string(text: &str, open: usize) -> Result<(String, usize), SyntaxError> {
    let mut out = String::new();
    let mut chars = text[open + 1..].char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Ok((out, open + 1 + i + 1)),
            '\\' => match chars.next() {
                Some((_, escaped)) => out.push(escaped),
                None => break,
            },
            c => out.push(c),
        }
    }
    Err(SyntaxError {
        offset: text.len(),
        kind: SyntaxErrorKind::UnterminatedString,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(name: &str) -> SExpr {
        SExpr::symbol(name).unwrap()
    }

    #[test]
    fn parses_flat_list() {
        let expected = SExpr::cons(
            sym("+"),
            SExpr::cons(SExpr::int(1), SExpr::cons(SExpr::int(2), SExpr::nil())),
        );
        assert_eq!(parse_sexpr("(+ 1 2)").unwrap(), expected);
    }

    #[test]
    fn empty_list_is_nil() {
        assert!(parse_sexpr("()").unwrap().is_nil());
        assert!(parse_sexpr("  ( )  ").unwrap().is_nil());
        assert!(parse_sexpr("NIL").unwrap().is_nil());
    }

    #[test]
    fn dotted_pair() {
        assert_eq!(
            parse_sexpr("(1 . 2)").unwrap(),
            SExpr::cons(SExpr::int(1), SExpr::int(2))
        );
        assert_eq!(
            parse_sexpr("(1 2 . 3)").unwrap(),
            SExpr::list_with_tail([SExpr::int(1), SExpr::int(2)], SExpr::int(3))
        );
        // A NIL tail is just a proper list.
        assert_eq!(parse_sexpr("(1 . NIL)").unwrap(), parse_sexpr("(1)").unwrap());
    }

    #[test]
    fn unbalanced_open_reports_end_offset() {
        let e = parse_sexpr("(").unwrap_err();
        assert_eq!(e.offset, 1);
        assert_eq!(e.kind, SyntaxErrorKind::UnclosedParen);
    }

    #[test]
    fn syntax_error_cases() {
        let cases = [
            ("", 0, SyntaxErrorKind::EmptyInput),
            ("   ", 3, SyntaxErrorKind::EmptyInput),
            (")", 0, SyntaxErrorKind::UnexpectedCloseParen),
            ("(a))", 3, SyntaxErrorKind::TrailingInput),
            ("\"abc", 4, SyntaxErrorKind::UnterminatedString),
            ("\"ab\\", 4, SyntaxErrorKind::UnterminatedString),
            (".", 0, SyntaxErrorKind::StrayDot),
            ("(. a)", 1, SyntaxErrorKind::StrayDot),
            ("(a .)", 4, SyntaxErrorKind::StrayDot),
            ("(a . b c)", 7, SyntaxErrorKind::StrayDot),
            ("(a . . b)", 5, SyntaxErrorKind::StrayDot),
            ("1 2", 2, SyntaxErrorKind::TrailingInput),
            ("(cw \"a\")(", 8, SyntaxErrorKind::TrailingInput),
        ];
        for (input, offset, kind) in cases {
            let e = parse_sexpr(input).unwrap_err();
            assert_eq!((e.offset, e.kind), (offset, kind), "input {input:?}");
        }
    }

    #[test]
    fn atoms() {
        assert_eq!(parse_sexpr("-42").unwrap(), SExpr::int(-42));
        assert_eq!(parse_sexpr("-0").unwrap(), SExpr::int(0));
        assert_eq!(parse_sexpr("-").unwrap(), sym("-"));
        assert_eq!(parse_sexpr("1a").unwrap(), sym("1a"));
        assert_eq!(parse_sexpr("a.b").unwrap(), sym("a.b"));
        assert_eq!(parse_sexpr("nil").unwrap(), sym("nil"));
        assert!(!parse_sexpr("nil").unwrap().is_nil());
        let big = "123456789012345678901234567890";
        assert_eq!(print_sexpr(&parse_sexpr(big).unwrap()), big);
        assert_eq!(parse_sexpr(r#""a\"b\\c\n""#).unwrap(), SExpr::string("a\"b\\cn"));
    }

    #[test]
    fn adjacent_strings_split_tokens() {
        assert_eq!(
            parse_sexpr("(ab\"c\")").unwrap(),
            SExpr::list([sym("ab"), SExpr::string("c")])
        );
    }

    #[test]
    fn printer_examples() {
        assert_eq!(print_sexpr(&SExpr::cons(SExpr::int(1), SExpr::int(2))), "(1 . 2)");
        assert_eq!(print_sexpr(&SExpr::nil()), "NIL");
        assert_eq!(
            print_sexpr(&SExpr::list([sym("cw"), SExpr::string("hi")])),
            "(cw \"hi\")"
        );
        assert_eq!(print_sexpr(&SExpr::string("a\"b\\")), r#""a\"b\\""#);
        assert_eq!(print_sexpr(&parse_sexpr("(() (a) . b)").unwrap()), "(NIL (a) . b)");
    }

    #[test]
    fn symbol_validation() {
        for bad in ["", ".", "12", "-3", "a b", "(", "a)", "x\"y"] {
            assert!(Symbol::new(bad).is_err(), "{bad:?}");
        }
        for good in ["-", "+", "a.b", "..", "'x", "é", "-x", "1-"] {
            assert!(Symbol::new(good).is_ok(), "{good:?}");
        }
    }

    #[test]
    fn nesting_limit() {
        let ok = format!("{}{}", "(".repeat(MAX_NESTING), ")".repeat(MAX_NESTING));
        let deep = parse_sexpr(&ok).unwrap();
        assert_eq!(print_sexpr(&deep), ok.replacen("()", "NIL", 1));
        let too_deep = "(".repeat(MAX_NESTING + 1);
        assert_eq!(parse_sexpr(&too_deep).unwrap_err().kind, SyntaxErrorKind::TooDeep);
    }

    #[test]
    fn long_list_drops_and_compares_without_recursion() {
        let a = SExpr::list((0..500_000).map(SExpr::int).collect::<Vec<_>>());
        let b = SExpr::list((0..500_000).map(SExpr::int).collect::<Vec<_>>());
        assert_eq!(a, b);
        assert!(a.is_proper_list());
        drop(a);
        drop(b);
    }

    #[test]
    fn proper_list_detection() {
        assert!(SExpr::nil().is_proper_list());
        assert!(parse_sexpr("(1 (2 . 3))").unwrap().is_proper_list());
        assert!(!parse_sexpr("(1 2 . 3)").unwrap().is_proper_list());
        assert!(!SExpr::int(1).is_proper_list());
    }
}
