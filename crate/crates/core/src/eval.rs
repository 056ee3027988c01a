//! The embedded session evaluator.
//!
//! A small deterministic Lisp: special forms `quote if progn setq lambda
//! defun` and builtins `+ - * car cdr cons list equal < cw error`. Functions
//! and variables live in separate namespaces. A lambda evaluates to its own
//! form and does not capture local bindings; applying one binds its
//! parameters in a fresh frame over the globals.
//!
//! Global mutations made by a command are buffered and committed only when
//! the command returns, so an errored command leaves the session untouched.

use std::collections::HashMap;
use std::sync::Arc;

use num_bigint::BigInt;
use num_traits::Zero;

use crate::sexpr::{print_sexpr, SExpr, Symbol, STACK_GROW, STACK_RED_ZONE};

/// Maximum nesting of function applications within one command.
pub const MAX_CALL_DEPTH: usize = 10_000;

/// Longest rendering of an offending value quoted in an error message.
const MAX_QUOTED_VALUE: usize = 200;

/// How a command finished.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Returned(SExpr),
    Errored(String),
}

/// Everything one command produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandOutcome {
    pub result: Outcome,
    /// Printed output in emission order, one entry per `cw` call.
    pub printed_chunks: Vec<String>,
}

impl CommandOutcome {
    pub fn value(&self) -> Option<&SExpr> {
        match &self.result {
            Outcome::Returned(v) => Some(v),
            Outcome::Errored(_) => None,
        }
    }

    pub fn error_message(&self) -> Option<&str> {
        match &self.result {
            Outcome::Returned(_) => None,
            Outcome::Errored(m) => Some(m),
        }
    }

    pub fn stdout(&self) -> String {
        self.printed_chunks.concat()
    }
}

/// The narrow interface the server embeds. Any evaluator with this shape can
/// stand behind the bridge.
pub trait Evaluator: Send {
    /// Evaluates one command. Printed output is passed to `emit` as it is
    /// produced and also recorded in the outcome. Never panics on bad input;
    /// failures become [`Outcome::Errored`].
    fn evaluate_command(&mut self, command: &SExpr, emit: &mut dyn FnMut(&str)) -> CommandOutcome;
}

#[derive(Debug)]
struct Lambda {
    params: Vec<Symbol>,
    body: Vec<SExpr>,
}

/// Shared global state: variable and function definitions visible to every
/// client.
#[derive(Debug, Default)]
pub struct Session {
    globals: HashMap<Symbol, SExpr>,
    functions: HashMap<Symbol, Arc<Lambda>>,
}

impl Session {
    pub fn new() -> Session {
        Session::default()
    }

    pub fn global(&self, name: &str) -> Option<&SExpr> {
        let sym = Symbol::new(name).ok()?;
        self.globals.get(&sym)
    }

    pub fn is_function_defined(&self, name: &str) -> bool {
        Symbol::new(name).is_ok_and(|s| self.functions.contains_key(&s))
    }

    /// Convenience wrapper that only collects printed output.
    pub fn evaluate(&mut self, command: &SExpr) -> CommandOutcome {
        self.evaluate_command(command, &mut |_| {})
    }
}

impl Evaluator for Session {
    fn evaluate_command(&mut self, command: &SExpr, emit: &mut dyn FnMut(&str)) -> CommandOutcome {
        let mut machine = Machine {
            session: self,
            pending_globals: HashMap::new(),
            pending_functions: HashMap::new(),
            emit,
            chunks: Vec::new(),
            call_depth: 0,
        };
        let result = machine.eval(command, &mut Vec::new());
        let Machine {
            pending_globals,
            pending_functions,
            chunks,
            ..
        } = machine;
        let result = match result {
            Ok(value) => {
                self.globals.extend(pending_globals);
                self.functions.extend(pending_functions);
                Outcome::Returned(value)
            }
            Err(EvalError(message)) => Outcome::Errored(one_line(&message)),
        };
        CommandOutcome {
            result,
            printed_chunks: chunks,
        }
    }
}

fn one_line(message: &str) -> String {
    message.replace(['\r', '\n'], " ")
}

#[derive(Debug)]
struct EvalError(String);

type EvalResult<T> = Result<T, EvalError>;

fn fail<T>(message: impl Into<String>) -> EvalResult<T> {
    Err(EvalError(message.into()))
}

fn quoted(value: &SExpr) -> String {
    let mut text = print_sexpr(value);
    if text.len() > MAX_QUOTED_VALUE {
        let mut cut = MAX_QUOTED_VALUE;
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        text.truncate(cut);
        text.push_str("...");
    }
    text
}

const SPECIAL_FORMS: &[&str] = &["quote", "if", "progn", "setq", "lambda", "defun"];
const BUILTINS: &[&str] = &[
    "+", "-", "*", "car", "cdr", "cons", "list", "equal", "<", "cw", "error",
];

fn is_reserved(name: &str) -> bool {
    SPECIAL_FORMS.contains(&name) || BUILTINS.contains(&name)
}

fn is_constant(sym: &Symbol) -> bool {
    matches!(sym.name(), "NIL" | "T") || sym.name().starts_with(':')
}

/// Local bindings of the innermost function application.
type Frame = Vec<(Symbol, SExpr)>;

struct Machine<'a> {
    session: &'a Session,
    pending_globals: HashMap<Symbol, SExpr>,
    pending_functions: HashMap<Symbol, Arc<Lambda>>,
    emit: &'a mut dyn FnMut(&str),
    chunks: Vec<String>,
    call_depth: usize,
}

impl Machine<'_> {
    fn eval(&mut self, expr: &SExpr, frame: &mut Frame) -> EvalResult<SExpr> {
        stacker::maybe_grow(STACK_RED_ZONE, STACK_GROW, || self.eval_inner(expr, frame))
    }

    fn eval_inner(&mut self, expr: &SExpr, frame: &mut Frame) -> EvalResult<SExpr> {
        match expr {
            SExpr::Integer(_) | SExpr::String(_) => Ok(expr.clone()),
            SExpr::Symbol(sym) => self.lookup_variable(sym, frame),
            SExpr::Pair(cell) => {
                let head = cell.car();
                let args = cell.cdr();
                if !args.is_proper_list() {
                    return fail(format!("malformed call: {}", quoted(expr)));
                }
                match head {
                    SExpr::Symbol(sym) => self.eval_call(sym, args, frame),
                    SExpr::Pair(_) if is_lambda_form(head) => {
                        let lambda = parse_lambda(head)?;
                        let values = self.eval_args(args, frame)?;
                        self.apply("lambda", &lambda, values)
                    }
                    _ => fail(format!("not a function: {}", quoted(head))),
                }
            }
        }
    }

    fn lookup_variable(&self, sym: &Symbol, frame: &Frame) -> EvalResult<SExpr> {
        if is_constant(sym) {
            return Ok(SExpr::Symbol(sym.clone()));
        }
        if let Some((_, v)) = frame.iter().rev().find(|(name, _)| name == sym) {
            return Ok(v.clone());
        }
        self.global(sym)
            .cloned()
            .ok_or_else(|| EvalError(format!("unbound variable: {sym}")))
    }

    fn global(&self, sym: &Symbol) -> Option<&SExpr> {
        self.pending_globals
            .get(sym)
            .or_else(|| self.session.globals.get(sym))
    }

    fn function(&self, sym: &Symbol) -> Option<Arc<Lambda>> {
        self.pending_functions
            .get(sym)
            .or_else(|| self.session.functions.get(sym))
            .cloned()
    }

    fn eval_args(&mut self, args: &SExpr, frame: &mut Frame) -> EvalResult<Vec<SExpr>> {
        args.iter().map(|arg| self.eval(arg, frame)).collect()
    }

    fn eval_body(&mut self, body: &[SExpr], frame: &mut Frame) -> EvalResult<SExpr> {
        let mut last = SExpr::nil();
        for form in body {
            last = self.eval(form, frame)?;
        }
        Ok(last)
    }

    fn eval_call(&mut self, head: &Symbol, args: &SExpr, frame: &mut Frame) -> EvalResult<SExpr> {
        let name = head.name();
        let forms: Vec<&SExpr> = args.iter().collect();
        match name {
            "quote" => {
                expect_arity("quote", forms.len(), 1, Some(1))?;
                Ok(forms[0].clone())
            }
            "if" => {
                expect_arity("if", forms.len(), 2, Some(3))?;
                if !self.eval(forms[0], frame)?.is_nil() {
                    self.eval(forms[1], frame)
                } else if let Some(alt) = forms.get(2) {
                    self.eval(alt, frame)
                } else {
                    Ok(SExpr::nil())
                }
            }
            "progn" => {
                let body: Vec<SExpr> = forms.into_iter().cloned().collect();
                self.eval_body(&body, frame)
            }
            "setq" => self.eval_setq(&forms, frame),
            "lambda" => {
                let form = SExpr::cons(SExpr::Symbol(head.clone()), args.clone());
                parse_lambda(&form)?;
                Ok(form)
            }
            "defun" => self.eval_defun(&forms),
            _ if BUILTINS.contains(&name) => {
                let values = self.eval_args(args, frame)?;
                self.call_builtin(name, values)
            }
            _ => {
                let values;
                if let Some(lambda) = self.function(head) {
                    values = self.eval_args(args, frame)?;
                    return self.apply(name, &lambda, values);
                }
                // A variable holding a lambda form can be called directly.
                let bound = frame
                    .iter()
                    .rev()
                    .find(|(n, _)| n == head)
                    .map(|(_, v)| v.clone())
                    .or_else(|| self.global(head).cloned());
                match bound {
                    Some(v) if is_lambda_form(&v) => {
                        let lambda = parse_lambda(&v)?;
                        values = self.eval_args(args, frame)?;
                        self.apply(name, &lambda, values)
                    }
                    _ => fail(format!("undefined function: {name}")),
                }
            }
        }
    }

    fn eval_setq(&mut self, forms: &[&SExpr], frame: &mut Frame) -> EvalResult<SExpr> {
        if forms.is_empty() || !forms.len().is_multiple_of(2) {
            return fail(format!(
                "setq: expected symbol/value pairs, got {} argument(s)",
                forms.len()
            ));
        }
        let mut last = SExpr::nil();
        for pair in forms.chunks(2) {
            let Some(sym) = pair[0].as_symbol() else {
                return fail(format!("setq: not a symbol: {}", quoted(pair[0])));
            };
            if is_constant(sym) {
                return fail(format!("setq: cannot assign constant {sym}"));
            }
            let value = self.eval(pair[1], frame)?;
            if let Some(slot) = frame.iter_mut().rev().find(|(n, _)| n == sym) {
                slot.1 = value.clone();
            } else {
                self.pending_globals.insert(sym.clone(), value.clone());
            }
            last = value;
        }
        Ok(last)
    }

    fn eval_defun(&mut self, forms: &[&SExpr]) -> EvalResult<SExpr> {
        if forms.len() < 2 {
            return fail(format!(
                "defun: expected at least 2 arguments, got {}",
                forms.len()
            ));
        }
        let Some(name) = forms[0].as_symbol() else {
            return fail(format!("defun: not a symbol: {}", quoted(forms[0])));
        };
        if is_reserved(name.name()) || is_constant(name) {
            return fail(format!("defun: cannot redefine {name}"));
        }
        let params = parse_params("defun", forms[1])?;
        let body = forms[2..].iter().map(|f| (*f).clone()).collect();
        self.pending_functions
            .insert(name.clone(), Arc::new(Lambda { params, body }));
        Ok(SExpr::Symbol(name.clone()))
    }

    fn apply(&mut self, name: &str, lambda: &Lambda, args: Vec<SExpr>) -> EvalResult<SExpr> {
        if args.len() != lambda.params.len() {
            return fail(format!(
                "{name}: expected {} argument(s), got {}",
                lambda.params.len(),
                args.len()
            ));
        }
        if self.call_depth >= MAX_CALL_DEPTH {
            return fail(format!("recursion depth limit ({MAX_CALL_DEPTH}) exceeded in {name}"));
        }
        self.call_depth += 1;
        let mut frame: Frame = lambda.params.iter().cloned().zip(args).collect();
        let result = self.eval_body(&lambda.body, &mut frame);
        self.call_depth -= 1;
        result
    }

    fn call_builtin(&mut self, name: &str, args: Vec<SExpr>) -> EvalResult<SExpr> {
        match name {
            "+" => {
                let mut sum = BigInt::zero();
                for a in &args {
                    sum += integer_arg("+", a)?;
                }
                Ok(SExpr::Integer(sum))
            }
            "*" => {
                let mut product = BigInt::from(1);
                for a in &args {
                    product *= integer_arg("*", a)?;
                }
                Ok(SExpr::Integer(product))
            }
            "-" => {
                expect_arity("-", args.len(), 1, None)?;
                let first = integer_arg("-", &args[0])?;
                if args.len() == 1 {
                    return Ok(SExpr::Integer(-first));
                }
                let mut acc = first.clone();
                for a in &args[1..] {
                    acc -= integer_arg("-", a)?;
                }
                Ok(SExpr::Integer(acc))
            }
            "car" | "cdr" => {
                expect_arity(name, args.len(), 1, Some(1))?;
                match &args[0] {
                    SExpr::Pair(cell) => Ok(if name == "car" {
                        cell.car().clone()
                    } else {
                        cell.cdr().clone()
                    }),
                    v if v.is_nil() => Ok(SExpr::nil()),
                    v => fail(format!("{name}: expected a list, got {}", quoted(v))),
                }
            }
            "cons" => {
                expect_arity("cons", args.len(), 2, Some(2))?;
                let mut it = args.into_iter();
                let car = it.next().unwrap();
                let cdr = it.next().unwrap();
                Ok(SExpr::cons(car, cdr))
            }
            "list" => Ok(SExpr::list(args)),
            "equal" => {
                expect_arity("equal", args.len(), 2, Some(2))?;
                Ok(SExpr::bool(args[0] == args[1]))
            }
            "<" => {
                expect_arity("<", args.len(), 2, Some(2))?;
                let a = integer_arg("<", &args[0])?;
                let b = integer_arg("<", &args[1])?;
                Ok(SExpr::bool(a < b))
            }
            "cw" => {
                let text = format_directives("cw", &args)?;
                (self.emit)(&text);
                self.chunks.push(text);
                Ok(SExpr::nil())
            }
            "error" => {
                let text = format_directives("error", &args)?;
                fail(text)
            }
            _ => unreachable!("unknown builtin {name}"),
        }
    }
}

fn expect_arity(name: &str, got: usize, min: usize, max: Option<usize>) -> EvalResult<()> {
    let ok = got >= min && max.is_none_or(|m| got <= m);
    if ok {
        return Ok(());
    }
    let expected = match max {
        Some(m) if m == min => format!("{min}"),
        Some(m) => format!("{min} to {m}"),
        None => format!("at least {min}"),
    };
    fail(format!("{name}: expected {expected} argument(s), got {got}"))
}

fn integer_arg<'v>(name: &str, value: &'v SExpr) -> EvalResult<&'v BigInt> {
    value
        .as_integer()
        .ok_or_else(|| EvalError(format!("{name}: expected an integer, got {}", quoted(value))))
}

/// Expands `~a` (canonical print of the next argument), `~%` (newline) and
/// `~~` (a literal tilde) in the leading format string.
fn format_directives(name: &str, args: &[SExpr]) -> EvalResult<String> {
    let Some(first) = args.first() else {
        return fail(format!("{name}: expected at least 1 argument(s), got 0"));
    };
    let Some(template) = first.as_str() else {
        return fail(format!("{name}: expected a format string, got {}", quoted(first)));
    };
    let mut rest = args[1..].iter();
    let mut out = String::with_capacity(template.len());
    let mut chars = template.chars();
    while let Some(c) = chars.next() {
        if c != '~' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('a') | Some('A') => match rest.next() {
                Some(v) => out.push_str(&print_sexpr(v)),
                None => return fail(format!("{name}: not enough arguments for ~a")),
            },
            Some('%') => out.push('\n'),
            Some('~') => out.push('~'),
            Some(other) => return fail(format!("{name}: unknown directive ~{other}")),
            None => return fail(format!("{name}: format string ends with ~")),
        }
    }
    Ok(out)
}

fn is_lambda_form(value: &SExpr) -> bool {
    value.as_pair().is_some_and(|c| c.car().is_symbol("lambda"))
}

fn parse_params(context: &str, list: &SExpr) -> EvalResult<Vec<Symbol>> {
    let Some(items) = list.list_items() else {
        return fail(format!("{context}: malformed parameter list: {}", quoted(list)));
    };
    let mut params: Vec<Symbol> = Vec::with_capacity(items.len());
    for item in &items {
        match item.as_symbol() {
            Some(sym) if !is_constant(sym) && !params.contains(sym) => params.push(sym.clone()),
            _ => {
                return fail(format!("{context}: bad parameter {} in {}", quoted(item), quoted(list)))
            }
        }
    }
    Ok(params)
}

fn parse_lambda(form: &SExpr) -> EvalResult<Lambda> {
    let Some(items) = form.list_items() else {
        return fail(format!("lambda: malformed form: {}", quoted(form)));
    };
    if items.len() < 2 {
        return fail(format!("lambda: missing parameter list: {}", quoted(form)));
    }
    let params = parse_params("lambda", &items[1])?;
    Ok(Lambda {
        params,
        body: items[2..].to_vec(),
    })
}
