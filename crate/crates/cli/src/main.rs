//! `bridge`: run a session server, or talk to one from the terminal.

mod balance;

use std::io::{self, BufRead, IsTerminal, Write};
use std::process::ExitCode;
use std::time::Duration;

use bridge_core::client::{ClientConnection, ClientError, ClientOptions, Mode};
use bridge_core::server::{
    shared_evaluator, Server, ServerConfig, DEFAULT_MAX_CLIENTS, DEFAULT_MAX_COMMAND_BYTES,
    MIN_MAX_COMMAND_BYTES,
};
use bridge_core::Session;
use clap::{Args, Parser, Subcommand};

use balance::Balance;

const DEFAULT_ENDPOINT: &str = "127.0.0.1:55433";
const PROMPT: &str = "bridge> ";
const CONTINUATION: &str = "   ...> ";

#[derive(Debug, Parser)]
#[command(name = "bridge", version, about = "Shared S-expression session over a framed REPL protocol")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a server around a fresh session until interrupted.
    Serve(ServeArgs),
    /// Interactive read-eval-print loop against a running server.
    Repl(ClientArgs),
    /// Run one command and print its output and value.
    Exec {
        #[command(flatten)]
        client: ClientArgs,
        /// Command text, sent verbatim.
        #[arg(long, value_name = "TEXT")]
        command: String,
    },
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// TCP endpoint for the framed protocol.
    #[arg(long, value_name = "HOST:PORT", env = "BRIDGE_LISTEN", default_value = DEFAULT_ENDPOINT)]
    listen: String,
    /// Also accept WebSocket clients on this endpoint (path /bridge).
    #[arg(long, value_name = "HOST:PORT")]
    ws_listen: Option<String>,
    #[arg(long, value_name = "NAME", default_value = "default")]
    session_name: String,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_MAX_CLIENTS,
          value_parser = parse_client_limit)]
    max_clients: usize,
    #[arg(long, value_name = "N", default_value_t = DEFAULT_MAX_COMMAND_BYTES,
          value_parser = parse_command_limit)]
    max_command_bytes: usize,
}

#[derive(Debug, Args)]
struct ClientArgs {
    #[arg(long, value_name = "HOST:PORT", env = "BRIDGE_CONNECT", default_value = DEFAULT_ENDPOINT)]
    connect: String,
    /// Ask for values as JSON text.
    #[arg(long)]
    json: bool,
    #[arg(long, value_name = "SECONDS", default_value = "10", value_parser = parse_timeout)]
    connect_timeout: Duration,
}

impl ClientArgs {
    fn mode(&self) -> Mode {
        if self.json {
            Mode::Json
        } else {
            Mode::Sexpr
        }
    }

    fn open(&self) -> Result<ClientConnection, ClientError> {
        let options = ClientOptions {
            connect_timeout: self.connect_timeout,
            ..ClientOptions::default()
        };
        ClientConnection::connect(&self.connect, options)
    }
}

fn parse_client_limit(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_command_limit(s: &str) -> Result<usize, String> {
    let n: usize = s.parse().map_err(|e| format!("{e}"))?;
    if n < MIN_MAX_COMMAND_BYTES {
        return Err(format!("must be at least {MIN_MAX_COMMAND_BYTES}"));
    }
    Ok(n)
}

fn parse_timeout(s: &str) -> Result<Duration, String> {
    let secs: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !secs.is_finite() || secs <= 0.0 {
        return Err("must be a positive number of seconds".into());
    }
    Duration::try_from_secs_f64(secs).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("bridge: {}", first.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    match cli.command {
        Command::Serve(args) => serve(args),
        Command::Repl(args) => repl(&args),
        Command::Exec { client, command } => exec(&client, &command),
    }
}

fn serve(args: ServeArgs) -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let config = ServerConfig {
        tcp_listen: Some(args.listen),
        ws_listen: args.ws_listen,
        session_name: args.session_name,
        max_clients: args.max_clients,
        max_command_bytes: args.max_command_bytes,
    };
    let server = match Server::bind(config, shared_evaluator(Session::new())) {
        Ok(server) => server,
        Err(e) => {
            eprintln!("bridge: {e}");
            return ExitCode::from(1);
        }
    };
    let handle = server.shutdown_handle();
    if let Err(e) = ctrlc::set_handler(move || handle.shutdown()) {
        eprintln!("bridge: cannot install interrupt handler: {e}");
        return ExitCode::from(1);
    }
    if let Some(addr) = server.tcp_addr() {
        log::info!("accepting clients on {addr}");
    }
    if let Some(addr) = server.ws_addr() {
        log::info!("websocket clients on ws://{addr}/bridge");
    }
    match server.run() {
        Ok(()) => {
            log::info!("shut down");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bridge: {e}");
            ExitCode::from(1)
        }
    }
}

/// Sends one command, streaming printed output to stdout, then prints the
/// value on its own line.
fn run_one(
    conn: &mut ClientConnection,
    text: &str,
    mode: Mode,
    out: &mut impl Write,
) -> Result<(), ClientError> {
    let mut last_byte = None;
    let mut write_err = None;
    let mut on_stdout = |chunk: &str| {
        if let Some(&b) = chunk.as_bytes().last() {
            last_byte = Some(b);
        }
        if write_err.is_none() {
            if let Err(e) = out.write_all(chunk.as_bytes()).and_then(|()| out.flush()) {
                write_err = Some(e);
            }
        }
    };
    let outcome = conn.run_command(text, mode, Some(&mut on_stdout));
    if let Some(e) = write_err {
        return Err(ClientError::Io(e));
    }
    if matches!(last_byte, Some(b) if b != b'\n') {
        out.write_all(b"\n")?;
    }
    let outcome = outcome?;
    writeln!(out, "{}", outcome.value_text)?;
    out.flush()?;
    Ok(())
}

fn exec(args: &ClientArgs, command: &str) -> ExitCode {
    let mut conn = match args.open() {
        Ok(conn) => conn,
        Err(e) => {
            eprintln!("bridge: {e}");
            return ExitCode::from(1);
        }
    };
    let stdout = io::stdout();
    let result = run_one(&mut conn, command, args.mode(), &mut stdout.lock());
    conn.close();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(ClientError::Bridge(e)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("bridge: {e}");
            ExitCode::from(1)
        }
    }
}

fn repl(args: &ClientArgs) -> ExitCode {
    let mut conn = match args.open() {
        Ok(conn) => conn,
        Err(e) => {
            eprintln!("bridge: {e}");
            return ExitCode::from(1);
        }
    };
    let stdin = io::stdin();
    if stdin.is_terminal() {
        if let Some(info) = conn.server_info() {
            eprintln!(
                "connected to session \"{}\" (protocol {})",
                info.session_name, info.version
            );
        }
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let mut input = stdin.lock();
    let mut line = String::new();
    loop {
        let mut pending = String::new();
        let mut balance = Balance::default();
        let mut prompt = PROMPT;
        let at_eof = loop {
            if write!(out, "{prompt}").and_then(|()| out.flush()).is_err() {
                return ExitCode::from(1);
            }
            line.clear();
            match input.read_line(&mut line) {
                Ok(0) => break true,
                Ok(_) => {}
                Err(e) => {
                    eprintln!("bridge: cannot read input: {e}");
                    return ExitCode::from(1);
                }
            }
            balance.feed(&line);
            pending.push_str(&line);
            if balance.is_complete() {
                break false;
            }
            if pending.trim().is_empty() {
                pending.clear();
            } else {
                prompt = CONTINUATION;
            }
        };
        if at_eof {
            // Leave the terminal on a fresh line after the last prompt.
            let _ = writeln!(out);
        }
        let text = pending.trim();
        if !text.is_empty() {
            match run_one(&mut conn, text, args.mode(), &mut out) {
                Ok(()) => {}
                Err(ClientError::Bridge(e)) => eprintln!("error: {e}"),
                Err(e) => {
                    eprintln!("bridge: {e}");
                    return ExitCode::from(1);
                }
            }
        }
        if at_eof {
            conn.close();
            return ExitCode::SUCCESS;
        }
    }
}
