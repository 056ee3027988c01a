use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use bridge_core::server::{shared_evaluator, RunningServer, Server, ServerConfig};
use bridge_core::Session;

fn start() -> RunningServer {
    let config = ServerConfig {
        tcp_listen: Some("127.0.0.1:0".into()),
        ..ServerConfig::default()
    };
    Server::bind(config, shared_evaluator(Session::new()))
        .unwrap()
        .spawn()
}

fn bridge() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bridge"));
    cmd.env_remove("BRIDGE_CONNECT")
        .env_remove("BRIDGE_LISTEN")
        .env_remove("RUST_LOG");
    cmd
}

fn exec(server: &RunningServer, extra: &[&str], command: &str) -> Output {
    let addr = server.tcp_addr().unwrap().to_string();
    bridge()
        .args(["exec", "--connect", &addr, "--command", command])
        .args(extra)
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn exec_prints_value_and_exits_zero() {
    let server = start();
    let out = exec(&server, &[], "(+ 1 2)");
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), "3\n");
    assert_eq!(text(&out.stderr), "");
    server.shutdown().unwrap();
}

#[test]
fn exec_error_goes_to_stderr_with_exit_two() {
    let server = start();
    let out = exec(&server, &[], "(car 5)");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(text(&out.stdout), "");
    assert_eq!(text(&out.stderr), "car: expected a list, got 5\n");

    let out = exec(&server, &[], "(+ 1");
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).starts_with("syntax error"), "{}", text(&out.stderr));
    server.shutdown().unwrap();
}

#[test]
fn exec_stdout_is_exactly_output_then_value() {
    let server = start();
    let cases: &[(&[&str], &str, &str)] = &[
        (&[], "(progn (cw \"a~%\") (cw \"b~%\") 5)", "a\nb\n5\n"),
        (&[], "(progn (cw \"x=~a\" 7) (quote (1 \"s\")))", "x=7\n(1 \"s\")\n"),
        (&[], "(cw \"~~done~%\")", "~done\nNIL\n"),
        (&["--json"], "(list 1 \"two\" T NIL)", "[1,\"two\",true,null]\n"),
        (&["--json"], "(progn (cw \"hi~%\") 12345678901234567890)", "hi\n12345678901234567890\n"),
    ];
    for (flags, command, golden) in cases {
        let out = exec(&server, flags, command);
        assert_eq!(out.status.code(), Some(0), "{command}: {}", text(&out.stderr));
        assert_eq!(text(&out.stdout), *golden, "{command}");
    }
    let out = exec(&server, &[], "(progn (cw \"partial\") (car 1))");
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(text(&out.stdout), "partial\n");
    server.shutdown().unwrap();
}

#[test]
fn exec_json_of_improper_list_is_a_bridge_error() {
    let server = start();
    let out = exec(&server, &["--json"], "(cons 1 2)");
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("(1 . 2)"), "{}", text(&out.stderr));
    server.shutdown().unwrap();
}

#[test]
fn connect_target_comes_from_environment() {
    let server = start();
    let out = bridge()
        .env("BRIDGE_CONNECT", server.tcp_addr().unwrap().to_string())
        .args(["exec", "--command", "(* 6 7)"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), "42\n");
    server.shutdown().unwrap();
}

#[test]
fn connect_failure_exits_one() {
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let out = bridge()
        .args(["exec", "--connect", &addr.to_string(), "--command", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(text(&out.stdout), "");
    assert_eq!(text(&out.stderr).lines().count(), 1);
}

#[test]
fn usage_errors_exit_one_before_connecting() {
    for args in [
        &["exec"][..],
        &["exec", "--command"],
        &["exec", "--command", "1", "--connect-timeout", "0"],
        &["serve", "--max-command-bytes", "10"],
        &["serve", "--max-clients", "0"],
        &["frobnicate"],
        &[],
    ] {
        let out = bridge().args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(text(&out.stdout), "", "{args:?}");
        let stderr = text(&out.stderr);
        assert_eq!(stderr.lines().count(), 1, "{args:?}: {stderr}");
    }
    let help = bridge().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(text(&help.stdout).contains("serve"));
}

#[test]
fn repl_reads_multiline_commands_and_keeps_going_after_errors() {
    let server = start();
    let mut child = bridge()
        .args(["repl", "--connect", &server.tcp_addr().unwrap().to_string()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"(setq y 5)\n\n(+ y\n   1)\n(car 5)\n(cw \"a (b~%\")\ny\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let p = "bridge> ";
    let c = "   ...> ";
    assert_eq!(
        text(&out.stdout),
        format!("{p}5\n{p}{p}{c}6\n{p}{p}a (b\nNIL\n{p}5\n{p}\n")
    );
    assert_eq!(text(&out.stderr), "error: car: expected a list, got 5\n");
    server.shutdown().unwrap();
}

#[test]
fn repl_json_mode() {
    let server = start();
    let mut child = bridge()
        .args(["repl", "--json", "--connect", &server.tcp_addr().unwrap().to_string()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"(list 1 (list 2))\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), "bridge> [1,[2]]\nbridge> \n");
}

#[cfg(unix)]
fn interrupt(pid: u32) {
    let status = Command::new("kill")
        .args(["-INT", &pid.to_string()])
        .status()
        .unwrap();
    assert!(status.success());
}

/// Reads stderr lines until one contains `needle`, returning everything read.
fn wait_for_line(reader: &mut impl BufRead, needle: &str) -> String {
    let deadline = Instant::now() + Duration::from_secs(30);
    let mut seen = String::new();
    let mut line = String::new();
    while Instant::now() < deadline {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 {
            break;
        }
        seen.push_str(&line);
        if line.contains(needle) {
            return seen;
        }
    }
    panic!("never saw {needle:?}; stderr was:\n{seen}");
}

#[cfg(unix)]
#[test]
fn serve_warns_on_public_bind_and_stops_on_interrupt() {
    let mut child = bridge()
        .args(["serve", "--listen", "0.0.0.0:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let seen = wait_for_line(&mut stderr, "accepting clients on");
    assert!(seen.contains("WARNING"), "{seen}");
    assert!(seen.contains("non-loopback"), "{seen}");
    interrupt(child.id());
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(0));
}

#[cfg(unix)]
#[test]
fn serve_runs_a_session_clients_can_use() {
    let mut child = bridge()
        .args(["serve", "--listen", "127.0.0.1:0", "--session-name", "cli-test"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let seen = wait_for_line(&mut stderr, "accepting clients on");
    assert!(!seen.contains("WARNING"), "{seen}");
    let addr = seen
        .lines()
        .find_map(|l| l.split("accepting clients on ").nth(1))
        .unwrap()
        .trim()
        .to_string();

    let mut conn = bridge_core::client::connect(&addr).unwrap();
    assert_eq!(conn.server_info().unwrap().session_name, "cli-test");
    conn.close();
    let out = bridge()
        .args(["exec", "--connect", &addr, "--command", "(defun sq (x) (* x x))"])
        .output()
        .unwrap();
    assert_eq!(text(&out.stdout), "sq\n");
    let out = bridge()
        .args(["exec", "--connect", &addr, "--command", "(sq 12)"])
        .output()
        .unwrap();
    assert_eq!(text(&out.stdout), "144\n");

    interrupt(child.id());
    assert_eq!(child.wait().unwrap().code(), Some(0));
}

#[test]
fn serve_bind_failure_exits_one() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let out = bridge()
        .args(["serve", "--listen", &taken.local_addr().unwrap().to_string()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("bridge:"), "{}", text(&out.stderr));
}
