use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use dilemma_core::syncnet::{MessageKind, Payload, WireMessage};
use dilemma_core::{Group, PlayerId, ResponseStore};

fn dilemma() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dilemma"))
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(dir: &Path) -> Server {
    let tokens = dir.join("tokens.csv");
    std::fs::write(&tokens, "player_id,token\n1,alpha\n2,beta\n").unwrap();
    let mut child = dilemma()
        .args(["serve", "--addr", "127.0.0.1:0", "--seed", "5"])
        .arg("--store")
        .arg(dir.join("store.jsonl"))
        .arg("--tokens")
        .arg(&tokens)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap_or_else(|| panic!("unexpected first line {line:?}"))
        .to_string();
    Server { child, addr }
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    player: PlayerId,
    token: String,
}

impl Client {
    fn connect(addr: &str, player: u32, token: &str) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
            player: PlayerId(player),
            token: token.to_string(),
        }
    }

    fn send(&mut self, payload: Payload) {
        let msg = WireMessage::client("lobby", self.player, &self.token, payload);
        writeln!(self.writer, "{}", msg.to_line()).unwrap();
    }

    fn until(&mut self, kind: MessageKind) -> WireMessage {
        loop {
            let mut line = String::new();
            assert!(self.reader.read_line(&mut line).unwrap() > 0, "connection closed");
            let msg = WireMessage::from_line(&line).unwrap();
            if msg.kind() == kind {
                return msg;
            }
        }
    }
}

#[test]
fn serve_answers_join_with_snapshot_and_rejects_bad_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let server = start_server(dir.path());
    let mut host = Client::connect(&server.addr, 1, "alpha");
    host.send(Payload::Join { at: None });
    let snap = host.until(MessageKind::Snapshot);
    let Payload::Snapshot { state: Some(state) } = snap.payload else {
        panic!("snapshot without state");
    };
    assert!(state.members.contains(&PlayerId(1)));

    let mut intruder = Client::connect(&server.addr, 2, "wrong");
    intruder.send(Payload::Join { at: None });
    let err = intruder.until(MessageKind::Error);
    let Payload::Error { code, .. } = &err.payload else { unreachable!() };
    assert_eq!(code, "AUTH_FAILED");
    assert!(!err.to_line().contains("wrong"));
}

#[test]
fn committed_rows_survive_a_kill() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = start_server(dir.path());
    let mut c = Client::connect(&server.addr, 1, "alpha");
    c.send(Payload::Join { at: None });
    c.until(MessageKind::Snapshot);
    c.send(Payload::Ready {});
    c.until(MessageKind::Start);
    c.send(Payload::Move { x: 5, y: 13 });
    let prompt = c.until(MessageKind::Prompt);
    let Payload::Prompt(p) = prompt.payload else { unreachable!() };
    c.send(Payload::Answer {
        dilemma_id: p.dilemma_id,
        option_index: 2,
    });
    c.until(MessageKind::Answer);
    server.child.kill().unwrap();
    server.child.wait().unwrap();

    let store = ResponseStore::open_read_only(dir.path().join("store.jsonl")).unwrap();
    let rows = store.rows(Group::A).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].record.dilemma_id, p.dilemma_id);
    assert_eq!(rows[0].record.option_index, 2);
}

#[test]
fn bad_catalog_exits_with_fixture_code() {
    let dir = tempfile::tempdir().unwrap();
    let catalog = dir.path().join("broken.csv");
    std::fs::write(&catalog, "not,a,catalog\n").unwrap();
    let out = dilemma()
        .args(["simulate", "--sessions", "1"])
        .arg("--catalog")
        .arg(&catalog)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("broken.csv"), "{stderr}");
}

#[test]
fn simulate_then_export_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let status = dilemma()
        .args(["simulate", "--seed", "3", "--sessions", "4"])
        .arg("--out")
        .arg(&sim)
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["store.jsonl", "transcript.jsonl", "sessions.json", "run_metadata.json"] {
        assert!(sim.join(f).exists(), "{f} missing");
    }

    let exports = dir.path().join("exports");
    let status = dilemma()
        .args(["export", "--table", "2", "--n", "4", "--now-ms", "1747749787000"])
        .arg("--store")
        .arg(sim.join("store.jsonl"))
        .arg("--out")
        .arg(&exports)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(exports.join("Db1Table2_4_20250520-140307.json").exists());
    assert!(exports.join("Db1Table2_4_20250520-140307.csv").exists());

    let figures = dir.path().join("figures");
    let status = dilemma()
        .args(["analyze", "--group", "A", "--pca-k", "2", "--k", "2"])
        .arg("--store")
        .arg(sim.join("store.jsonl"))
        .arg("--out")
        .arg(&figures)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(figures.join("histogram.csv").exists());
}

#[test]
fn analyze_on_empty_store_fails() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("empty.jsonl");
    ResponseStore::open(&store).unwrap().ensure_tables().unwrap();
    let out = dilemma()
        .args(["analyze", "--group", "A"])
        .arg("--store")
        .arg(&store)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("complete"));
}
