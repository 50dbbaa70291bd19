//! The `dilemma` command line: `serve`, `simulate`, `analyze` and `export`.
//!
//! Exit codes: 0 success, 1 other errors, 2 invariant violation, 3 fixture
//! error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::sync::{Arc, Mutex};
use std::thread;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analytics::{
    self, build_answer_matrix, emit_figures, AnalyticsError, AnalyzeConfig, AttemptPolicy, ClusterMethod,
    DEFAULT_AGGLO_CAP, DEFAULT_PCA_K,
};
use crate::catalog::{build_group_table, parse_catalog, persist_tables, Group, OPTIONS_PER_DILEMMA};
use crate::clock::{Clock, ManualClock, SystemClock};
use crate::responsestore::{export_answers, Durability, ResponseStore, StoreContents};
use crate::session::{parse_zones, GameContent, PlayerId, Rect, Room};
use crate::syncnet::wire::{Payload, WireMessage, PROTOCOL_VERSION};
use crate::syncnet::{simulate, Host, NetworkConfig, Outbound, Recipient, Scenario, TokenRegistry};
use crate::worldstate::parse_effect_map;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_FIXTURE: i32 = 3;

/// Start time of simulated sessions: 2025-05-20 14:03:07 UTC.
pub const SIM_EPOCH_MS: u64 = 1_747_749_787_000;

const DEFAULT_CATALOG: &str = include_str!("../fixtures/catalog.csv");
const DEFAULT_ZONES: &str = include_str!("../fixtures/zones.csv");
const DEFAULT_EFFECTS: &str = include_str!("../fixtures/effects.csv");

#[derive(Debug, Parser)]
#[command(name = "dilemma", version, about = "Multi-player dilemma survey sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Host rooms over newline-delimited JSON on TCP.
    Serve(ServeArgs),
    /// Run seeded bot sessions over a simulated network.
    Simulate(SimulateArgs),
    /// Compute figure data from a store.
    Analyze(AnalyzeArgs),
    /// Export one answer table.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FixtureArgs {
    /// Dilemma catalog CSV (built-in catalog when omitted).
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Trigger zone CSV.
    #[arg(long)]
    pub zones: Option<PathBuf>,
    /// Effect map CSV.
    #[arg(long)]
    pub effects: Option<PathBuf>,
    /// Level width and height in cells.
    #[arg(long, default_value_t = 64)]
    pub grid: i32,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: String,
    #[arg(long)]
    pub store: PathBuf,
    /// `player_id,token` CSV of issued tokens.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Base seed for room layouts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub fixtures: FixtureArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Number of rooms to play.
    #[arg(long, default_value_t = 10)]
    pub sessions: usize,
    /// Players per room; drawn from 2..=6 per room when omitted.
    #[arg(long)]
    pub clients: Option<usize>,
    /// One-way latency range `min:max` in milliseconds.
    #[arg(long, default_value = "0:50", value_parser = parse_latency)]
    pub latency_ms: (u64, u64),
    #[arg(long, default_value_t = 0.0)]
    pub drop_prob: f64,
    #[arg(long)]
    pub reorder: bool,
    #[arg(long, default_value_t = 0.1)]
    pub abort_prob: f64,
    #[arg(long, default_value_t = 0.1)]
    pub reanswer_prob: f64,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also write `heatmap.svg` next to the figure data.
    #[arg(long)]
    pub svg: bool,
    #[command(flatten)]
    pub fixtures: FixtureArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum GroupArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

impl From<GroupArg> for Group {
    fn from(g: GroupArg) -> Self {
        match g {
            GroupArg::A => Group::A,
            GroupArg::B => Group::B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum AttemptArg {
    Latest,
    First,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ClusterArg {
    Kmeans,
    Agglo,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value = "A")]
    pub group: GroupArg,
    #[arg(long, value_enum, default_value = "latest")]
    pub attempt: AttemptArg,
    #[arg(long, default_value_t = DEFAULT_PCA_K)]
    pub pca_k: usize,
    #[arg(long, value_enum, default_value = "kmeans")]
    pub cluster: ClusterArg,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_AGGLO_CAP)]
    pub agglo_cap: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// 1 for group A answers, 2 for group B.
    #[arg(long)]
    pub table: u8,
    /// Optional part number inserted into the file name.
    #[arg(long)]
    pub n: Option<u32>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Export time in ms since the epoch (current time when omitted).
    #[arg(long)]
    pub now_ms: Option<u64>,
}

fn parse_latency(s: &str) -> Result<(u64, u64), String> {
    let (a, b) = s.split_once(':').ok_or("expected min:max")?;
    let a: u64 = a.trim().parse().map_err(|_| format!("bad latency `{a}`"))?;
    let b: u64 = b.trim().parse().map_err(|_| format!("bad latency `{b}`"))?;
    if a > b {
        return Err(format!("min {a} exceeds max {b}"));
    }
    Ok((a, b))
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("fixture error in {path}: {reason}")]
    Fixture { path: String, reason: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Fixture { .. } => EXIT_FIXTURE,
            CliError::Invariant(_) => EXIT_INVARIANT,
            CliError::Other(_) => EXIT_ERROR,
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        CliError::Other(e.into())
    }
}

fn fixture_err(path: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Fixture {
        path: path.to_string(),
        reason: e.to_string(),
    }
}

fn read_fixture(path: &Option<PathBuf>, builtin: &'static str, name: &str) -> Result<(String, String), CliError> {
    match path {
        Some(p) => {
            let shown = p.display().to_string();
            let text = fs::read_to_string(p).map_err(|e| fixture_err(&shown, e))?;
            Ok((shown, text))
        }
        None => Ok((format!("<built-in {name}>"), builtin.to_string())),
    }
}

/// Loads and cross-validates catalog, zones and effects.
pub fn load_content(args: &FixtureArgs) -> Result<GameContent, CliError> {
    let (cat_path, cat) = read_fixture(&args.catalog, DEFAULT_CATALOG, "catalog.csv")?;
    let (zone_path, zones) = read_fixture(&args.zones, DEFAULT_ZONES, "zones.csv")?;
    let (eff_path, effects) = read_fixture(&args.effects, DEFAULT_EFFECTS, "effects.csv")?;
    let catalog = parse_catalog(cat.as_bytes()).map_err(|e| fixture_err(&cat_path, e))?;
    let zones = parse_zones(zones.as_bytes()).map_err(|e| fixture_err(&zone_path, e))?;
    let effects = parse_effect_map(effects.as_bytes()).map_err(|e| fixture_err(&eff_path, e))?;
    if args.grid < 1 {
        return Err(fixture_err("--grid", "grid must be at least 1"));
    }
    let bounds = Rect {
        x0: 0,
        y0: 0,
        x1: args.grid - 1,
        y1: args.grid - 1,
    };
    let content = GameContent::new(catalog, zones, effects, bounds)
        .map_err(|e| fixture_err(&format!("{cat_path} + {zone_path} + {eff_path}"), e))?;
    for group in Group::ALL {
        build_group_table(&content.catalog, group).map_err(|e| fixture_err(&cat_path, e))?;
    }
    Ok(content)
}

/// The content compiled into the binary, on a 64×64 grid.
pub fn builtin_content() -> GameContent {
    load_content(&FixtureArgs {
        catalog: None,
        zones: None,
        effects: None,
        grid: 64,
    })
    .expect("built-in fixtures are valid")
}

fn persist_catalog_tables(content: &GameContent, store: &ResponseStore) -> anyhow::Result<()> {
    store.ensure_tables()?;
    let a = build_group_table(&content.catalog, Group::A)?;
    let b = build_group_table(&content.catalog, Group::B)?;
    persist_tables(&a, &b, store)?;
    Ok(())
}

#[derive(Serialize)]
struct RunMetadata<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'static str,
    seeds: Vec<u64>,
    config_hash: String,
    config: &'a C,
}

fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_metadata<C: Serialize>(dir: &Path, subcommand: &'static str, seeds: Vec<u64>, config: &C) -> anyhow::Result<()> {
    let meta = RunMetadata {
        tool: "dilemma",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seeds,
        config_hash: config_hash(config),
        config,
    };
    fs::create_dir_all(dir)?;
    let mut body = serde_json::to_vec_pretty(&meta)?;
    body.push(b'\n');
    fs::write(dir.join("run_metadata.json"), body)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Serve(args) => serve(&args),
        Command::Simulate(args) => run_simulate(&args),
        Command::Analyze(args) => run_analyze(&args),
        Command::Export(args) => run_export(&args),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------- serve

struct Connection {
    id: u64,
    tx: Sender<String>,
}

struct ServerState {
    hosts: BTreeMap<String, Host>,
    conns: BTreeMap<PlayerId, Connection>,
    rooms_created: u64,
}

struct Server {
    content: Arc<GameContent>,
    registry: Arc<TokenRegistry>,
    store: Arc<ResponseStore>,
    clock: Arc<dyn Clock + Send + Sync>,
    seed: u64,
    state: Mutex<ServerState>,
}

fn reject(room: &str, code: &str, message: String) -> String {
    WireMessage {
        v: PROTOCOL_VERSION,
        room: room.to_string(),
        seq: None,
        origin: PlayerId(0),
        payload: Payload::Error {
            code: code.to_string(),
            message,
        },
        token: String::new(),
    }
    .to_line()
}

impl Server {
    fn deliver(state: &ServerState, room: &str, out: Vec<Outbound>) {
        let Some(host) = state.hosts.get(room) else {
            return;
        };
        for o in out {
            let line = o.message.to_line();
            let targets: Vec<PlayerId> = match o.to {
                Recipient::All => host.room().members().iter().copied().collect(),
                Recipient::Player(p) => vec![p],
            };
            for p in targets {
                if let Some(c) = state.conns.get(&p) {
                    let _ = c.tx.send(line.clone());
                }
            }
        }
    }

    fn handle(&self, conn_id: u64, tx: &Sender<String>, line: &str) {
        let msg = match WireMessage::from_line(line) {
            Ok(m) => m,
            Err(e) => {
                let _ = tx.send(reject("", "BAD_MESSAGE", e.to_string()));
                return;
            }
        };
        let room_id = msg.room.clone();
        let origin = msg.origin;
        let mut state = self.state.lock().expect("server lock");
        let state = &mut *state;
        let result = match state.hosts.get_mut(&room_id) {
            Some(host) => host
                .publish(msg)
                .map_err(|e| host.error_reply(origin, &e).message.to_line()),
            None if matches!(msg.payload, Payload::Join { .. }) => {
                let seed = self.seed.wrapping_add(state.rooms_created);
                let room = Room::new(room_id.clone(), origin, self.content.clone(), seed);
                match Host::create(
                    room,
                    &msg.token,
                    self.registry.clone(),
                    self.store.clone(),
                    self.clock.clone(),
                ) {
                    Ok((host, out)) => {
                        state.rooms_created += 1;
                        log::info!("room `{room_id}` created by player {origin}");
                        state.hosts.insert(room_id.clone(), host);
                        Ok(out)
                    }
                    Err(e) => Err(reject(&room_id, e.code(), e.to_string())),
                }
            }
            None => Err(reject(&room_id, "UNKNOWN_ROOM", format!("unknown room `{room_id}`"))),
        };
        match result {
            Ok(out) => {
                state.conns.insert(
                    origin,
                    Connection {
                        id: conn_id,
                        tx: tx.clone(),
                    },
                );
                Self::deliver(state, &room_id, out);
            }
            Err(line) => {
                let _ = tx.send(line);
            }
        }
    }

    fn disconnect(&self, conn_id: u64) {
        let mut state = self.state.lock().expect("server lock");
        state.conns.retain(|_, c| c.id != conn_id);
    }
}

fn connection(server: Arc<Server>, stream: TcpStream, conn_id: u64) -> std::io::Result<()> {
    let (tx, rx) = channel::<String>();
    let mut writer = stream.try_clone()?;
    let writer_thread = thread::spawn(move || {
        for line in rx {
            if writeln!(writer, "{line}").and_then(|_| writer.flush()).is_err() {
                break;
            }
        }
    });
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        server.handle(conn_id, &tx, &line);
    }
    server.disconnect(conn_id);
    drop(tx);
    let _ = writer_thread.join();
    Ok(())
}

/// Binds, prints `listening on ADDR` and serves until killed. Every
/// committed row is synced to disk before it is acknowledged.
pub fn serve(args: &ServeArgs) -> Result<(), CliError> {
    let content = Arc::new(load_content(&args.fixtures)?);
    let tokens_path = args.tokens.display().to_string();
    let tokens = fs::File::open(&args.tokens).map_err(|e| fixture_err(&tokens_path, e))?;
    let registry = TokenRegistry::parse(tokens).map_err(|e| fixture_err(&tokens_path, e))?;
    let store = ResponseStore::open(&args.store).context("opening store")?;
    persist_catalog_tables(&content, &store)?;

    let listener = TcpListener::bind(&args.addr).with_context(|| format!("binding {}", args.addr))?;
    let local = listener.local_addr().context("local address")?;
    println!("listening on {local}");
    std::io::stdout().flush().ok();

    let server = Arc::new(Server {
        content,
        registry: Arc::new(registry),
        store: Arc::new(store),
        clock: Arc::new(SystemClock),
        seed: args.seed,
        state: Mutex::new(ServerState {
            hosts: BTreeMap::new(),
            conns: BTreeMap::new(),
            rooms_created: 0,
        }),
    });
    for (conn_id, stream) in listener.incoming().enumerate() {
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let server = server.clone();
        thread::spawn(move || {
            if let Err(e) = connection(server, stream, conn_id as u64) {
                log::debug!("connection {conn_id} ended: {e}");
            }
        });
    }
    Ok(())
}

// ------------------------------------------------------------- simulate

#[derive(Serialize)]
struct SessionSummary {
    room_id: String,
    seed: u64,
    clients: usize,
    log_len: u64,
    frames_sent: u64,
    frames_dropped: u64,
    aborted: Vec<PlayerId>,
    converged: bool,
}

/// Analysis settings that fit the amount of data: PCA and cluster counts
/// are reduced when there are too few rows.
fn fitted_config(contents: &StoreContents, group: Group, seed: u64) -> Result<Option<AnalyzeConfig>, AnalyticsError> {
    let matrix = match build_answer_matrix(contents, group, AttemptPolicy::Latest) {
        Ok(m) => m,
        Err(AnalyticsError::NoCompleteSessions) => return Ok(None),
        Err(e) => return Err(e),
    };
    let n = matrix.n_rows();
    let d = matrix.n_questions() * OPTIONS_PER_DILEMMA;
    if n < 2 {
        return Ok(None);
    }
    Ok(Some(AnalyzeConfig {
        group,
        pca_k: DEFAULT_PCA_K.min(n - 1).min(d),
        k: 3.min(n),
        seed,
        ..AnalyzeConfig::default()
    }))
}

pub fn run_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let content = Arc::new(load_content(&args.fixtures)?);
    if let Some(c) = args.clients {
        if !(1..=6).contains(&c) {
            return Err(CliError::Other(anyhow::anyhow!("--clients must be in 1..=6")));
        }
    }
    if !(0.0..1.0).contains(&args.drop_prob) {
        return Err(CliError::Other(anyhow::anyhow!("--drop-prob must be in [0, 1)")));
    }
    fs::create_dir_all(&args.out).context("creating output directory")?;
    let store_path = args.out.join("store.jsonl");
    if store_path.exists() {
        fs::remove_file(&store_path).context("removing previous store")?;
    }
    let store = Arc::new(
        ResponseStore::open(&store_path)
            .context("opening store")?
            .with_durability(Durability::Flush),
    );
    persist_catalog_tables(&content, &store)?;

    let network = NetworkConfig {
        latency_ms: args.latency_ms,
        drop_prob: args.drop_prob,
        reorder: args.reorder,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut transcript = String::new();
    let mut sessions = Vec::new();
    let mut violations = Vec::new();
    let mut seeds = vec![args.seed];
    for i in 0..args.sessions {
        let session_seed: u64 = rng.gen();
        let clients = args.clients.unwrap_or_else(|| rng.gen_range(2..=6));
        seeds.push(session_seed);
        let mut scenario = Scenario::new(session_seed, clients, network.clone());
        scenario.room_id = format!("s{}-room{}", args.seed, i + 1);
        scenario.abort_prob = args.abort_prob;
        scenario.reanswer_prob = args.reanswer_prob;
        scenario.start_ms = SIM_EPOCH_MS + i as u64 * 3_600_000;
        let report = simulate(&scenario, content.clone(), store.clone());
        for line in &report.transcript {
            transcript.push_str(&format!("{{\"session\":{},\"event\":{line}}}\n", i + 1));
        }
        violations.extend(
            report
                .violations
                .iter()
                .map(|v| format!("session {} ({}): {v}", i + 1, scenario.room_id)),
        );
        sessions.push(SessionSummary {
            room_id: scenario.room_id.clone(),
            seed: session_seed,
            clients,
            log_len: report.log_len,
            frames_sent: report.frames_sent,
            frames_dropped: report.frames_dropped,
            aborted: report.aborted.iter().copied().collect(),
            converged: report.converged,
        });
    }
    fs::write(args.out.join("transcript.jsonl"), transcript).context("writing transcript")?;
    let mut summary = serde_json::to_vec_pretty(&sessions).context("summary")?;
    summary.push(b'\n');
    fs::write(args.out.join("sessions.json"), summary).context("writing session summary")?;

    let contents = store.contents().context("reading store")?;
    for group in Group::ALL {
        let Some(config) = fitted_config(&contents, group, args.seed)? else {
            log::warn!("group {}: not enough complete sessions for figures", group.as_str());
            continue;
        };
        let bundle = analytics::analyze(&contents, &config)?;
        let dir = args.out.join("figures").join(format!("group_{}", group.as_str().to_lowercase()));
        emit_figures(&bundle, &dir, args.svg)?;
    }
    write_metadata(&args.out, "simulate", seeds, args)?;

    println!(
        "{} sessions, {} violations, store {}",
        args.sessions,
        violations.len(),
        store_path.display()
    );
    if violations.is_empty() {
        Ok(())
    } else {
        for v in &violations {
            eprintln!("invariant violated: {v}");
        }
        Err(CliError::Invariant(violations[0].clone()))
    }
}

// -------------------------------------------------------------- analyze

pub fn run_analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let store = ResponseStore::open_read_only(&args.store).context("opening store")?;
    let contents = store.contents().context("reading store")?;
    let config = AnalyzeConfig {
        group: args.group.into(),
        attempt: match args.attempt {
            AttemptArg::Latest => AttemptPolicy::Latest,
            AttemptArg::First => AttemptPolicy::First,
        },
        pca_k: args.pca_k,
        cluster: match args.cluster {
            ClusterArg::Kmeans => ClusterMethod::Kmeans,
            ClusterArg::Agglo => ClusterMethod::Agglomerative,
        },
        k: args.k,
        seed: args.seed,
        agglo_cap: args.agglo_cap,
    };
    let bundle = analytics::analyze(&contents, &config)?;
    let files = emit_figures(&bundle, &args.out, args.svg)?;
    write_metadata(&args.out, "analyze", vec![args.seed], args)?;
    println!(
        "{} sessions, {} files in {}",
        bundle.matrix.n_rows(),
        files.len(),
        args.out.display()
    );
    Ok(())
}

// --------------------------------------------------------------- export

pub fn run_export(args: &ExportArgs) -> Result<(), CliError> {
    let group = match args.table {
        1 => Group::A,
        2 => Group::B,
        t => return Err(CliError::Other(anyhow::anyhow!("--table must be 1 or 2, got {t}"))),
    };
    let store = ResponseStore::open_read_only(&args.store).context("opening store")?;
    let data = store.contents().context("reading store")?.answer_table_data(group);
    let now = args.now_ms.unwrap_or_else(|| SystemClock.now_ms());
    let path = export_answers(&args.out, &data, args.table, args.n, &ManualClock::new(now))
        .context("writing export")?;
    println!("{}", path.display());
    Ok(())
}
