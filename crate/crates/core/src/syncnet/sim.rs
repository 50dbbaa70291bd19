//! Deterministic discrete-event simulation of one room over a lossy network.
//!
//! Every client link carries numbered frames. Frames may be dropped or, when
//! `reorder` is set, overtake each other; receivers acknowledge each frame
//! and senders retransmit unacknowledged frames after a fixed timeout. The
//! host consumes each client's frames in send order. Clients rely on the
//! replica's hold-back buffer instead, so reordered broadcasts exercise it.
//! All randomness comes from ChaCha8 streams derived from the scenario seed,
//! so a seed fully determines the run.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::catalog::{Group, OPTIONS_PER_DILEMMA};
use crate::clock::{Clock, ManualClock};
use crate::responsestore::ResponseStore;
use crate::session::{GameContent, Phase, PlayerId, Position, Room, TriggerZone, MAX_MEMBERS};
use crate::syncnet::auth::TokenRegistry;
use crate::syncnet::host::{Host, Outbound, Recipient};
use crate::syncnet::replica::ClientReplica;
use crate::syncnet::wire::{MessageKind, Payload, RoomSnapshot, WireMessage};
use crate::voting::VoteChoice;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Inclusive one-way latency range.
    pub latency_ms: (u64, u64),
    pub drop_prob: f64,
    pub reorder: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            latency_ms: (0, 0),
            drop_prob: 0.0,
            reorder: false,
        }
    }
}

impl NetworkConfig {
    pub fn retransmit_after_ms(&self) -> u64 {
        2 * self.latency_ms.1 + 20
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub room_id: String,
    pub clients: usize,
    pub network: NetworkConfig,
    /// Chance that a bot gives up part way through.
    pub abort_prob: f64,
    /// Chance that a bot answers a dilemma a second time.
    pub reanswer_prob: f64,
    /// Chance of a wander move before heading to the next zone.
    pub wander_prob: f64,
    pub start_ms: u64,
    /// Upper bound on processed network events.
    pub max_events: u64,
}

impl Scenario {
    pub fn new(seed: u64, clients: usize, network: NetworkConfig) -> Self {
        Self {
            seed,
            room_id: format!("room-{seed}"),
            clients,
            network,
            abort_prob: 0.0,
            reanswer_prob: 0.1,
            wander_prob: 0.2,
            start_ms: 1_747_749_787_000,
            max_events: 2_000_000,
        }
    }

    pub fn token_for(&self, p: PlayerId) -> String {
        format!("tok-{}-{}", p.0, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct SimReport {
    pub seed: u64,
    pub converged: bool,
    pub final_phase: Phase,
    pub host_snapshot: RoomSnapshot,
    pub replica_snapshots: BTreeMap<PlayerId, Option<RoomSnapshot>>,
    pub log_len: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub end_ms: u64,
    pub aborted: BTreeSet<PlayerId>,
    /// One JSON object per network event.
    pub transcript: Vec<String>,
    pub violations: Vec<String>,
}

impl SimReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Dir {
    Up,
    Down,
}

#[derive(Debug)]
enum Ev {
    /// A bot hands a message to its uplink.
    Send { player: PlayerId, payload: Box<Payload> },
    Deliver { dir: Dir, player: PlayerId, frame: u64 },
    Ack { dir: Dir, player: PlayerId, frame: u64 },
    Retransmit { dir: Dir, player: PlayerId, frame: u64 },
}

#[derive(Debug, Default)]
struct Link {
    next_frame: u64,
    unacked: BTreeMap<u64, WireMessage>,
    last_delivery: u64,
    /// Receiver side.
    seen: BTreeSet<u64>,
    next_expected: u64,
    held: BTreeMap<u64, WireMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Waiting {
    Idle,
    Event(MessageKind),
    Prompt,
}

struct Bot {
    player: PlayerId,
    token: String,
    replica: ClientReplica,
    rng: ChaCha8Rng,
    zones: Vec<TriggerZone>,
    levels: Vec<u32>,
    level_idx: usize,
    answered: BTreeSet<u32>,
    answers: usize,
    abort_after: Option<usize>,
    reanswer_prob: f64,
    wander_prob: f64,
    favourite: BTreeMap<Group, u8>,
    pos: Position,
    waiting: Waiting,
    ready_sent: bool,
    voted: bool,
    aborted: bool,
    failed: bool,
    reanswer: Option<u32>,
}

impl Bot {
    fn on_applied(&mut self, events: &[WireMessage]) {
        for e in events {
            if e.origin == self.player && self.waiting == Waiting::Event(e.kind()) {
                self.waiting = Waiting::Idle;
            }
        }
    }

    fn choose_option(&mut self, group: Group) -> u8 {
        if self.rng.gen_bool(0.6) {
            self.favourite[&group]
        } else {
            self.rng.gen_range(0..OPTIONS_PER_DILEMMA as u8)
        }
    }

    fn zone_at(&self, pos: Position, level: u32, content: &GameContent) -> Option<&TriggerZone> {
        self.zones
            .iter()
            .find(|z| z.rect.contains(pos) && content.level_of(z.dilemma_id) == Some(level))
    }

    fn wander_target(&mut self, content: &GameContent) -> Option<Position> {
        let b = content.bounds;
        for _ in 0..32 {
            let p = Position {
                x: self.rng.gen_range(b.x0..=b.x1),
                y: self.rng.gen_range(b.y0..=b.y1),
            };
            if !self.zones.iter().any(|z| z.rect.contains(p)) {
                return Some(p);
            }
        }
        None
    }

    /// The next message this bot wants to send, if any.
    fn react(&mut self, expected_members: usize, content: &GameContent) -> Option<Payload> {
        if self.waiting == Waiting::Event(MessageKind::Join)
            && self.replica.members().contains(&self.player)
        {
            self.waiting = Waiting::Idle;
        }
        if self.failed || self.waiting == Waiting::Event(MessageKind::Join) {
            return None;
        }
        let phase = self.replica.phase()?;
        if self.waiting == Waiting::Prompt {
            let prompt = self.replica.take_prompt()?;
            let group = content.catalog.get(prompt.dilemma_id)?.group;
            let option_index = self.choose_option(group);
            self.waiting = Waiting::Event(MessageKind::Answer);
            if let Some(zone) = self.zones.iter().find(|z| z.zone_id == prompt.zone_id) {
                self.pos = zone.respawn_point;
            }
            if !self.answered.insert(prompt.dilemma_id) {
                self.reanswer = None;
            } else if self.reanswer.is_none() && self.rng.gen_bool(self.reanswer_prob) {
                self.reanswer = Some(prompt.dilemma_id);
            }
            self.answers += 1;
            return Some(Payload::Answer {
                dilemma_id: prompt.dilemma_id,
                option_index,
            });
        }
        if self.waiting != Waiting::Idle {
            return None;
        }
        match phase {
            Phase::Lobby => {
                if !self.ready_sent && self.replica.members().len() == expected_members {
                    self.ready_sent = true;
                    self.waiting = Waiting::Event(MessageKind::Ready);
                    return Some(Payload::Ready {});
                }
                None
            }
            Phase::Playing => {
                if self.aborted || self.level_idx >= self.levels.len() {
                    return None;
                }
                if self.abort_after.is_some_and(|k| self.answers >= k) {
                    self.aborted = true;
                    self.waiting = Waiting::Event(MessageKind::Abort);
                    return Some(Payload::Abort {});
                }
                let level = self.levels[self.level_idx];
                let remaining: Vec<&TriggerZone> = self
                    .zones
                    .iter()
                    .filter(|z| {
                        content.level_of(z.dilemma_id) == Some(level)
                            && (!self.answered.contains(&z.dilemma_id) || self.reanswer == Some(z.dilemma_id))
                    })
                    .collect();
                if remaining.is_empty() {
                    self.level_idx += 1;
                    self.answered.clear();
                    self.reanswer = None;
                    self.waiting = Waiting::Event(MessageKind::Exit);
                    return Some(Payload::Exit {});
                }
                let pos = self.pos;
                let dist = |z: &TriggerZone| {
                    let c = z.rect.center();
                    (c.x - pos.x).abs() + (c.y - pos.y).abs()
                };
                let target = remaining
                    .iter()
                    .min_by_key(|z| (dist(z), z.zone_id.clone()))
                    .map(|z| z.rect.center())
                    .expect("non-empty");
                let to = if self.rng.gen_bool(self.wander_prob) {
                    self.wander_target(content).unwrap_or(target)
                } else {
                    target
                };
                self.pos = to;
                self.waiting = Waiting::Event(MessageKind::Move);
                Some(Payload::Move { x: to.x, y: to.y })
            }
            Phase::Voting => {
                if self.voted || self.aborted {
                    return None;
                }
                self.voted = true;
                let choice = match self.rng.gen_range(0..3) {
                    0 => VoteChoice::Like,
                    1 => VoteChoice::Dislike,
                    _ => VoteChoice::Other,
                };
                self.waiting = Waiting::Event(MessageKind::Vote);
                Some(Payload::Vote { choice: Some(choice) })
            }
            Phase::Closed => None,
        }
    }

    /// After our own MOVE lands inside a zone of the current level the host
    /// opens a prompt; wait for it instead of moving on.
    fn after_move_confirmed(&mut self, content: &GameContent) {
        if self.aborted || self.level_idx >= self.levels.len() {
            return;
        }
        let level = self.levels[self.level_idx];
        if self.zone_at(self.pos, level, content).is_some() {
            self.waiting = Waiting::Prompt;
        }
    }
}

struct World {
    scenario: Scenario,
    content: Arc<GameContent>,
    clock: Arc<ManualClock>,
    net_rng: ChaCha8Rng,
    queue: BTreeMap<(u64, u64), Ev>,
    counter: u64,
    now: u64,
    links: BTreeMap<(Dir, PlayerId), Link>,
    host: Host,
    bots: BTreeMap<PlayerId, Bot>,
    transcript: Vec<String>,
    violations: Vec<String>,
    frames_sent: u64,
    frames_dropped: u64,
}

impl World {
    fn schedule(&mut self, at: u64, ev: Ev) {
        self.counter += 1;
        self.queue.insert((at, self.counter), ev);
    }

    fn latency(&mut self) -> u64 {
        let (lo, hi) = self.scenario.network.latency_ms;
        self.net_rng.gen_range(lo..=hi)
    }

    fn record(&mut self, dir: Dir, player: PlayerId, frame: u64, msg: Option<&WireMessage>) {
        let dir = match dir {
            Dir::Up => "up",
            Dir::Down => "down",
        };
        let line = match msg {
            Some(m) => json!({"t": self.now, "dir": dir, "player": player, "frame": frame, "msg": m}),
            None => json!({"t": self.now, "dir": dir, "player": player, "frame": frame, "dropped": true}),
        };
        self.transcript.push(line.to_string());
    }

    fn transmit(&mut self, dir: Dir, player: PlayerId, frame: u64) {
        self.frames_sent += 1;
        if self.net_rng.gen_bool(self.scenario.network.drop_prob) {
            self.frames_dropped += 1;
            self.record(dir, player, frame, None);
        } else {
            let mut at = self.now + self.latency();
            let link = self.links.entry((dir, player)).or_default();
            if !self.scenario.network.reorder {
                at = at.max(link.last_delivery);
                link.last_delivery = at;
            }
            self.schedule(at, Ev::Deliver { dir, player, frame });
        }
        let rto = self.scenario.network.retransmit_after_ms();
        self.schedule(self.now + rto, Ev::Retransmit { dir, player, frame });
    }

    fn send(&mut self, dir: Dir, player: PlayerId, msg: WireMessage) {
        let link = self.links.entry((dir, player)).or_default();
        let frame = link.next_frame;
        link.next_frame += 1;
        link.unacked.insert(frame, msg);
        self.transmit(dir, player, frame);
    }

    fn send_ack(&mut self, dir: Dir, player: PlayerId, frame: u64) {
        if !self.net_rng.gen_bool(self.scenario.network.drop_prob) {
            let at = self.now + self.latency();
            self.schedule(at, Ev::Ack { dir, player, frame });
        }
    }

    fn dispatch(&mut self, out: Vec<Outbound>) {
        for o in out {
            let line = o.message.to_line();
            for word in ["\"positive\"", "\"negative\"", "\"consensus\""] {
                if line.contains(word) {
                    self.violations
                        .push(format!("client-bound message leaks {word}: {line}"));
                }
            }
            match o.to {
                Recipient::All => {
                    let members: Vec<PlayerId> = self.host.room().members().iter().copied().collect();
                    for p in members {
                        self.send(Dir::Down, p, o.message.clone());
                    }
                }
                Recipient::Player(p) => self.send(Dir::Down, p, o.message),
            }
        }
    }

    fn host_receive(&mut self, msg: WireMessage) {
        let origin = msg.origin;
        let out = match self.host.publish(msg) {
            Ok(out) => out,
            Err(e) => {
                self.violations
                    .push(format!("t={} host rejected player {origin}: {e}", self.now));
                vec![self.host.error_reply(origin, &e)]
            }
        };
        if self.host.room().members().len() > MAX_MEMBERS {
            self.violations.push("room exceeded capacity".into());
        }
        self.dispatch(out);
    }

    fn bot_step(&mut self, player: PlayerId) {
        let expected = self.scenario.clients;
        let content = self.content.clone();
        let Some(bot) = self.bots.get_mut(&player) else {
            return;
        };
        if let Some(payload) = bot.react(expected, &content) {
            let think = bot.rng.gen_range(0..=30);
            self.schedule(self.now + think, Ev::Send { player, payload: Box::new(payload) });
        }
    }

    fn client_receive(&mut self, player: PlayerId, msg: WireMessage) {
        let content = self.content.clone();
        let Some(bot) = self.bots.get_mut(&player) else {
            return;
        };
        let was_error = msg.kind() == MessageKind::Error;
        let applied = bot.replica.receive(msg);
        let moved = bot.waiting == Waiting::Event(MessageKind::Move)
            && applied
                .iter()
                .any(|e| e.origin == player && e.kind() == MessageKind::Move);
        bot.on_applied(&applied);
        if moved {
            bot.after_move_confirmed(&content);
        }
        if was_error {
            bot.failed = true;
        }
        self.bot_step(player);
    }

    fn run(&mut self) {
        let mut processed = 0u64;
        while let Some(((at, _), ev)) = self.queue.pop_first() {
            processed += 1;
            if processed > self.scenario.max_events {
                self.violations
                    .push(format!("no quiescence after {} events", self.scenario.max_events));
                return;
            }
            self.now = at;
            self.clock.set(self.scenario.start_ms + at);
            match ev {
                Ev::Send { player, payload } => {
                    let token = self.bots[&player].token.clone();
                    let msg = WireMessage::client(&self.scenario.room_id, player, &token, *payload);
                    self.send(Dir::Up, player, msg);
                }
                Ev::Retransmit { dir, player, frame } => {
                    if self.links[&(dir, player)].unacked.contains_key(&frame) {
                        self.transmit(dir, player, frame);
                    }
                }
                Ev::Ack { dir, player, frame } => {
                    if let Some(link) = self.links.get_mut(&(dir, player)) {
                        link.unacked.remove(&frame);
                    }
                }
                Ev::Deliver { dir, player, frame } => {
                    let link = self.links.get_mut(&(dir, player)).expect("link exists");
                    let Some(msg) = link.unacked.get(&frame).cloned() else {
                        // already acknowledged: a stale copy
                        self.send_ack(dir, player, frame);
                        continue;
                    };
                    let fresh = link.seen.insert(frame);
                    self.send_ack(dir, player, frame);
                    if !fresh {
                        continue;
                    }
                    self.record(dir, player, frame, Some(&msg));
                    match dir {
                        Dir::Up => {
                            let link = self.links.get_mut(&(dir, player)).expect("link exists");
                            link.held.insert(frame, msg);
                            let mut ready = Vec::new();
                            while let Some(m) = link.held.remove(&link.next_expected) {
                                link.next_expected += 1;
                                ready.push(m);
                            }
                            for m in ready {
                                self.host_receive(m);
                            }
                        }
                        Dir::Down => self.client_receive(player, msg),
                    }
                }
            }
        }
    }
}

/// Runs one scenario to quiescence and checks the replication invariants.
pub fn simulate(scenario: &Scenario, content: Arc<GameContent>, store: Arc<ResponseStore>) -> SimReport {
    assert!(
        (1..=MAX_MEMBERS).contains(&scenario.clients),
        "between 1 and {MAX_MEMBERS} clients"
    );
    let players: Vec<PlayerId> = (1..=scenario.clients as u32).map(PlayerId).collect();
    let mut registry = TokenRegistry::new();
    for &p in &players {
        registry.insert(p, scenario.token_for(p));
    }
    let clock = Arc::new(ManualClock::new(scenario.start_ms));
    let room = Room::new(scenario.room_id.clone(), players[0], content.clone(), scenario.seed);
    let zones = room.zones().to_vec();
    let (host, created) = Host::create(
        room,
        &scenario.token_for(players[0]),
        Arc::new(registry),
        store,
        clock.clone() as Arc<dyn Clock + Send + Sync>,
    )
    .expect("host token is valid");

    let total_dilemmas = content.catalog.dilemmas().len();
    let bots = players
        .iter()
        .map(|&p| {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(p.0 as u64)));
            let abort_after = rng
                .gen_bool(scenario.abort_prob)
                .then(|| rng.gen_range(0..=total_dilemmas));
            let favourite = [Group::A, Group::B]
                .into_iter()
                .map(|g| (g, rng.gen_range(0..OPTIONS_PER_DILEMMA as u8)))
                .collect();
            let bot = Bot {
                player: p,
                token: scenario.token_for(p),
                replica: ClientReplica::new(p, scenario.room_id.clone()),
                rng,
                zones: zones.clone(),
                levels: content.levels(),
                level_idx: 0,
                answered: BTreeSet::new(),
                answers: 0,
                abort_after,
                reanswer_prob: scenario.reanswer_prob,
                wander_prob: scenario.wander_prob,
                favourite,
                pos: content.spawn,
                waiting: if p == players[0] {
                    Waiting::Idle
                } else {
                    Waiting::Event(MessageKind::Join)
                },
                ready_sent: false,
                voted: false,
                aborted: false,
                failed: false,
                reanswer: None,
            };
            (p, bot)
        })
        .collect();

    let mut world = World {
        scenario: scenario.clone(),
        content,
        clock,
        net_rng: ChaCha8Rng::seed_from_u64(scenario.seed),
        queue: BTreeMap::new(),
        counter: 0,
        now: 0,
        links: BTreeMap::new(),
        host,
        bots,
        transcript: Vec::new(),
        violations: Vec::new(),
        frames_sent: 0,
        frames_dropped: 0,
    };
    world.dispatch(created);
    for &p in &players[1..] {
        let at = world.net_rng.gen_range(0..=50);
        world.schedule(at, Ev::Send { player: p, payload: Box::new(Payload::Join { at: None }) });
    }
    world.run();
    finish(world)
}

fn finish(mut world: World) -> SimReport {
    let host_snapshot = world.host.snapshot();
    let host_bytes = host_snapshot.to_bytes();
    let mut converged = true;
    let mut replica_snapshots = BTreeMap::new();
    for (&p, bot) in &world.bots {
        let snap = bot.replica.is_initialized().then(|| bot.replica.snapshot());
        match &snap {
            Some(s) if s.to_bytes() == host_bytes => {}
            Some(s) => {
                converged = false;
                world.violations.push(format!(
                    "replica {p} diverged: seq {} vs host {}",
                    s.seq, host_snapshot.seq
                ));
            }
            None => {
                converged = false;
                world.violations.push(format!("replica {p} never initialized"));
            }
        }
        if bot.replica.pending() > 0 {
            world
                .violations
                .push(format!("replica {p} still holds {} events", bot.replica.pending()));
        }
        replica_snapshots.insert(p, snap);
    }
    let log = world.host.log();
    if !log.iter().enumerate().all(|(i, e)| e.seq == i as u64 + 1) {
        world.violations.push("event log seqs are not contiguous".into());
    }
    let host_player = world.host.room().host();
    if log
        .iter()
        .any(|e| e.kind() == MessageKind::SceneDelta && e.origin != host_player)
    {
        world.violations.push("SCENE_DELTA from a non-host origin".into());
    }
    let aborted = world
        .host
        .room()
        .members()
        .iter()
        .copied()
        .filter(|&p| world.host.room().is_aborted(p))
        .collect();
    SimReport {
        seed: world.scenario.seed,
        converged,
        final_phase: world.host.room().phase(),
        host_snapshot,
        replica_snapshots,
        log_len: world.host.head(),
        frames_sent: world.frames_sent,
        frames_dropped: world.frames_dropped,
        end_ms: world.now,
        aborted,
        transcript: world.transcript,
        violations: world.violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::tests::content;

    fn run(seed: u64, clients: usize, network: NetworkConfig) -> SimReport {
        let store = Arc::new(ResponseStore::in_memory());
        store.ensure_tables().unwrap();
        simulate(&Scenario::new(seed, clients, network), content(), store)
    }

    #[test]
    fn perfect_network_completes() {
        let r = run(1, 3, NetworkConfig::default());
        assert!(r.ok(), "{:?}", r.violations);
        assert!(r.converged);
        assert_eq!(r.final_phase, Phase::Closed);
        assert_eq!(r.frames_dropped, 0);
    }

    #[test]
    fn lossy_reordering_network_converges() {
        let net = NetworkConfig {
            latency_ms: (0, 200),
            drop_prob: 0.3,
            reorder: true,
        };
        for seed in 0..5 {
            let r = run(seed, 4, net.clone());
            assert!(r.ok(), "seed {seed}: {:?}", r.violations);
            assert_eq!(r.final_phase, Phase::Closed);
            assert!(r.frames_dropped > 0);
        }
    }

    #[test]
    fn same_seed_same_transcript() {
        let net = NetworkConfig {
            latency_ms: (5, 80),
            drop_prob: 0.2,
            reorder: true,
        };
        let a = run(42, 5, net.clone());
        let b = run(42, 5, net);
        assert_eq!(a.transcript, b.transcript);
        assert_eq!(a.host_snapshot, b.host_snapshot);
    }
}
