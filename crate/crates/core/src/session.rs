//! Rooms and the play loop: lobby membership, trigger zones, answer
//! recording, the level completion gate and session aborts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{DilemmaCatalog, IdeologyCategory, OPTIONS_PER_DILEMMA};
use crate::clock::{format_timestamp, Clock};
use crate::responsestore::{ResponseStore, StoreError, StoredRow};
use crate::voting::{ConsensusScore, Vote};
use crate::worldstate::{derive_delta, EffectMap, SceneDelta, WorldError, WorldState};

/// Maximum room size, host included.
pub const MAX_MEMBERS: usize = 6;

pub const ZONE_HEADER: [&str; 8] = [
    "zone_id",
    "dilemma_id",
    "x0",
    "y0",
    "x1",
    "y1",
    "respawn_x",
    "respawn_y",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct PlayerId(pub u32);

/// Accepts a number or a numeric string, so ids used as JSON map keys read back.
impl<'de> Deserialize<'de> for PlayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct Visitor;
        impl serde::de::Visitor<'_> for Visitor {
            type Value = PlayerId;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a player id")
            }

            fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<PlayerId, E> {
                u32::try_from(v).map(PlayerId).map_err(E::custom)
            }

            fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<PlayerId, E> {
                u32::try_from(v).map(PlayerId).map_err(E::custom)
            }

            fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<PlayerId, E> {
                v.parse().map(PlayerId).map_err(E::custom)
            }
        }
        d.deserialize_any(Visitor)
    }
}

impl fmt::Display for PlayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub x: i32,
    pub y: i32,
}

/// Inclusive grid rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn contains(&self, p: Position) -> bool {
        (self.x0..=self.x1).contains(&p.x) && (self.y0..=self.y1).contains(&p.y)
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.contains(Position {
            x: other.x0,
            y: other.y0,
        }) && self.contains(Position {
            x: other.x1,
            y: other.y1,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.x0 > self.x1 || self.y0 > self.y1
    }

    pub fn center(&self) -> Position {
        Position {
            x: self.x0 + (self.x1 - self.x0) / 2,
            y: self.y0 + (self.y1 - self.y0) / 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerZone {
    pub zone_id: String,
    pub dilemma_id: u32,
    pub rect: Rect,
    pub respawn_point: Position,
}

#[derive(Debug, Error)]
pub enum ContentError {
    #[error("zone file header does not match `{}`", ZONE_HEADER.join(","))]
    MalformedHeader,
    #[error("zone row {row}: {reason}")]
    BadZone { row: u64, reason: String },
    #[error("zone `{zone}` references unknown dilemma {dilemma_id}")]
    UnknownDilemma { zone: String, dilemma_id: u32 },
    #[error("zone `{0}` is invalid: {1}")]
    InvalidZone(String, &'static str),
    #[error("duplicate zone id `{0}`")]
    DuplicateZone(String),
    #[error("dilemma {0} has no trigger zone")]
    UnplacedDilemma(u32),
    #[error("no effect defined for dilemma {0} / {1}")]
    MissingEffect(u32, IdeologyCategory),
    #[error("effect map references unknown dilemma {0}")]
    EffectForUnknownDilemma(u32),
    #[error("no free spawn cell inside the level bounds")]
    NoSpawn,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub fn parse_zones<R: Read>(source: R) -> Result<Vec<TriggerZone>, ContentError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = reader.records();
    let header = records.next().ok_or(ContentError::MalformedHeader)??;
    if header.iter().ne(ZONE_HEADER.iter().copied()) {
        return Err(ContentError::MalformedHeader);
    }
    let mut zones = Vec::new();
    for record in records {
        let record = record?;
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != ZONE_HEADER.len() {
            return Err(ContentError::BadZone {
                row,
                reason: format!("expected 8 fields, found {}", record.len()),
            });
        }
        let num = |i: usize| -> Result<i32, ContentError> {
            record[i].trim().parse().map_err(|_| ContentError::BadZone {
                row,
                reason: format!("`{}` is not an integer ({})", &record[i], ZONE_HEADER[i]),
            })
        };
        let dilemma_id = num(1)?;
        zones.push(TriggerZone {
            zone_id: record[0].trim().to_string(),
            dilemma_id: u32::try_from(dilemma_id).map_err(|_| ContentError::BadZone {
                row,
                reason: "negative dilemma_id".into(),
            })?,
            rect: Rect {
                x0: num(2)?,
                y0: num(3)?,
                x1: num(4)?,
                y1: num(5)?,
            },
            respawn_point: Position {
                x: num(6)?,
                y: num(7)?,
            },
        });
    }
    Ok(zones)
}

/// Everything a room needs that does not change during a session.
#[derive(Debug, Clone)]
pub struct GameContent {
    pub catalog: DilemmaCatalog,
    pub zones: Vec<TriggerZone>,
    pub effects: EffectMap,
    pub initial_world: WorldState,
    pub bounds: Rect,
    pub spawn: Position,
}

impl GameContent {
    pub fn new(
        catalog: DilemmaCatalog,
        zones: Vec<TriggerZone>,
        effects: EffectMap,
        bounds: Rect,
    ) -> Result<Self, ContentError> {
        let mut ids = HashSet::new();
        for z in &zones {
            if !ids.insert(z.zone_id.as_str()) {
                return Err(ContentError::DuplicateZone(z.zone_id.clone()));
            }
            if catalog.get(z.dilemma_id).is_none() {
                return Err(ContentError::UnknownDilemma {
                    zone: z.zone_id.clone(),
                    dilemma_id: z.dilemma_id,
                });
            }
            if z.rect.is_degenerate() {
                return Err(ContentError::InvalidZone(z.zone_id.clone(), "degenerate rectangle"));
            }
            if z.rect.contains(z.respawn_point) {
                return Err(ContentError::InvalidZone(z.zone_id.clone(), "respawn point inside zone"));
            }
            if !bounds.contains_rect(&z.rect) || !bounds.contains(z.respawn_point) {
                return Err(ContentError::InvalidZone(z.zone_id.clone(), "outside level bounds"));
            }
        }
        for d in catalog.dilemmas() {
            if !zones.iter().any(|z| z.dilemma_id == d.dilemma_id) {
                return Err(ContentError::UnplacedDilemma(d.dilemma_id));
            }
            for category in d.group.categories() {
                if effects.get(d.dilemma_id, category).is_none_or(|c| c.is_empty()) {
                    return Err(ContentError::MissingEffect(d.dilemma_id, category));
                }
            }
        }
        if let Some((id, _)) = effects.keys().find(|(id, _)| catalog.get(*id).is_none()) {
            return Err(ContentError::EffectForUnknownDilemma(id));
        }
        let spawn = (bounds.y0..=bounds.y1)
            .flat_map(|y| (bounds.x0..=bounds.x1).map(move |x| Position { x, y }))
            .find(|p| !zones.iter().any(|z| z.rect.contains(*p)))
            .ok_or(ContentError::NoSpawn)?;
        let initial_world = effects.initial_world(&catalog);
        Ok(Self {
            catalog,
            zones,
            effects,
            initial_world,
            bounds,
            spawn,
        })
    }

    pub fn levels(&self) -> Vec<u32> {
        self.catalog.levels()
    }

    pub fn level_of(&self, dilemma_id: u32) -> Option<u32> {
        self.catalog.get(dilemma_id).map(|d| d.level)
    }

    /// Zone placement for one session: dilemmas are shuffled across the
    /// zones of their own level with a seeded RNG.
    pub fn layout(&self, seed: u64) -> Vec<TriggerZone> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut zones = self.zones.clone();
        for level in self.levels() {
            let slots: Vec<usize> = zones
                .iter()
                .enumerate()
                .filter(|(_, z)| self.level_of(z.dilemma_id) == Some(level))
                .map(|(i, _)| i)
                .collect();
            let mut ids: Vec<u32> = slots.iter().map(|&i| zones[i].dilemma_id).collect();
            ids.shuffle(&mut rng);
            for (slot, id) in slots.into_iter().zip(ids) {
                zones[slot].dilemma_id = id;
            }
        }
        zones
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Lobby,
    Playing,
    Voting,
    Closed,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Lobby => "LOBBY",
            Phase::Playing => "PLAYING",
            Phase::Voting => "VOTING",
            Phase::Closed => "CLOSED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub player: PlayerId,
    pub dilemma_id: u32,
    pub option_index: u8,
    pub category: IdeologyCategory,
    pub timestamp: String,
    pub room_id: String,
    pub position: Position,
    pub answer_latency_ms: u64,
    pub attempt: u32,
}

/// What a player sees when entering a trigger zone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilemmaPrompt {
    pub zone_id: String,
    pub dilemma_id: u32,
    pub level: u32,
    pub venue: String,
    pub prompt: String,
    pub options: [String; OPTIONS_PER_DILEMMA],
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct OpenPrompt {
    pub zone_id: String,
    pub dilemma_id: u32,
    pub issued_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub record: ResponseRecord,
    pub delta: SceneDelta,
    pub relocated_to: Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitOutcome {
    pub exited_level: u32,
    pub next_level: Option<u32>,
    pub voting_started: bool,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("player {0} is already in a room")]
    AlreadyInRoom(PlayerId),
    #[error("room `{0}` already exists")]
    RoomExists(String),
    #[error("unknown room `{0}`")]
    UnknownRoom(String),
    #[error("room is full ({MAX_MEMBERS} players)")]
    RoomFull,
    #[error("operation needs phase {expected}, room is {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("player {0} is already a member")]
    DuplicateMember(PlayerId),
    #[error("player {0} is not a member")]
    NotMember(PlayerId),
    #[error("only the host may do this")]
    NotHost,
    #[error("not every member is ready")]
    NotAllReady,
    #[error("position ({}, {}) is out of bounds", .0.x, .0.y)]
    OutOfBounds(Position),
    #[error("player {player} has no open prompt for dilemma {dilemma_id}")]
    NotPrompted { player: PlayerId, dilemma_id: u32 },
    #[error("option index {0} is not in 0..6")]
    BadOption(u8),
    #[error("level {0} still has unanswered dilemmas")]
    LevelIncomplete(u32),
    #[error("player {0} has already finished or aborted")]
    NotActive(PlayerId),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn require(phase: Phase, expected: Phase) -> Result<(), SessionError> {
    if phase == expected {
        Ok(())
    } else {
        Err(SessionError::WrongPhase {
            expected,
            actual: phase,
        })
    }
}

/// One isolated session of 1–6 players. Every mutating method either fails
/// without changing anything or succeeds and bumps `seq` by one.
#[derive(Debug, Clone)]
pub struct Room {
    pub(crate) room_id: String,
    pub(crate) host: PlayerId,
    pub(crate) members: BTreeSet<PlayerId>,
    pub(crate) phase: Phase,
    pub(crate) ready: BTreeSet<PlayerId>,
    pub(crate) progress: BTreeMap<PlayerId, BTreeSet<u32>>,
    pub(crate) world: WorldState,
    pub(crate) seq: u64,
    pub(crate) content: Arc<GameContent>,
    pub(crate) zones: Vec<TriggerZone>,
    pub(crate) session_seed: u64,
    pub(crate) positions: BTreeMap<PlayerId, Position>,
    pub(crate) prompts: BTreeMap<PlayerId, OpenPrompt>,
    pub(crate) attempts: BTreeMap<(PlayerId, u32), u32>,
    pub(crate) current_level: BTreeMap<PlayerId, usize>,
    pub(crate) finished: BTreeSet<PlayerId>,
    pub(crate) aborted: BTreeSet<PlayerId>,
    pub(crate) votes: BTreeMap<PlayerId, Vote>,
    pub(crate) consensus: Option<ConsensusScore>,
}

impl Room {
    pub fn new(
        room_id: impl Into<String>,
        host: PlayerId,
        content: Arc<GameContent>,
        session_seed: u64,
    ) -> Self {
        let zones = content.layout(session_seed);
        let world = content.initial_world.clone();
        let spawn = content.spawn;
        Self {
            room_id: room_id.into(),
            host,
            members: [host].into(),
            phase: Phase::Lobby,
            ready: BTreeSet::new(),
            progress: BTreeMap::new(),
            world,
            seq: 0,
            content,
            zones,
            session_seed,
            positions: [(host, spawn)].into(),
            prompts: BTreeMap::new(),
            attempts: BTreeMap::new(),
            current_level: BTreeMap::new(),
            finished: BTreeSet::new(),
            aborted: BTreeSet::new(),
            votes: BTreeMap::new(),
            consensus: None,
        }
    }

    pub fn room_id(&self) -> &str {
        &self.room_id
    }

    pub fn host(&self) -> PlayerId {
        self.host
    }

    pub fn members(&self) -> &BTreeSet<PlayerId> {
        &self.members
    }

    pub fn is_member(&self, p: PlayerId) -> bool {
        self.members.contains(&p)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn ready(&self) -> &BTreeSet<PlayerId> {
        &self.ready
    }

    pub fn progress(&self, p: PlayerId) -> Option<&BTreeSet<u32>> {
        self.progress.get(&p)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn session_seed(&self) -> u64 {
        self.session_seed
    }

    pub fn content(&self) -> &GameContent {
        &self.content
    }

    /// This session's zone placement.
    pub fn zones(&self) -> &[TriggerZone] {
        &self.zones
    }

    pub fn position(&self, p: PlayerId) -> Option<Position> {
        self.positions.get(&p).copied()
    }

    pub fn positions(&self) -> &BTreeMap<PlayerId, Position> {
        &self.positions
    }

    pub fn has_open_prompt(&self, p: PlayerId) -> bool {
        self.prompts.contains_key(&p)
    }

    pub fn attempts(&self, p: PlayerId, dilemma_id: u32) -> u32 {
        self.attempts.get(&(p, dilemma_id)).copied().unwrap_or(0)
    }

    /// The level `p` is currently playing, if any.
    pub fn current_level(&self, p: PlayerId) -> Option<u32> {
        let idx = *self.current_level.get(&p)?;
        self.content.levels().get(idx).copied()
    }

    pub fn is_finished(&self, p: PlayerId) -> bool {
        self.finished.contains(&p)
    }

    pub fn is_aborted(&self, p: PlayerId) -> bool {
        self.aborted.contains(&p)
    }

    fn member(&self, p: PlayerId) -> Result<(), SessionError> {
        if self.members.contains(&p) {
            Ok(())
        } else {
            Err(SessionError::NotMember(p))
        }
    }

    pub fn join(&mut self, p: PlayerId) -> Result<(), SessionError> {
        require(self.phase, Phase::Lobby)?;
        if self.members.contains(&p) {
            return Err(SessionError::DuplicateMember(p));
        }
        if self.members.len() >= MAX_MEMBERS {
            return Err(SessionError::RoomFull);
        }
        self.members.insert(p);
        self.positions.insert(p, self.content.spawn);
        self.seq += 1;
        Ok(())
    }

    /// Leaves a room in the lobby. A leaving host hands over to the lowest
    /// remaining id; the last member leaving closes the room.
    pub fn leave(&mut self, p: PlayerId) -> Result<(), SessionError> {
        require(self.phase, Phase::Lobby)?;
        self.member(p)?;
        self.members.remove(&p);
        self.ready.remove(&p);
        self.positions.remove(&p);
        match self.members.first() {
            Some(&next) if p == self.host => self.host = next,
            Some(_) => {}
            None => self.phase = Phase::Closed,
        }
        self.seq += 1;
        Ok(())
    }

    pub fn mark_ready(&mut self, p: PlayerId) -> Result<(), SessionError> {
        require(self.phase, Phase::Lobby)?;
        self.member(p)?;
        self.ready.insert(p);
        self.seq += 1;
        Ok(())
    }

    pub fn all_ready(&self) -> bool {
        self.ready == self.members
    }

    pub fn start_game(&mut self) -> Result<(), SessionError> {
        require(self.phase, Phase::Lobby)?;
        if !self.all_ready() {
            return Err(SessionError::NotAllReady);
        }
        self.phase = Phase::Playing;
        self.progress = self.members.iter().map(|&p| (p, BTreeSet::new())).collect();
        self.current_level = self.members.iter().map(|&p| (p, 0)).collect();
        self.seq += 1;
        Ok(())
    }

    /// Moves `p` (local authority over its own position) and opens a prompt
    /// when the new position lies inside a zone of the player's current
    /// level. A player with an open prompt gets no second one.
    pub fn on_move(
        &mut self,
        p: PlayerId,
        pos: Position,
        clock: &dyn Clock,
    ) -> Result<Option<DilemmaPrompt>, SessionError> {
        require(self.phase, Phase::Playing)?;
        self.member(p)?;
        if !self.content.bounds.contains(pos) {
            return Err(SessionError::OutOfBounds(pos));
        }
        self.positions.insert(p, pos);
        self.seq += 1;

        if self.prompts.contains_key(&p) || self.finished.contains(&p) || self.aborted.contains(&p)
        {
            return Ok(None);
        }
        let Some(level) = self.current_level(p) else {
            return Ok(None);
        };
        let Some(zone) = self
            .zones
            .iter()
            .find(|z| z.rect.contains(pos) && self.content.level_of(z.dilemma_id) == Some(level))
        else {
            return Ok(None);
        };
        let dilemma = self
            .content
            .catalog
            .get(zone.dilemma_id)
            .expect("content validated zone dilemmas");
        let prompt = DilemmaPrompt {
            zone_id: zone.zone_id.clone(),
            dilemma_id: dilemma.dilemma_id,
            level,
            venue: dilemma.venue.clone(),
            prompt: dilemma.prompt.clone(),
            options: dilemma.options.clone(),
            attempt: self.attempts(p, dilemma.dilemma_id) + 1,
        };
        self.prompts.insert(
            p,
            OpenPrompt {
                zone_id: zone.zone_id.clone(),
                dilemma_id: dilemma.dilemma_id,
                issued_at_ms: clock.now_ms(),
            },
        );
        Ok(Some(prompt))
    }

    /// Records the answer, applies its scene delta and moves `p` out of the
    /// zone. The row is committed to `store` before any room state changes,
    /// so a store failure leaves the room untouched.
    pub fn submit_answer(
        &mut self,
        p: PlayerId,
        dilemma_id: u32,
        option_index: u8,
        clock: &dyn Clock,
        store: &ResponseStore,
    ) -> Result<AnswerOutcome, SessionError> {
        require(self.phase, Phase::Playing)?;
        self.member(p)?;
        if option_index as usize >= OPTIONS_PER_DILEMMA {
            return Err(SessionError::BadOption(option_index));
        }
        let open = match self.prompts.get(&p) {
            Some(open) if open.dilemma_id == dilemma_id => open,
            _ => return Err(SessionError::NotPrompted { player: p, dilemma_id }),
        };
        let zone = self
            .zones
            .iter()
            .find(|z| z.zone_id == open.zone_id)
            .expect("prompt zone exists");
        let dilemma = self
            .content
            .catalog
            .get(dilemma_id)
            .expect("content validated zone dilemmas");
        let category = dilemma
            .category_of(option_index)
            .expect("option index checked");
        let delta = derive_delta(dilemma, category, &self.content.effects)?;
        let world = self.world.apply_delta(&delta)?;

        let now = clock.now_ms();
        let record = ResponseRecord {
            player: p,
            dilemma_id,
            option_index,
            category,
            timestamp: format_timestamp(now),
            room_id: self.room_id.clone(),
            position: self.positions[&p],
            answer_latency_ms: now.saturating_sub(open.issued_at_ms),
            attempt: self.attempts(p, dilemma_id) + 1,
        };
        store.append_response(&StoredRow::new(record.clone(), self.session_seed))?;

        let respawn = zone.respawn_point;
        self.world = world;
        self.prompts.remove(&p);
        self.attempts.insert((p, dilemma_id), record.attempt);
        self.progress.entry(p).or_default().insert(dilemma_id);
        self.positions.insert(p, respawn);
        self.seq += 1;
        Ok(AnswerOutcome {
            record,
            delta,
            relocated_to: respawn,
        })
    }

    /// True iff `p` has answered every dilemma of `level`.
    pub fn can_exit_level(&self, p: PlayerId, level: u32) -> bool {
        let answered = self.progress.get(&p);
        self.content
            .catalog
            .level_dilemmas(level)
            .iter()
            .all(|d| answered.is_some_and(|a| a.contains(d)))
    }

    /// Leaves the player's current level through the exit. Leaving the last
    /// level finishes the player; once every member has finished or aborted
    /// the room moves to voting.
    pub fn exit_level(&mut self, p: PlayerId) -> Result<ExitOutcome, SessionError> {
        require(self.phase, Phase::Playing)?;
        self.member(p)?;
        let level = self.current_level(p).ok_or(SessionError::NotActive(p))?;
        if self.finished.contains(&p) || self.aborted.contains(&p) {
            return Err(SessionError::NotActive(p));
        }
        if !self.can_exit_level(p, level) {
            return Err(SessionError::LevelIncomplete(level));
        }
        let idx = self.current_level[&p] + 1;
        let next_level = self.content.levels().get(idx).copied();
        self.current_level.insert(p, idx);
        self.prompts.remove(&p);
        if next_level.is_none() {
            self.finished.insert(p);
        }
        let voting_started = self.maybe_begin_voting();
        self.seq += 1;
        Ok(ExitOutcome {
            exited_level: level,
            next_level,
            voting_started,
        })
    }

    /// Gives up the session: every row `p` committed in this room is flagged
    /// incomplete. Returns the number of flagged rows.
    pub fn abort_session(
        &mut self,
        p: PlayerId,
        store: &ResponseStore,
    ) -> Result<usize, SessionError> {
        require(self.phase, Phase::Playing)?;
        self.member(p)?;
        if self.aborted.contains(&p) {
            return Ok(0);
        }
        let flagged: u32 = self
            .attempts
            .iter()
            .filter(|((player, _), _)| *player == p)
            .map(|(_, n)| *n)
            .sum();
        if flagged > 0 {
            store.mark_incomplete(&self.room_id, p)?;
        }
        self.aborted.insert(p);
        self.prompts.remove(&p);
        self.maybe_begin_voting();
        self.seq += 1;
        Ok(flagged as usize)
    }

    fn maybe_begin_voting(&mut self) -> bool {
        let done = self
            .members
            .iter()
            .all(|p| self.finished.contains(p) || self.aborted.contains(p));
        if self.phase == Phase::Playing && done {
            self.phase = Phase::Voting;
            true
        } else {
            false
        }
    }

    /// Host-driven move to voting regardless of progress.
    pub fn begin_voting(&mut self) -> Result<(), SessionError> {
        require(self.phase, Phase::Playing)?;
        self.phase = Phase::Voting;
        self.prompts.clear();
        self.seq += 1;
        Ok(())
    }
}

/// Directory of rooms that enforces one room per player.
#[derive(Debug)]
pub struct Lobby {
    content: Arc<GameContent>,
    rooms: BTreeMap<String, Room>,
    player_room: BTreeMap<PlayerId, String>,
}

impl Lobby {
    pub fn new(content: Arc<GameContent>) -> Self {
        Self {
            content,
            rooms: BTreeMap::new(),
            player_room: BTreeMap::new(),
        }
    }

    fn check_free(&self, p: PlayerId) -> Result<(), SessionError> {
        match self.player_room.get(&p) {
            Some(room) if self.rooms.get(room).is_some_and(|r| r.phase != Phase::Closed) => {
                Err(SessionError::AlreadyInRoom(p))
            }
            _ => Ok(()),
        }
    }

    pub fn create_room(
        &mut self,
        room_id: impl Into<String>,
        host: PlayerId,
        session_seed: u64,
    ) -> Result<&mut Room, SessionError> {
        let room_id = room_id.into();
        self.check_free(host)?;
        if self.rooms.get(&room_id).is_some_and(|r| r.phase != Phase::Closed) {
            return Err(SessionError::RoomExists(room_id));
        }
        let room = Room::new(room_id.clone(), host, self.content.clone(), session_seed);
        self.player_room.insert(host, room_id.clone());
        self.rooms.insert(room_id.clone(), room);
        Ok(self.rooms.get_mut(&room_id).expect("just inserted"))
    }

    pub fn join_room(&mut self, room_id: &str, p: PlayerId) -> Result<&mut Room, SessionError> {
        self.check_free(p)?;
        let room = self
            .rooms
            .get_mut(room_id)
            .ok_or_else(|| SessionError::UnknownRoom(room_id.to_string()))?;
        room.join(p)?;
        self.player_room.insert(p, room_id.to_string());
        Ok(room)
    }

    pub fn leave_room(&mut self, p: PlayerId) -> Result<(), SessionError> {
        let room_id = self
            .player_room
            .get(&p)
            .cloned()
            .ok_or(SessionError::NotMember(p))?;
        let room = self
            .rooms
            .get_mut(&room_id)
            .ok_or_else(|| SessionError::UnknownRoom(room_id.clone()))?;
        room.leave(p)?;
        self.player_room.remove(&p);
        Ok(())
    }

    pub fn room(&self, room_id: &str) -> Option<&Room> {
        self.rooms.get(room_id)
    }

    pub fn room_mut(&mut self, room_id: &str) -> Option<&mut Room> {
        self.rooms.get_mut(room_id)
    }

    pub fn room_of(&self, p: PlayerId) -> Option<&Room> {
        self.player_room.get(&p).and_then(|r| self.rooms.get(r))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::catalog::{Dilemma, Group};
    use crate::clock::ManualClock;
    use crate::worldstate::ObjectChange;

    /// Two levels: level 1 has dilemmas 1 and 2 (group A), level 2 has
    /// dilemma 3 (group B). Zones are 3×3 squares along y = 10.
    pub(crate) fn content() -> Arc<GameContent> {
        let mk = |id: u32, group: Group, level: u32| Dilemma {
            dilemma_id: id,
            group,
            venue: format!("VENUE{id}"),
            level,
            prompt: format!("Question {id}?"),
            options: std::array::from_fn(|i| format!("answer {id}.{i}")),
        };
        let catalog = DilemmaCatalog::new(vec![
            mk(1, Group::A, 1),
            mk(2, Group::A, 1),
            mk(3, Group::B, 2),
        ])
        .unwrap();
        let mut effects = EffectMap::default();
        for d in catalog.dilemmas() {
            for c in d.group.categories() {
                effects.insert(
                    d.dilemma_id,
                    c,
                    ObjectChange {
                        object_id: format!("building_{}", d.dilemma_id),
                        enable: Some(true),
                        add_tags: [c.label().to_string()].into(),
                        remove_tags: d
                            .group
                            .categories()
                            .filter(|o| *o != c)
                            .map(|o| o.label().to_string())
                            .collect(),
                    },
                );
            }
        }
        let zones = (1..=3)
            .map(|i| TriggerZone {
                zone_id: format!("z{i}"),
                dilemma_id: i,
                rect: Rect {
                    x0: i as i32 * 10,
                    y0: 10,
                    x1: i as i32 * 10 + 2,
                    y1: 12,
                },
                respawn_point: Position {
                    x: i as i32 * 10 + 1,
                    y: 5,
                },
            })
            .collect();
        let bounds = Rect {
            x0: 0,
            y0: 0,
            x1: 63,
            y1: 63,
        };
        Arc::new(GameContent::new(catalog, zones, effects, bounds).unwrap())
    }

    pub(crate) fn playing_room(players: &[u32]) -> Room {
        let mut room = Room::new("r1", PlayerId(players[0]), content(), 0);
        for &p in &players[1..] {
            room.join(PlayerId(p)).unwrap();
        }
        for &p in players {
            room.mark_ready(PlayerId(p)).unwrap();
        }
        room.start_game().unwrap();
        room
    }

    fn zone_of(room: &Room, dilemma_id: u32) -> TriggerZone {
        room.zones()
            .iter()
            .find(|z| z.dilemma_id == dilemma_id)
            .unwrap()
            .clone()
    }

    #[test]
    fn create_and_fill() {
        let mut lobby = Lobby::new(content());
        let room = lobby.create_room("r", PlayerId(7), 1).unwrap();
        assert_eq!(room.host(), PlayerId(7));
        assert_eq!(room.members().len(), 1);
        assert_eq!(room.phase(), Phase::Lobby);
        assert_eq!(room.seq(), 0);
        assert!(matches!(
            lobby.create_room("other", PlayerId(7), 1),
            Err(SessionError::AlreadyInRoom(PlayerId(7)))
        ));
        for p in 1..=5 {
            lobby.join_room("r", PlayerId(p)).unwrap();
        }
        assert_eq!(lobby.room("r").unwrap().members().len(), 6);
        assert!(matches!(
            lobby.join_room("r", PlayerId(99)),
            Err(SessionError::RoomFull)
        ));
        assert!(matches!(
            lobby.join_room("r", PlayerId(3)),
            Err(SessionError::AlreadyInRoom(_))
        ));
    }

    #[test]
    fn join_during_play_and_duplicates() {
        let mut room = Room::new("r", PlayerId(1), content(), 0);
        assert!(matches!(
            room.join(PlayerId(1)),
            Err(SessionError::DuplicateMember(_))
        ));
        room.mark_ready(PlayerId(1)).unwrap();
        room.start_game().unwrap();
        assert!(matches!(
            room.join(PlayerId(2)),
            Err(SessionError::WrongPhase {
                expected: Phase::Lobby,
                actual: Phase::Playing
            })
        ));
    }

    #[test]
    fn start_requires_everyone_ready() {
        let mut room = Room::new("r", PlayerId(1), content(), 0);
        room.join(PlayerId(2)).unwrap();
        room.join(PlayerId(3)).unwrap();
        room.mark_ready(PlayerId(1)).unwrap();
        room.mark_ready(PlayerId(2)).unwrap();
        assert!(matches!(room.start_game(), Err(SessionError::NotAllReady)));
        room.mark_ready(PlayerId(3)).unwrap();
        room.start_game().unwrap();
        assert_eq!(room.phase(), Phase::Playing);
        assert!(room.progress(PlayerId(2)).unwrap().is_empty());
    }

    #[test]
    fn solo_room_starts() {
        let room = playing_room(&[4]);
        assert_eq!(room.phase(), Phase::Playing);
    }

    #[test]
    fn host_leaving_hands_over() {
        let mut room = Room::new("r", PlayerId(5), content(), 0);
        room.join(PlayerId(9)).unwrap();
        room.join(PlayerId(2)).unwrap();
        room.leave(PlayerId(5)).unwrap();
        assert_eq!(room.host(), PlayerId(2));
        room.leave(PlayerId(2)).unwrap();
        room.leave(PlayerId(9)).unwrap();
        assert_eq!(room.phase(), Phase::Closed);
    }

    #[test]
    fn prompts_inside_and_on_corner() {
        let clock = ManualClock::new(0);
        let mut room = playing_room(&[1]);
        let z = zone_of(&room, 1);
        let inside = room
            .on_move(PlayerId(1), z.rect.center(), &clock)
            .unwrap()
            .unwrap();
        assert_eq!(inside.dilemma_id, 1);
        assert_eq!(inside.options.len(), 6);

        let mut room = playing_room(&[1]);
        let z = zone_of(&room, 2);
        let corner = Position {
            x: z.rect.x0,
            y: z.rect.y0,
        };
        assert_eq!(
            room.on_move(PlayerId(1), corner, &clock)
                .unwrap()
                .unwrap()
                .dilemma_id,
            2
        );
        assert!(matches!(
            room.on_move(PlayerId(1), Position { x: 64, y: 0 }, &clock),
            Err(SessionError::OutOfBounds(_))
        ));
    }

    #[test]
    fn second_zone_ignored_while_prompted() {
        let clock = ManualClock::new(0);
        let mut room = playing_room(&[1]);
        let z1 = zone_of(&room, 1);
        let z2 = zone_of(&room, 2);
        assert!(room.on_move(PlayerId(1), z1.rect.center(), &clock).unwrap().is_some());
        assert!(room.on_move(PlayerId(1), z2.rect.center(), &clock).unwrap().is_none());
        assert_eq!(room.position(PlayerId(1)), Some(z2.rect.center()));
    }

    #[test]
    fn zones_of_later_levels_stay_silent() {
        let clock = ManualClock::new(0);
        let mut room = playing_room(&[1]);
        let z3 = zone_of(&room, 3);
        assert!(room.on_move(PlayerId(1), z3.rect.center(), &clock).unwrap().is_none());
    }

    #[test]
    fn answer_reanswer_and_bad_option() {
        let clock = ManualClock::new(1_747_749_787_000);
        let store = ResponseStore::in_memory();
        store.ensure_tables().unwrap();
        let mut room = playing_room(&[1, 2]);
        let p = PlayerId(1);
        let z = zone_of(&room, 1);

        room.on_move(p, z.rect.center(), &clock).unwrap().unwrap();
        assert!(matches!(
            room.submit_answer(p, 1, 6, &clock, &store),
            Err(SessionError::BadOption(6))
        ));
        assert!(matches!(
            room.submit_answer(p, 2, 0, &clock, &store),
            Err(SessionError::NotPrompted { .. })
        ));
        clock.advance(2500);
        let seq = room.seq();
        let out = room.submit_answer(p, 1, 3, &clock, &store).unwrap();
        assert_eq!(out.record.attempt, 1);
        assert_eq!(out.record.answer_latency_ms, 2500);
        assert_eq!(out.record.category.label(), "Conservatism");
        assert_eq!(out.record.timestamp, "2025-05-20 14:03:09");
        assert_eq!(room.seq(), seq + 1);
        assert_eq!(room.world().version, 1);
        assert!(room.progress(p).unwrap().contains(&1));
        assert!(!z.rect.contains(room.position(p).unwrap()));
        assert!(matches!(
            room.submit_answer(p, 1, 3, &clock, &store),
            Err(SessionError::NotPrompted { .. })
        ));

        room.on_move(p, z.rect.center(), &clock).unwrap().unwrap();
        let again = room.submit_answer(p, 1, 0, &clock, &store).unwrap();
        assert_eq!(again.record.attempt, 2);
        assert_eq!(room.progress(p).unwrap().len(), 1);
        assert_eq!(room.world().version, 2);
        assert!(room.world().objects["building_1"]
            .variant_tags
            .contains("DemocraticRadicalism"));
        assert_eq!(store.rows(Group::A).unwrap().len(), 2);
    }

    #[test]
    fn store_failure_leaves_room_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.db");
        ResponseStore::open(&path).unwrap();
        let ro = ResponseStore::open_read_only(&path).unwrap();
        let clock = ManualClock::new(0);
        let mut room = playing_room(&[1]);
        let z = zone_of(&room, 1);
        room.on_move(PlayerId(1), z.rect.center(), &clock).unwrap();
        let before = (room.seq(), room.world().clone());
        assert!(matches!(
            room.submit_answer(PlayerId(1), 1, 0, &clock, &ro),
            Err(SessionError::Store(_))
        ));
        assert_eq!((room.seq(), room.world().clone()), before);
        assert!(room.has_open_prompt(PlayerId(1)));
    }

    #[test]
    fn exit_gate_and_voting_transition() {
        let clock = ManualClock::new(0);
        let store = ResponseStore::in_memory();
        let mut room = playing_room(&[1]);
        let p = PlayerId(1);
        assert!(room.can_exit_level(p, 99));
        assert!(!room.can_exit_level(p, 1));
        assert!(matches!(room.exit_level(p), Err(SessionError::LevelIncomplete(1))));
        for d in [1, 2] {
            let z = zone_of(&room, d);
            room.on_move(p, z.rect.center(), &clock).unwrap().unwrap();
            room.submit_answer(p, d, 0, &clock, &store).unwrap();
        }
        assert!(room.can_exit_level(p, 1));
        let out = room.exit_level(p).unwrap();
        assert_eq!(out.next_level, Some(2));
        let z = zone_of(&room, 3);
        room.on_move(p, z.rect.center(), &clock).unwrap().unwrap();
        room.submit_answer(p, 3, 5, &clock, &store).unwrap();
        let out = room.exit_level(p).unwrap();
        assert_eq!(out.next_level, None);
        assert!(out.voting_started);
        assert_eq!(room.phase(), Phase::Voting);
    }

    #[test]
    fn abort_flags_rows() {
        let clock = ManualClock::new(0);
        let store = ResponseStore::in_memory();
        let mut room = playing_room(&[1, 2]);
        for d in [1, 2] {
            let z = zone_of(&room, d);
            room.on_move(PlayerId(1), z.rect.center(), &clock).unwrap();
            room.submit_answer(PlayerId(1), d, 0, &clock, &store).unwrap();
        }
        assert_eq!(room.abort_session(PlayerId(1), &store).unwrap(), 2);
        assert_eq!(room.abort_session(PlayerId(2), &store).unwrap(), 0);
        let rows = store.rows(Group::A).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.incomplete));
        assert_eq!(room.phase(), Phase::Voting);
    }

    #[test]
    fn layout_is_seeded_and_level_preserving() {
        let c = content();
        assert_eq!(c.layout(3), c.layout(3));
        for seed in 0..20 {
            let layout = c.layout(seed);
            for (orig, placed) in c.zones.iter().zip(&layout) {
                assert_eq!(c.level_of(orig.dilemma_id), c.level_of(placed.dilemma_id));
                assert_eq!(orig.rect, placed.rect);
            }
        }
    }

    #[test]
    fn zone_fixture_parsing() {
        let src = "zone_id,dilemma_id,x0,y0,x1,y1,respawn_x,respawn_y\nz1,4,1,1,3,3,0,0\n";
        let zones = parse_zones(src.as_bytes()).unwrap();
        assert_eq!(zones[0].rect, Rect { x0: 1, y0: 1, x1: 3, y1: 3 });
        assert!(matches!(
            parse_zones("zone_id\n".as_bytes()),
            Err(ContentError::MalformedHeader)
        ));
        let bad = "zone_id,dilemma_id,x0,y0,x1,y1,respawn_x,respawn_y\nz1,4,a,1,3,3,0,0\n";
        assert!(matches!(
            parse_zones(bad.as_bytes()),
            Err(ContentError::BadZone { row: 2, .. })
        ));
    }
}
