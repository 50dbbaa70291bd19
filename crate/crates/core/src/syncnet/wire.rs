//! Wire messages: newline-delimited JSON objects of the form
//! `{"v":1,"room":..,"seq":..,"origin":..,"kind":..,"payload":{..},"token":..}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::session::{DilemmaPrompt, Phase, PlayerId, Position};
use crate::syncnet::auth::AuthToken;
use crate::voting::{EndgameSummary, VoteChoice};
use crate::worldstate::{SceneDelta, WorldState};

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Join,
    Ready,
    Start,
    Move,
    Answer,
    SceneDelta,
    Vote,
    Exit,
    Abort,
    Snapshot,
    Prompt,
    Error,
}

impl MessageKind {
    /// Kinds that are sequenced into the room event log.
    pub fn is_event(self) -> bool {
        !matches!(self, Self::Snapshot | Self::Prompt | Self::Error)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relocation {
    pub player: PlayerId,
    pub to: Position,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Join {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Position>,
    },
    Ready {},
    /// Phase announcements; only the host originates these.
    Start {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phase: Option<Phase>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        summary: Option<EndgameSummary>,
    },
    Move {
        x: i32,
        y: i32,
    },
    Answer {
        dilemma_id: u32,
        option_index: u8,
    },
    SceneDelta {
        delta: SceneDelta,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        relocate: Option<Relocation>,
    },
    /// The choice is withheld when the event is broadcast to clients.
    Vote {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        choice: Option<VoteChoice>,
    },
    Exit {},
    Abort {},
    /// Sent by a client as a state request; answered with the state filled in.
    Snapshot {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        state: Option<RoomSnapshot>,
    },
    Prompt(DilemmaPrompt),
    Error {
        code: String,
        message: String,
    },
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Join { .. } => MessageKind::Join,
            Payload::Ready {} => MessageKind::Ready,
            Payload::Start { .. } => MessageKind::Start,
            Payload::Move { .. } => MessageKind::Move,
            Payload::Answer { .. } => MessageKind::Answer,
            Payload::SceneDelta { .. } => MessageKind::SceneDelta,
            Payload::Vote { .. } => MessageKind::Vote,
            Payload::Exit {} => MessageKind::Exit,
            Payload::Abort {} => MessageKind::Abort,
            Payload::Snapshot { .. } => MessageKind::Snapshot,
            Payload::Prompt(_) => MessageKind::Prompt,
            Payload::Error { .. } => MessageKind::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMessage {
    pub v: u8,
    pub room: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub origin: PlayerId,
    #[serde(flatten)]
    pub payload: Payload,
    #[serde(default)]
    pub token: String,
}

impl WireMessage {
    /// A client-originated message.
    pub fn client(room: &str, origin: PlayerId, token: &str, payload: Payload) -> Self {
        Self {
            v: PROTOCOL_VERSION,
            room: room.to_string(),
            seq: None,
            origin,
            payload,
            token: token.to_string(),
        }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire message serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }
}

/// One accepted, sequenced room event as kept in the host's log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameEvent {
    pub seq: u64,
    pub room_id: String,
    pub origin: PlayerId,
    pub payload: Payload,
    pub token: AuthToken,
}

impl GameEvent {
    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// The client-facing copy: no token, vote choices withheld.
    pub fn to_wire(&self) -> WireMessage {
        let payload = match &self.payload {
            Payload::Vote { .. } => Payload::Vote { choice: None },
            other => other.clone(),
        };
        WireMessage {
            v: PROTOCOL_VERSION,
            room: self.room_id.clone(),
            seq: Some(self.seq),
            origin: self.origin,
            payload,
            token: String::new(),
        }
    }
}

/// Everything a replica mirrors, at a given sequence number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomSnapshot {
    pub seq: u64,
    pub phase: Phase,
    pub members: BTreeSet<PlayerId>,
    pub positions: BTreeMap<PlayerId, Position>,
    pub world: WorldState,
}

impl RoomSnapshot {
    /// Canonical bytes; equal snapshots give equal bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("snapshot serializes")
    }
}
