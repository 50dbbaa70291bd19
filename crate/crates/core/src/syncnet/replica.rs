use std::collections::{BTreeMap, BTreeSet};

use crate::session::{DilemmaPrompt, Phase, PlayerId, Position};
use crate::syncnet::wire::{Payload, RoomSnapshot, WireMessage};
use crate::worldstate::{WorldError, WorldState};

/// A client's mirror of one room. Sequenced events are applied strictly in
/// order; anything ahead of the next expected seq waits in a hold-back
/// buffer and duplicates are dropped. Nothing is applied before the first
/// SNAPSHOT arrives.
#[derive(Debug, Clone)]
pub struct ClientReplica {
    player: PlayerId,
    room: String,
    state: Option<RoomSnapshot>,
    held: BTreeMap<u64, WireMessage>,
    prompt: Option<DilemmaPrompt>,
    errors: Vec<(String, String)>,
    applied: u64,
    duplicates: u64,
}

impl ClientReplica {
    pub fn new(player: PlayerId, room: impl Into<String>) -> Self {
        Self {
            player,
            room: room.into(),
            state: None,
            held: BTreeMap::new(),
            prompt: None,
            errors: Vec::new(),
            applied: 0,
            duplicates: 0,
        }
    }

    pub fn player(&self) -> PlayerId {
        self.player
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Seq of the last applied event, 0 before initialization.
    pub fn seq(&self) -> u64 {
        self.state.as_ref().map_or(0, |s| s.seq)
    }

    pub fn phase(&self) -> Option<Phase> {
        self.state.as_ref().map(|s| s.phase)
    }

    pub fn members(&self) -> BTreeSet<PlayerId> {
        self.state.as_ref().map(|s| s.members.clone()).unwrap_or_default()
    }

    pub fn position(&self, p: PlayerId) -> Option<Position> {
        self.state.as_ref().and_then(|s| s.positions.get(&p).copied())
    }

    pub fn world(&self) -> Option<&WorldState> {
        self.state.as_ref().map(|s| &s.world)
    }

    pub fn pending(&self) -> usize {
        self.held.len()
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates
    }

    pub fn prompt(&self) -> Option<&DilemmaPrompt> {
        self.prompt.as_ref()
    }

    pub fn take_prompt(&mut self) -> Option<DilemmaPrompt> {
        self.prompt.take()
    }

    /// `(code, message)` of every ERROR received.
    pub fn errors(&self) -> &[(String, String)] {
        &self.errors
    }

    /// Panics if not initialized.
    pub fn snapshot(&self) -> RoomSnapshot {
        self.state.clone().expect("replica not initialized")
    }

    /// Takes one message from the host and returns the sequenced events it
    /// caused to be applied, in order.
    pub fn receive(&mut self, msg: WireMessage) -> Vec<WireMessage> {
        if msg.room != self.room {
            return Vec::new();
        }
        match msg.payload {
            Payload::Snapshot { state: Some(snap) } => {
                if self.state.is_none() || snap.seq >= self.seq() {
                    self.held.retain(|&s, _| s > snap.seq);
                    self.state = Some(snap);
                    return self.drain();
                }
                Vec::new()
            }
            Payload::Snapshot { state: None } => Vec::new(),
            Payload::Prompt(p) => {
                self.prompt = Some(p);
                Vec::new()
            }
            Payload::Error { code, message } => {
                self.errors.push((code, message));
                Vec::new()
            }
            _ => {
                let Some(seq) = msg.seq else {
                    return Vec::new();
                };
                if (self.state.is_some() && seq <= self.seq()) || self.held.contains_key(&seq) {
                    self.duplicates += 1;
                    return Vec::new();
                }
                self.held.insert(seq, msg);
                self.drain()
            }
        }
    }

    fn drain(&mut self) -> Vec<WireMessage> {
        let mut out = Vec::new();
        let Some(state) = self.state.as_mut() else {
            return out;
        };
        while let Some(msg) = self.held.remove(&(state.seq + 1)) {
            apply(state, &msg).unwrap_or_else(|e| {
                panic!("replica of player {} diverged at seq {}: {e}", self.player, state.seq + 1)
            });
            state.seq += 1;
            self.applied += 1;
            out.push(msg);
        }
        out
    }
}

fn apply(state: &mut RoomSnapshot, msg: &WireMessage) -> Result<(), WorldError> {
    match &msg.payload {
        Payload::Join { at } => {
            state.members.insert(msg.origin);
            if let Some(at) = at {
                state.positions.insert(msg.origin, *at);
            }
        }
        Payload::Start { phase, .. } => {
            state.phase = phase.unwrap_or(Phase::Playing);
        }
        Payload::Move { x, y } => {
            state.positions.insert(msg.origin, Position { x: *x, y: *y });
        }
        Payload::SceneDelta { delta, relocate } => {
            state.world.apply_in_place(delta)?;
            if let Some(r) = relocate {
                state.positions.insert(r.player, r.to);
            }
        }
        Payload::Ready {}
        | Payload::Answer { .. }
        | Payload::Vote { .. }
        | Payload::Exit {}
        | Payload::Abort {}
        | Payload::Snapshot { .. }
        | Payload::Prompt(_)
        | Payload::Error { .. } => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syncnet::wire::PROTOCOL_VERSION;

    fn event(seq: u64, origin: u32, payload: Payload) -> WireMessage {
        WireMessage {
            v: PROTOCOL_VERSION,
            room: "r".into(),
            seq: Some(seq),
            origin: PlayerId(origin),
            payload,
            token: String::new(),
        }
    }

    fn init() -> ClientReplica {
        let mut r = ClientReplica::new(PlayerId(2), "r");
        r.receive(event(
            2,
            1,
            Payload::Snapshot {
                state: Some(RoomSnapshot {
                    seq: 2,
                    phase: Phase::Playing,
                    members: [PlayerId(1), PlayerId(2)].into(),
                    positions: BTreeMap::new(),
                    world: WorldState::new([]),
                }),
            },
        ));
        r
    }

    #[test]
    fn nothing_before_snapshot() {
        let mut r = ClientReplica::new(PlayerId(2), "r");
        r.receive(event(1, 1, Payload::Move { x: 1, y: 1 }));
        assert!(!r.is_initialized());
        assert_eq!(r.seq(), 0);
    }

    #[test]
    fn out_of_order_held_back() {
        let mut r = init();
        r.receive(event(4, 1, Payload::Move { x: 4, y: 4 }));
        assert_eq!(r.seq(), 2);
        assert_eq!(r.pending(), 1);
        let applied = r.receive(event(3, 1, Payload::Move { x: 3, y: 3 }));
        assert_eq!(applied.iter().map(|m| m.seq.unwrap()).collect::<Vec<_>>(), [3, 4]);
        assert_eq!(r.seq(), 4);
        assert_eq!(r.position(PlayerId(1)), Some(Position { x: 4, y: 4 }));
    }

    #[test]
    fn duplicates_ignored() {
        let mut r = init();
        r.receive(event(3, 1, Payload::Move { x: 3, y: 3 }));
        r.receive(event(3, 1, Payload::Move { x: 9, y: 9 }));
        r.receive(event(1, 1, Payload::Move { x: 9, y: 9 }));
        assert_eq!(r.duplicates(), 2);
        assert_eq!(r.position(PlayerId(1)), Some(Position { x: 3, y: 3 }));
    }

    #[test]
    fn other_rooms_ignored() {
        let mut r = init();
        let mut m = event(3, 1, Payload::Move { x: 3, y: 3 });
        m.room = "q".into();
        r.receive(m);
        assert_eq!(r.seq(), 2);
    }
}
