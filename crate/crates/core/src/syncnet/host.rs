//! The per-room sequencer. All room mutations pass through [`Host::publish`]
//! one at a time, which gives the event log its total order.

use std::sync::Arc;

use thiserror::Error;

use crate::clock::Clock;
use crate::responsestore::ResponseStore;
use crate::session::{Phase, PlayerId, Position, Room, SessionError};
use crate::syncnet::auth::{AuthToken, TokenRegistry};
use crate::syncnet::remote::{RemoteError, RemoteStateStore};
use crate::syncnet::wire::{
    GameEvent, MessageKind, Payload, Relocation, RoomSnapshot, WireMessage, PROTOCOL_VERSION,
};

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("Authentication failed for Player {0}")]
    AuthFailed(PlayerId),
    #[error("message for room `{got}` sent to room `{expected}`")]
    WrongRoom { expected: String, got: String },
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("{0} events are emitted by the host only")]
    NotAuthority(MessageKind),
    #[error("{0} is not a client request")]
    NotARequest(MessageKind),
    #[error("VOTE needs a choice")]
    MissingChoice,
    #[error("player {0} is not a member")]
    NotMember(PlayerId),
    #[error(transparent)]
    Rejected(#[from] SessionError),
}

impl SyncError {
    pub fn code(&self) -> &'static str {
        match self {
            SyncError::AuthFailed(_) => "AUTH_FAILED",
            SyncError::WrongRoom { .. } => "WRONG_ROOM",
            SyncError::BadVersion(_) => "BAD_VERSION",
            SyncError::NotAuthority(_) => "NOT_AUTHORITY",
            SyncError::NotARequest(_) => "NOT_A_REQUEST",
            SyncError::MissingChoice => "MISSING_CHOICE",
            SyncError::NotMember(_) => "NOT_MEMBER",
            SyncError::Rejected(e) => match e {
                SessionError::RoomFull => "ROOM_FULL",
                SessionError::WrongPhase { .. } => "WRONG_PHASE",
                SessionError::NotAllReady => "NOT_ALL_READY",
                SessionError::NotPrompted { .. } => "NOT_PROMPTED",
                SessionError::BadOption(_) => "BAD_OPTION",
                SessionError::OutOfBounds(_) => "OUT_OF_BOUNDS",
                SessionError::LevelIncomplete(_) => "LEVEL_INCOMPLETE",
                SessionError::Store(_) => "STORE_UNAVAILABLE",
                _ => "REJECTED",
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipient {
    /// Every current member of the room.
    All,
    Player(PlayerId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Recipient,
    pub message: WireMessage,
}

pub struct Host {
    room: Room,
    registry: Arc<TokenRegistry>,
    store: Arc<ResponseStore>,
    clock: Arc<dyn Clock + Send + Sync>,
    log: Vec<GameEvent>,
}

impl std::fmt::Debug for Host {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Host")
            .field("room", &self.room.room_id())
            .field("log_len", &self.log.len())
            .finish()
    }
}

impl Host {
    /// Takes ownership of a freshly created room and logs the host's JOIN
    /// as event 1. The host player must present a valid token.
    pub fn create(
        room: Room,
        host_token: &str,
        registry: Arc<TokenRegistry>,
        store: Arc<ResponseStore>,
        clock: Arc<dyn Clock + Send + Sync>,
    ) -> Result<(Self, Vec<Outbound>), SyncError> {
        let host = room.host();
        if !registry.authenticate(host, host_token) {
            return Err(SyncError::AuthFailed(host));
        }
        let spawn = room.position(host);
        let mut this = Self {
            room,
            registry,
            store,
            clock,
            log: Vec::new(),
        };
        let token = AuthToken {
            player: host,
            token: host_token.to_string(),
        };
        let mut out = Vec::new();
        this.append(host, Payload::Join { at: spawn }, token, &mut out);
        out.push(this.snapshot_to(host));
        Ok((this, out))
    }

    pub fn room(&self) -> &Room {
        &self.room
    }

    pub fn room_id(&self) -> &str {
        self.room.room_id()
    }

    pub fn log(&self) -> &[GameEvent] {
        &self.log
    }

    pub fn registry(&self) -> &TokenRegistry {
        &self.registry
    }

    pub fn head(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn snapshot(&self) -> RoomSnapshot {
        RoomSnapshot {
            seq: self.head(),
            phase: self.room.phase(),
            members: self.room.members().clone(),
            positions: self.room.positions().clone(),
            world: self.room.world().clone(),
        }
    }

    /// Current state for a member, so late joiners and resyncing clients
    /// can fast-forward.
    pub fn retrieve_state(&self, requester: PlayerId, token: &str) -> Result<RoomSnapshot, SyncError> {
        if !self.registry.authenticate(requester, token) {
            return Err(SyncError::AuthFailed(requester));
        }
        if !self.room.is_member(requester) {
            return Err(SyncError::NotMember(requester));
        }
        Ok(self.snapshot())
    }

    /// Pushes the current snapshot for every member.
    pub fn sync_to(&self, remote: &dyn RemoteStateStore) -> Result<(), RemoteError> {
        let snapshot = self.snapshot();
        for &p in self.room.members() {
            remote.push(self.room.room_id(), p, &snapshot)?;
        }
        Ok(())
    }

    fn server_message(&self, payload: Payload) -> WireMessage {
        WireMessage {
            v: PROTOCOL_VERSION,
            room: self.room.room_id().to_string(),
            seq: Some(self.head()),
            origin: self.room.host(),
            payload,
            token: String::new(),
        }
    }

    fn snapshot_to(&self, p: PlayerId) -> Outbound {
        Outbound {
            to: Recipient::Player(p),
            message: self.server_message(Payload::Snapshot {
                state: Some(self.snapshot()),
            }),
        }
    }

    /// The ERROR reply for a rejected message.
    pub fn error_reply(&self, to: PlayerId, err: &SyncError) -> Outbound {
        Outbound {
            to: Recipient::Player(to),
            message: self.server_message(Payload::Error {
                code: err.code().to_string(),
                message: err.to_string(),
            }),
        }
    }

    fn append(&mut self, origin: PlayerId, payload: Payload, token: AuthToken, out: &mut Vec<Outbound>) {
        let event = GameEvent {
            seq: self.head() + 1,
            room_id: self.room.room_id().to_string(),
            origin,
            payload,
            token,
        };
        out.push(Outbound {
            to: Recipient::All,
            message: event.to_wire(),
        });
        self.log.push(event);
    }

    fn announce_phase(&mut self, phase: Phase, out: &mut Vec<Outbound>) {
        let host = self.room.host();
        let token = AuthToken {
            player: host,
            token: self.registry.token_of(host).unwrap_or_default().to_string(),
        };
        self.append(
            host,
            Payload::Start {
                phase: Some(phase),
                summary: None,
            },
            token,
            out,
        );
    }

    fn close(&mut self, out: &mut Vec<Outbound>) -> Result<(), SyncError> {
        let summary = self.room.close_vote(&self.store)?;
        let host = self.room.host();
        let token = AuthToken {
            player: host,
            token: self.registry.token_of(host).unwrap_or_default().to_string(),
        };
        self.append(
            host,
            Payload::Start {
                phase: Some(Phase::Closed),
                summary: Some(summary),
            },
            token,
            out,
        );
        Ok(())
    }

    fn after_progress(&mut self, phase_before: Phase, out: &mut Vec<Outbound>) -> Result<(), SyncError> {
        if phase_before == Phase::Playing && self.room.phase() == Phase::Voting {
            self.announce_phase(Phase::Voting, out);
        }
        if self.room.phase() == Phase::Voting && self.room.all_voted() {
            self.close(out)?;
        }
        Ok(())
    }

    /// Authenticates, applies and sequences one client message. Returns the
    /// messages to deliver; on error nothing was logged and the caller
    /// should send [`error_reply`](Self::error_reply) to the origin.
    pub fn publish(&mut self, msg: WireMessage) -> Result<Vec<Outbound>, SyncError> {
        if msg.v != PROTOCOL_VERSION {
            return Err(SyncError::BadVersion(msg.v));
        }
        if msg.room != self.room.room_id() {
            return Err(SyncError::WrongRoom {
                expected: self.room.room_id().to_string(),
                got: msg.room,
            });
        }
        let origin = msg.origin;
        if !self.registry.authenticate(origin, &msg.token) {
            return Err(SyncError::AuthFailed(origin));
        }
        let token = AuthToken {
            player: origin,
            token: msg.token,
        };
        let clock = self.clock.clone();
        let phase_before = self.room.phase();
        let mut out = Vec::new();

        match msg.payload {
            Payload::SceneDelta { .. } => return Err(SyncError::NotAuthority(MessageKind::SceneDelta)),
            Payload::Snapshot { .. } => {
                self.retrieve_state(origin, &token.token)?;
                out.push(self.snapshot_to(origin));
            }
            p @ (Payload::Prompt(_) | Payload::Error { .. }) => {
                return Err(SyncError::NotARequest(p.kind()))
            }
            Payload::Join { .. } => {
                self.room.join(origin)?;
                let at = self.room.position(origin);
                self.append(origin, Payload::Join { at }, token, &mut out);
                out.push(self.snapshot_to(origin));
            }
            Payload::Ready {} => {
                self.room.mark_ready(origin)?;
                self.append(origin, Payload::Ready {}, token, &mut out);
                if self.room.all_ready() {
                    self.room.start_game()?;
                    self.announce_phase(Phase::Playing, &mut out);
                }
            }
            Payload::Start { .. } => {
                if origin != self.room.host() {
                    return Err(SessionError::NotHost.into());
                }
                self.room.start_game()?;
                self.append(
                    origin,
                    Payload::Start {
                        phase: Some(Phase::Playing),
                        summary: None,
                    },
                    token,
                    &mut out,
                );
            }
            Payload::Move { x, y } => {
                let prompt = self.room.on_move(origin, Position { x, y }, clock.as_ref())?;
                self.append(origin, Payload::Move { x, y }, token, &mut out);
                if let Some(prompt) = prompt {
                    out.push(Outbound {
                        to: Recipient::Player(origin),
                        message: self.server_message(Payload::Prompt(prompt)),
                    });
                }
            }
            Payload::Answer {
                dilemma_id,
                option_index,
            } => {
                let outcome = self.room.submit_answer(
                    origin,
                    dilemma_id,
                    option_index,
                    clock.as_ref(),
                    &self.store,
                )?;
                self.append(
                    origin,
                    Payload::Answer {
                        dilemma_id,
                        option_index,
                    },
                    token,
                    &mut out,
                );
                let host = self.room.host();
                let host_token = AuthToken {
                    player: host,
                    token: self.registry.token_of(host).unwrap_or_default().to_string(),
                };
                self.append(
                    host,
                    Payload::SceneDelta {
                        delta: outcome.delta,
                        relocate: Some(Relocation {
                            player: origin,
                            to: outcome.relocated_to,
                        }),
                    },
                    host_token,
                    &mut out,
                );
            }
            Payload::Vote { choice } => {
                let choice = choice.ok_or(SyncError::MissingChoice)?;
                self.room.cast_vote(origin, choice, clock.as_ref(), &self.store)?;
                self.append(origin, Payload::Vote { choice: Some(choice) }, token, &mut out);
            }
            Payload::Exit {} => {
                if self.room.phase() == Phase::Voting && origin == self.room.host() {
                    self.append(origin, Payload::Exit {}, token, &mut out);
                    self.close(&mut out)?;
                    return Ok(out);
                }
                self.room.exit_level(origin)?;
                self.append(origin, Payload::Exit {}, token, &mut out);
            }
            Payload::Abort {} => {
                self.room.abort_session(origin, &self.store)?;
                self.append(origin, Payload::Abort {}, token, &mut out);
            }
        }
        self.after_progress(phase_before, &mut out)?;
        Ok(out)
    }
}
