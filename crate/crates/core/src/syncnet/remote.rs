use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::Mutex;
use std::time::Duration;

use thiserror::Error;

use crate::session::PlayerId;
use crate::syncnet::wire::{Payload, RoomSnapshot, WireMessage};

#[derive(Debug, Error)]
pub enum RemoteError {
    #[error("no state stored for player {player} in room `{room}`")]
    Missing { room: String, player: PlayerId },
    #[error("remote refused: {code}: {message}")]
    Refused { code: String, message: String },
    #[error("operation not supported by this store")]
    Unsupported,
    #[error("connection closed before a reply arrived")]
    Closed,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Per-player room state kept outside the host.
pub trait RemoteStateStore: Send + Sync {
    fn push(&self, room: &str, player: PlayerId, state: &RoomSnapshot) -> Result<(), RemoteError>;
    fn fetch(&self, room: &str, player: PlayerId, token: &str) -> Result<RoomSnapshot, RemoteError>;
}

/// Keeps snapshots in a map. Tokens are not checked.
#[derive(Debug, Default)]
pub struct InProcessStateStore {
    states: Mutex<HashMap<(String, PlayerId), RoomSnapshot>>,
}

impl InProcessStateStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl RemoteStateStore for InProcessStateStore {
    fn push(&self, room: &str, player: PlayerId, state: &RoomSnapshot) -> Result<(), RemoteError> {
        self.states
            .lock()
            .expect("state lock")
            .insert((room.to_string(), player), state.clone());
        Ok(())
    }

    fn fetch(&self, room: &str, player: PlayerId, _token: &str) -> Result<RoomSnapshot, RemoteError> {
        self.states
            .lock()
            .expect("state lock")
            .get(&(room.to_string(), player))
            .cloned()
            .ok_or_else(|| RemoteError::Missing {
                room: room.to_string(),
                player,
            })
    }
}

/// Fetches state from a running `dilemma serve` by sending a SNAPSHOT
/// request. The server owns the state, so pushing is not supported.
#[derive(Debug, Clone)]
pub struct TcpStateStore {
    addr: String,
    timeout: Duration,
}

impl TcpStateStore {
    pub fn new(addr: impl Into<String>) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_secs(5),
        }
    }
}

impl RemoteStateStore for TcpStateStore {
    fn push(&self, _: &str, _: PlayerId, _: &RoomSnapshot) -> Result<(), RemoteError> {
        Err(RemoteError::Unsupported)
    }

    fn fetch(&self, room: &str, player: PlayerId, token: &str) -> Result<RoomSnapshot, RemoteError> {
        let addr = self
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        let request = WireMessage::client(room, player, token, Payload::Snapshot { state: None });
        writeln!(stream, "{}", request.to_line())?;
        stream.flush()?;
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let msg = WireMessage::from_line(&line?)?;
            match msg.payload {
                Payload::Snapshot { state: Some(s) } => return Ok(s),
                Payload::Error { code, message } => return Err(RemoteError::Refused { code, message }),
                _ => continue,
            }
        }
        Err(RemoteError::Closed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Phase;
    use crate::worldstate::WorldState;

    #[test]
    fn in_process_round_trip() {
        let store = InProcessStateStore::new();
        let snap = RoomSnapshot {
            seq: 7,
            phase: Phase::Lobby,
            members: [PlayerId(1)].into(),
            positions: Default::default(),
            world: WorldState::new([]),
        };
        assert!(matches!(
            store.fetch("r", PlayerId(1), ""),
            Err(RemoteError::Missing { .. })
        ));
        store.push("r", PlayerId(1), &snap).unwrap();
        assert_eq!(store.fetch("r", PlayerId(1), "").unwrap(), snap);
    }
}
