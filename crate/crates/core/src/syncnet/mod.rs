//! Event-ordered replication of room state.
//!
//! The host runs one [`Host`] per room: it authenticates every incoming
//! message, applies it to the authoritative [`Room`](crate::session::Room),
//! assigns the next contiguous sequence number and broadcasts the result.
//! Clients keep a [`ClientReplica`] that holds back out-of-order events until
//! the gap is filled, so every replica applies the same events in the same
//! order as the host. [`sim`] drives hosts and replicas over a seeded lossy
//! network.

pub mod auth;
pub mod host;
pub mod remote;
pub mod replica;
pub mod sim;
pub mod wire;

pub use auth::{AuthToken, TokenRegistry};
pub use host::{Host, Outbound, Recipient, SyncError};
pub use remote::{InProcessStateStore, RemoteStateStore, TcpStateStore};
pub use replica::ClientReplica;
pub use sim::{simulate, NetworkConfig, Scenario, SimReport};
pub use wire::{GameEvent, MessageKind, Payload, RoomSnapshot, WireMessage};
