//! Multi-player dilemma survey sessions.
//!
//! The crate is split along the lifecycle of a survey answer:
//!
//! * [`catalog`] loads the dilemma catalog and restructures it into group and
//!   diagonal tables.
//! * [`worldstate`] holds the shared city objects and applies choice-driven deltas.
//! * [`session`] runs rooms: lobby, trigger zones, answers and the completion gate.
//! * [`voting`] collects the hidden endgame vote.
//! * [`syncnet`] sequences room events on the host, replicates them to clients and
//!   simulates lossy networks deterministically.
//! * [`responsestore`] persists answers, votes and exports.
//! * [`analytics`] turns stored answers into count matrices, encodings, PCA and clusters.
//! * [`cli`] wires everything into the `dilemma` binary.

pub mod analytics;
pub mod catalog;
pub mod cli;
pub mod clock;
pub mod responsestore;
pub mod session;
pub mod syncnet;
pub mod voting;
pub mod worldstate;

pub use catalog::{Dilemma, DilemmaCatalog, Group, IdeologyCategory};
pub use clock::{Clock, ManualClock, SystemClock};
pub use responsestore::ResponseStore;
pub use session::{GameContent, PlayerId, Position, Room};
pub use worldstate::{SceneDelta, WorldState};
