//! Endgame vote. Players rate the final city; the tally is persisted for
//! researchers and never sent back to clients.

use serde::{Deserialize, Serialize};

use crate::clock::{format_timestamp, Clock};
use crate::responsestore::ResponseStore;
use crate::session::{Phase, PlayerId, Room, SessionError};

/// `neutral` on the wire is counted as [`VoteChoice::Other`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteChoice {
    Like,
    Dislike,
    #[serde(rename = "neutral", alias = "other")]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub player: PlayerId,
    pub choice: VoteChoice,
    pub room_id: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusScore {
    pub positive: u32,
    pub negative: u32,
    pub other: u32,
}

impl ConsensusScore {
    pub fn total(&self) -> u32 {
        self.positive + self.negative + self.other
    }

    pub fn as_array(&self) -> [u32; 3] {
        [self.positive, self.negative, self.other]
    }
}

pub fn tally<'a>(votes: impl IntoIterator<Item = &'a VoteChoice>) -> ConsensusScore {
    let mut score = ConsensusScore::default();
    for v in votes {
        match v {
            VoteChoice::Like => score.positive += 1,
            VoteChoice::Dislike => score.negative += 1,
            VoteChoice::Other => score.other += 1,
        }
    }
    score
}

/// Hook for a weighted satisfaction rating over the plain counts. No weights
/// ship with the crate; callers that want one supply their own.
pub trait SatisfactionRating {
    fn rate(&self, score: &ConsensusScore) -> f64;
}

/// What clients learn when a room closes. Carries no vote counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndgameSummary {
    pub room_id: String,
    pub world_version: u64,
}

impl Room {
    /// Records (or replaces) `p`'s vote and appends it to `store`.
    pub fn cast_vote(
        &mut self,
        p: PlayerId,
        choice: VoteChoice,
        clock: &dyn Clock,
        store: &ResponseStore,
    ) -> Result<(), SessionError> {
        if self.phase != Phase::Voting {
            return Err(SessionError::WrongPhase {
                expected: Phase::Voting,
                actual: self.phase,
            });
        }
        if !self.members.contains(&p) {
            return Err(SessionError::NotMember(p));
        }
        let vote = Vote {
            player: p,
            choice,
            room_id: self.room_id.clone(),
            timestamp: format_timestamp(clock.now_ms()),
        };
        store.append_vote(&vote)?;
        self.votes.insert(p, vote);
        self.seq += 1;
        Ok(())
    }

    pub fn vote_of(&self, p: PlayerId) -> Option<VoteChoice> {
        self.votes.get(&p).map(|v| v.choice)
    }

    pub fn voter_count(&self) -> usize {
        self.votes.len()
    }

    /// Every member that has not aborted has voted.
    pub fn all_voted(&self) -> bool {
        self.members
            .iter()
            .filter(|p| !self.aborted.contains(p))
            .all(|p| self.votes.contains_key(p))
    }

    /// Tallies, persists and closes. The returned summary is what may be
    /// shown to players.
    pub fn close_vote(&mut self, store: &ResponseStore) -> Result<EndgameSummary, SessionError> {
        if self.phase != Phase::Voting {
            return Err(SessionError::WrongPhase {
                expected: Phase::Voting,
                actual: self.phase,
            });
        }
        let score = tally(self.votes.values().map(|v| &v.choice));
        store.append_consensus(&self.room_id, score)?;
        self.consensus = Some(score);
        self.phase = Phase::Closed;
        self.seq += 1;
        Ok(EndgameSummary {
            room_id: self.room_id.clone(),
            world_version: self.world.version,
        })
    }

    /// Researcher access to the tally of a closed room.
    pub fn consensus_for_research(&self) -> Option<ConsensusScore> {
        self.consensus
    }
}
