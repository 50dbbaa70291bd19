use std::collections::HashMap;
use std::io::Read;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::session::PlayerId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthToken {
    pub player: PlayerId,
    pub token: String,
}

/// Issued tokens by player. Failed checks are appended to an audit trail
/// and logged at `warn`.
#[derive(Debug, Default)]
pub struct TokenRegistry {
    tokens: HashMap<PlayerId, String>,
    audit: Mutex<Vec<String>>,
}

impl TokenRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, player: PlayerId, token: impl Into<String>) {
        self.tokens.insert(player, token.into());
    }

    pub fn token_of(&self, player: PlayerId) -> Option<&str> {
        self.tokens.get(&player).map(String::as_str)
    }

    pub fn authenticate(&self, player: PlayerId, token: &str) -> bool {
        if self.tokens.get(&player).is_some_and(|stored| stored == token) {
            return true;
        }
        let line = format!("Authentication failed for Player {player}. Data not stored.");
        log::warn!("{line}");
        self.audit.lock().expect("audit lock").push(line);
        false
    }

    pub fn audit_lines(&self) -> Vec<String> {
        self.audit.lock().expect("audit lock").clone()
    }

    /// Reads `player_id,token` rows (with that header).
    pub fn parse<R: Read>(source: R) -> Result<Self, csv::Error> {
        #[derive(Deserialize)]
        struct Row {
            player_id: u32,
            token: String,
        }
        let mut registry = Self::new();
        for row in csv::Reader::from_reader(source).deserialize() {
            let row: Row = row?;
            registry.insert(PlayerId(row.player_id), row.token);
        }
        Ok(registry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stored_token_matches() {
        let mut r = TokenRegistry::new();
        r.insert(PlayerId(12), "valid_token_123");
        r.insert(PlayerId(15), "valid_token_789");
        assert!(r.authenticate(PlayerId(12), "valid_token_123"));
        assert!(!r.authenticate(PlayerId(15), "invalid_token_456"));
        assert!(!r.authenticate(PlayerId(99), "valid_token_123"));
        assert_eq!(
            r.audit_lines(),
            [
                "Authentication failed for Player 15. Data not stored.",
                "Authentication failed for Player 99. Data not stored."
            ]
        );
    }

    #[test]
    fn parses_token_file() {
        let r = TokenRegistry::parse("player_id,token\n1,abc\n2,\"x,y\"\n".as_bytes()).unwrap();
        assert_eq!(r.token_of(PlayerId(2)), Some("x,y"));
    }
}
