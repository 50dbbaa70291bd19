use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnalyticsError, CATEGORIES};
use crate::catalog::{DilemmaCatalog, Group};
use crate::clock::format_timestamp;
use crate::responsestore::{ResponseStore, StoredRow};
use crate::session::{PlayerId, Position, ResponseRecord};

/// A kind of respondent: how often it occurs and how it answers each group.
#[derive(Debug, Clone, PartialEq)]
pub struct Persona {
    pub name: String,
    pub weight: f64,
    pub distributions: BTreeMap<Group, [f64; CATEGORIES]>,
}

impl Persona {
    pub fn new(name: impl Into<String>, weight: f64, a: [f64; CATEGORIES], b: [f64; CATEGORIES]) -> Self {
        Self {
            name: name.into(),
            weight,
            distributions: [(Group::A, a), (Group::B, b)].into(),
        }
    }

    fn validate(&self) -> Result<(), AnalyticsError> {
        let bad = |what: String| AnalyticsError::BadDistribution {
            persona: self.name.clone(),
            what,
        };
        if !(self.weight.is_finite() && self.weight > 0.0) {
            return Err(bad(format!("weight {} is not positive", self.weight)));
        }
        for group in Group::ALL {
            let dist = self
                .distributions
                .get(&group)
                .ok_or_else(|| bad(format!("no distribution for group {}", group.as_str())))?;
            if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(bad(format!("group {} has a negative probability", group.as_str())));
            }
            let sum: f64 = dist.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(bad(format!("group {} sums to {sum}", group.as_str())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DummySummary {
    /// Persona index per generated player, in player order.
    pub personas: Vec<usize>,
    pub rows_written: usize,
}

/// Writes `n_players` complete synthetic sessions into `store`: player
/// `i + 1` plays alone in room `dummy-{i + 1}` and answers every dilemma of
/// the catalog from its persona's distribution.
pub fn generate_dummy(
    personas: &[Persona],
    n_players: usize,
    seed: u64,
    catalog: &DilemmaCatalog,
    store: &ResponseStore,
    start_ms: u64,
) -> Result<DummySummary, AnalyticsError> {
    if personas.is_empty() {
        return Err(AnalyticsError::BadDistribution {
            persona: String::new(),
            what: "no personas".into(),
        });
    }
    for p in personas {
        p.validate()?;
    }
    let pick = WeightedIndex::new(personas.iter().map(|p| p.weight)).expect("weights validated");
    let samplers: Vec<BTreeMap<Group, WeightedIndex<f64>>> = personas
        .iter()
        .map(|p| {
            p.distributions
                .iter()
                .map(|(&g, d)| (g, WeightedIndex::new(d.iter().copied()).expect("validated")))
                .collect()
        })
        .collect();

    store.ensure_tables()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = DummySummary {
        personas: Vec::with_capacity(n_players),
        rows_written: 0,
    };
    let mut now = start_ms;
    for i in 0..n_players {
        let persona = pick.sample(&mut rng);
        summary.personas.push(persona);
        let player = PlayerId(i as u32 + 1);
        for d in catalog.dilemmas() {
            let index = samplers[persona][&d.group].sample(&mut rng) as u8;
            now += 1000;
            let record = ResponseRecord {
                player,
                dilemma_id: d.dilemma_id,
                option_index: index,
                category: d.category_of(index).expect("index below 6"),
                timestamp: format_timestamp(now),
                room_id: format!("dummy-{}", i + 1),
                position: Position { x: 0, y: 0 },
                answer_latency_ms: 0,
                attempt: 1,
            };
            store.append_response(&StoredRow::new(record, seed))?;
            summary.rows_written += 1;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> DilemmaCatalog {
        crate::session::tests::content().catalog.clone()
    }

    #[test]
    fn point_mass() {
        let store = ResponseStore::in_memory();
        let p = Persona::new("fixed", 1.0, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        generate_dummy(&[p], 20, 3, &catalog(), &store, 0).unwrap();
        let c = store.contents().unwrap();
        for g in Group::ALL {
            assert!(c.rows(g).iter().all(|r| r.record.category.index() == 0));
        }
    }

    #[test]
    fn bad_distribution() {
        let store = ResponseStore::in_memory();
        let p = Persona::new("off", 1.0, [0.5, 0.4, 0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            generate_dummy(&[p], 1, 0, &catalog(), &store, 0),
            Err(AnalyticsError::BadDistribution { .. })
        ));
    }
}
