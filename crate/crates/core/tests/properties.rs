use std::sync::Arc;

use proptest::prelude::*;
use proptest::sample::subsequence;

use dilemma_core::analytics::{decode_one_hot, one_hot, standardize, AnswerMatrix, RowKey};
use dilemma_core::catalog::{build_diagonal_table, build_group_table, parse_catalog, write_catalog, ZERO_CELL};
use dilemma_core::clock::ManualClock;
use dilemma_core::syncnet::{ClientReplica, Host, MessageKind, Payload, Recipient, TokenRegistry, WireMessage};
use dilemma_core::voting::{tally, VoteChoice};
use dilemma_core::worldstate::{ObjectChange, WorldObject};
use dilemma_core::{Dilemma, DilemmaCatalog, Group, IdeologyCategory, PlayerId, ResponseStore, Room, SceneDelta, WorldState};

fn text() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,\"'.?\n]{0,24}"
}

fn dilemmas() -> impl Strategy<Value = Vec<Dilemma>> {
    prop::collection::btree_set(1u32..500, 1..12).prop_flat_map(|ids| {
        let ids: Vec<u32> = ids.into_iter().collect();
        let n = ids.len();
        (
            Just(ids),
            prop::collection::vec(
                (any::<bool>(), 1u32..5, text(), text(), prop::array::uniform6(text())),
                n,
            ),
        )
            .prop_map(|(ids, fields)| {
                ids.into_iter()
                    .zip(fields)
                    .map(|(id, (b, level, venue, prompt, options))| Dilemma {
                        dilemma_id: id,
                        group: if b { Group::B } else { Group::A },
                        venue,
                        level,
                        prompt,
                        options,
                    })
                    .collect()
            })
    })
}

fn vote() -> impl Strategy<Value = VoteChoice> {
    prop_oneof![Just(VoteChoice::Like), Just(VoteChoice::Dislike), Just(VoteChoice::Other)]
}

fn world() -> WorldState {
    WorldState::new((0..4).map(|i| WorldObject {
        object_id: format!("obj{i}"),
        enabled: i % 2 == 0,
        variant_tags: Default::default(),
        venue: format!("V{i}"),
    }))
}

fn delta() -> impl Strategy<Value = SceneDelta> {
    let change = (
        0..4usize,
        prop::option::of(any::<bool>()),
        prop::collection::btree_set("[a-d]", 0..3),
        prop::collection::btree_set("[a-d]", 0..3),
    )
        .prop_map(|(o, enable, add_tags, remove_tags)| ObjectChange {
            object_id: format!("obj{o}"),
            enable,
            add_tags,
            remove_tags,
        });
    (1u32..20, prop::collection::vec(change, 1..4)).prop_map(|(id, changes)| SceneDelta {
        dilemma_id: id,
        category: IdeologyCategory::new(Group::A, 0).unwrap(),
        changes,
    })
}

proptest! {
    #[test]
    fn catalog_round_trips(ds in dilemmas()) {
        let catalog = DilemmaCatalog::new(ds).unwrap();
        let mut buf = Vec::new();
        write_catalog(&catalog, &mut buf).unwrap();
        prop_assert_eq!(parse_catalog(buf.as_slice()).unwrap(), catalog);
    }

    #[test]
    fn diagonal_keeps_answers_on_the_diagonal(n in 1u32..=20, seed in any::<u64>()) {
        let catalog = DilemmaCatalog::new(
            (1..=n)
                .map(|i| Dilemma {
                    dilemma_id: i,
                    group: Group::A,
                    venue: format!("V{i}"),
                    level: 1,
                    prompt: format!("P{i}"),
                    options: std::array::from_fn(|o| format!("o{o}")),
                })
                .collect(),
        )
        .unwrap();
        let table = build_group_table(&catalog, Group::A).unwrap();
        let answers: Vec<String> = (0..n).map(|i| format!("a{}", seed.wrapping_add(i as u64) % 7)).collect();
        let diag = build_diagonal_table(&table, &answers).unwrap();
        for (i, row) in diag.answer_block().iter().enumerate() {
            prop_assert_eq!(row.len(), n as usize);
            for (j, cell) in row.iter().enumerate() {
                if i == j {
                    prop_assert_eq!(cell, &answers[i]);
                } else {
                    prop_assert_eq!(cell.as_str(), ZERO_CELL);
                }
            }
        }
    }

    #[test]
    fn tally_ignores_order(votes in prop::collection::vec(vote(), 0..=6), seed in any::<u64>()) {
        let score = tally(&votes);
        prop_assert_eq!(score.total() as usize, votes.len());
        let mut shuffled = votes.clone();
        let len = shuffled.len();
        if len > 1 {
            shuffled.rotate_left((seed as usize) % len);
            shuffled.swap(0, (seed as usize / 7) % len);
        }
        prop_assert_eq!(tally(&shuffled), score);
    }

    #[test]
    fn world_replay_is_deterministic(deltas in prop::collection::vec(delta(), 0..12)) {
        let mut a = world();
        let mut b = world();
        for d in &deltas {
            a.apply_in_place(d).unwrap();
        }
        for d in &deltas {
            b = b.apply_delta(d).unwrap();
        }
        prop_assert_eq!(a.snapshot(), b.snapshot());
    }

    #[test]
    fn inverse_restores_objects(d in delta()) {
        let before = world();
        let inverse = before.inverse_of(&d).unwrap();
        let after = before.apply_delta(&d).unwrap().apply_delta(&inverse).unwrap();
        prop_assert_eq!(after.objects, before.objects);
    }

    #[test]
    fn one_hot_round_trips(cells in prop::collection::vec(prop::collection::vec(0u8..6, 4), 1..20)) {
        let matrix = AnswerMatrix {
            group: Group::A,
            rows: (0..cells.len()).map(|i| RowKey { room_id: "r".into(), player: PlayerId(i as u32) }).collect(),
            dilemma_ids: vec![1, 2, 3, 4],
            cells: cells.clone(),
        };
        let encoded = one_hot(&matrix);
        prop_assert!(encoded.iter().all(|r| r.len() == 24 && r.iter().sum::<f64>() == 4.0));
        prop_assert_eq!(decode_one_hot(&encoded).unwrap(), cells);
    }

    #[test]
    fn standardized_columns_are_centered(x in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..30)) {
        let z = standardize(&x).unwrap();
        for j in 0..3 {
            let mean: f64 = z.iter().map(|r| r[j]).sum::<f64>() / z.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn replica_converges_under_any_delivery_order(
        moves in prop::collection::vec((0i32..64, 0i32..64), 1..30),
        keep in subsequence((0..40usize).collect::<Vec<_>>(), 0..40),
        seed in any::<u64>(),
    ) {
        let mut registry = TokenRegistry::new();
        registry.insert(PlayerId(1), "t1");
        registry.insert(PlayerId(2), "t2");
        let store = Arc::new(ResponseStore::in_memory());
        store.ensure_tables().unwrap();
        let room = Room::new("p", PlayerId(1), Arc::new(dilemma_core::cli::builtin_content()), 3);
        let (mut host, _) = Host::create(room, "t1", Arc::new(registry), store, Arc::new(ManualClock::new(0))).unwrap();
        let mut outs = host.publish(WireMessage::client("p", PlayerId(2), "t2", Payload::Join { at: None })).unwrap();
        for p in [1, 2] {
            let token = format!("t{p}");
            outs.extend(host.publish(WireMessage::client("p", PlayerId(p), &token, Payload::Ready {})).unwrap());
        }
        for (i, (x, y)) in moves.iter().enumerate() {
            let p = 1 + (i as u32 % 2);
            let token = format!("t{p}");
            if let Ok(o) = host.publish(WireMessage::client("p", PlayerId(p), &token, Payload::Move { x: *x, y: *y })) {
                outs.extend(o);
            }
        }
        let snapshot = outs
            .iter()
            .find(|o| o.to == Recipient::Player(PlayerId(2)) && o.message.kind() == MessageKind::Snapshot)
            .unwrap()
            .message
            .clone();
        let mut events: Vec<WireMessage> = outs
            .into_iter()
            .filter(|o| o.to == Recipient::All)
            .map(|o| o.message)
            .collect();
        let dups: Vec<WireMessage> = keep.iter().filter_map(|&i| events.get(i).cloned()).collect();
        events.extend(dups);
        let len = events.len();
        for i in (1..len).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 33) as usize % (i + 1);
            events.swap(i, j);
        }
        let mut replica = ClientReplica::new(PlayerId(2), "p");
        let split = (seed as usize) % (len + 1);
        for e in &events[..split] {
            replica.receive(e.clone());
        }
        replica.receive(snapshot);
        for e in &events[split..] {
            replica.receive(e.clone());
        }
        prop_assert_eq!(replica.pending(), 0);
        prop_assert_eq!(replica.snapshot().to_bytes(), host.snapshot().to_bytes());
    }
}
