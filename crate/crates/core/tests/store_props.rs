use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::sync::Arc;
use std::thread;

use openm2m::env::{RandomIds, SeededIds, SystemClock};
use openm2m::model::{ContextElement, DataElement, Element, Triple};
use openm2m::store::{
    replay, EventLog, EventStore, Filter, FilterValue, StoreError, SyncPolicy, TripleEquals,
};
use proptest::prelude::*;
use uuid::Uuid;

fn store() -> EventStore {
    EventStore::in_memory(Arc::new(SystemClock), Arc::new(SeededIds::new(1)))
}

#[derive(Debug, Clone)]
struct Op {
    id: u8,
    temp: i8,
    unit: u8,
    flag: bool,
}

fn op() -> impl Strategy<Value = Op> {
    (0u8..12, -3i8..3, 0u8..3, any::<bool>())
        .prop_map(|(id, temp, unit, flag)| Op { id, temp, unit, flag })
}

const UNITS: [&str; 3] = ["Cel", "K", "degF"];
const TYPES: [&str; 2] = ["Observation", "Sensor"];

/// Entity identity is fixed per element id so replacements never change it.
fn build(o: &Op) -> Element {
    let d = DataElement::with_id(
        Uuid::from_u128(o.id as u128 + 1),
        vec![
            Triple::number("temp", o.temp as f64 / 2.0).unwrap(),
            Triple::string("uom", UNITS[o.unit as usize]).unwrap(),
            Triple::boolean("alarm", o.flag).unwrap(),
        ],
        vec![],
    )
    .unwrap();
    if o.id.is_multiple_of(2) {
        let eid = format!("dev-{}", o.id % 5);
        let ety = TYPES[(o.id as usize / 2) % 2];
        ContextElement::new(d, eid, ety).unwrap().into()
    } else {
        d.into()
    }
}

fn filter() -> impl Strategy<Value = Filter> {
    (
        prop::option::of(prop::sample::select(vec!["Observation", "Sensor", "Other"])),
        prop::collection::vec(
            prop_oneof![
                (-3i8..3).prop_map(|t| ("temp", FilterValue::Number(t as f64 / 2.0))),
                (-3i8..3).prop_map(|t| ("temp", FilterValue::Text((t as f64 / 2.0).to_string()))),
                prop::sample::select(UNITS.to_vec()).prop_map(|u| ("uom", FilterValue::Text(u.into()))),
                any::<bool>().prop_map(|b| ("alarm", FilterValue::Bool(b))),
                Just(("missing", FilterValue::Bool(true))),
            ],
            0..3,
        ),
        prop::option::of(0u64..40),
    )
        .prop_filter_map("at least one clause", |(ety, te, since)| {
            let f = Filter {
                entity_type: ety.map(str::to_owned),
                triple_equals: te
                    .into_iter()
                    .map(|(n, v)| TripleEquals { name: n.into(), value: v })
                    .collect(),
                since_seq: since,
            };
            (!f.is_empty()).then_some(f)
        })
}

/// Independent clause evaluation over the lexical forms.
fn scan_matches(f: &Filter, seq: u64, e: &Element) -> bool {
    let ety_ok = f.entity_type.as_deref().is_none_or(|t| e.entity_type() == Some(t));
    let since_ok = f.since_seq.is_none_or(|s| seq > s);
    let triples_ok = f.triple_equals.iter().all(|c| {
        let Some(t) = e.triples().iter().find(|t| t.name() == c.name) else { return false };
        let lex = t.value().lexical();
        match &c.value {
            FilterValue::Bool(b) => t.value().as_bool() == Some(*b),
            FilterValue::Number(n) => t.value().as_number() == Some(*n),
            FilterValue::Text(s) => match t.value().as_number() {
                Some(v) => s.parse::<f64>().ok() == Some(v),
                None => &lex == s,
            },
        }
    });
    ety_ok && since_ok && triples_ok
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn live_snapshot_equals_replay(ops in prop::collection::vec(op(), 0..60)) {
        let s = store();
        for o in &ops {
            s.append_element(build(o)).unwrap();
        }
        let log = s.log();
        prop_assert_eq!(replay(&log).unwrap().digest(), s.snapshot_digest());
        let (parsed, intact) = EventLog::parse_jsonl(log.to_jsonl().as_bytes()).unwrap();
        prop_assert_eq!(intact, log.to_jsonl().len());
        prop_assert_eq!(replay(&parsed).unwrap().digest(), s.snapshot_digest());

        // fold oracle: latest version per id and latest element per entity
        let mut latest: BTreeMap<Uuid, (u64, String)> = BTreeMap::new();
        let mut per_entity: BTreeMap<String, Uuid> = BTreeMap::new();
        for (i, o) in ops.iter().enumerate() {
            let e = build(o);
            latest.insert(e.element_id(), (i as u64 + 1, e.digest()));
            if let Some(eid) = e.entity_id() {
                per_entity.insert(eid.to_owned(), e.element_id());
            }
        }
        let snap = s.snapshot();
        let got: BTreeMap<Uuid, (u64, String)> = snap
            .elements()
            .map(|se| (se.element.element_id(), (se.seq, se.element.digest())))
            .collect();
        prop_assert_eq!(got, latest);
        for (eid, id) in per_entity {
            prop_assert_eq!(snap.latest_for_entity(&eid).unwrap().element.element_id(), id);
        }
    }

    #[test]
    fn query_equals_linear_scan(ops in prop::collection::vec(op(), 0..40), f in filter()) {
        let s = store();
        for o in &ops {
            s.append_element(build(o)).unwrap();
        }
        let got: Vec<u64> = s.query(&f).unwrap().iter().map(|e| e.seq).collect();
        let want: Vec<u64> = s
            .log()
            .entries
            .iter()
            .filter(|e| e.element().is_some_and(|el| scan_matches(&f, e.seq, el)))
            .map(|e| e.seq)
            .collect();
        prop_assert_eq!(got, want);
    }
}

#[test]
fn empty_filter_rejected() {
    assert!(matches!(store().query(&Filter::default()), Err(StoreError::EmptyFilter)));
}

#[test]
fn concurrent_appends_get_dense_sequence() {
    let s = Arc::new(EventStore::in_memory(Arc::new(SystemClock), Arc::new(RandomIds)));
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let s = s.clone();
            thread::spawn(move || {
                (0..1250)
                    .map(|i| {
                        let d = DataElement::new(vec![Triple::number("i", (t * 10_000 + i) as f64).unwrap()], vec![])
                            .unwrap();
                        s.append_element(d).unwrap().seq
                    })
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    let mut seqs: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    seqs.sort_unstable();
    assert_eq!(seqs, (1..=10_000).collect::<Vec<_>>());
    let ids: HashSet<_> = s.log().entries.iter().map(|e| e.event_id).collect();
    assert_eq!(ids.len(), 10_000);
}

#[test]
fn acknowledged_appends_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let open = || {
        EventStore::open(&path, SyncPolicy::EveryAppend, Arc::new(SystemClock), Arc::new(RandomIds)).unwrap()
    };
    let mut acked = Vec::new();
    {
        let s = open();
        for i in 0..50 {
            let d = DataElement::new(vec![Triple::number("i", i as f64).unwrap()], vec![]).unwrap();
            acked.push(s.append_element(d).unwrap().element().unwrap().element_id());
        }
    }
    // a crash in the middle of the next write
    std::fs::OpenOptions::new()
        .append(true)
        .open(&path)
        .unwrap()
        .write_all(br#"{"seq":51,"eventId":"#)
        .unwrap();
    let s = open();
    assert_eq!(s.last_seq(), 50);
    for id in &acked {
        assert!(s.get(*id).is_some());
    }
    let next = s.append_element(DataElement::new(vec![], vec![]).unwrap()).unwrap();
    assert_eq!(next.seq, 51);
    drop(s);
    assert_eq!(open().last_seq(), 51);
}

#[test]
fn replay_rejects_duplicate_sequence() {
    let s = store();
    for _ in 0..6 {
        s.append_element(DataElement::new(vec![], vec![]).unwrap()).unwrap();
    }
    let mut log = s.log();
    log.entries[5].seq = 5;
    assert!(matches!(replay(&log), Err(StoreError::CorruptLog(_))));
    assert_eq!(replay(&EventLog::default()).unwrap().element_count(), 0);
}
