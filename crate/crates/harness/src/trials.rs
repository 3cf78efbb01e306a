//! Randomized trial batteries behind the acceptance suite.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::sync::{Arc, Weak};
use std::time::Duration;

use openm2m::broker::{DeliveryClass, Message, Target};
use openm2m::codec::{decode_element, encode_element, Format};
use openm2m::env::{ManualClock, SeededIds};
use openm2m::gateway::PresenceStatus;
use openm2m::model::{ContextElement, DataElement, Triple};
use openm2m::notify::{Predicate, Shape, Subscription};
use openm2m::store::{
    replay, EventLog, EventStore, Filter, FilterValue, LogSink, MemorySink, SyncPolicy, TripleEquals,
};
use openm2m::txn::{Participant, TxnCoordinator, TxnId, TxnState};
use openm2m::{Gateway, GatewayConfig, Runtime};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_decimal::Decimal;
use serde::Serialize;
use uuid::Uuid;

use crate::oracle;
use crate::scenario::{Action, Scenario, Step, SubscriptionSpec, VoteSpec, Watch};
use crate::sim::{device_id, run_scenario, sim_epoch, HarnessError, SimParticipant};

// ---- coordinator crashes ----

/// Log sink that fails once its write budget is spent, optionally leaving
/// half of the failing record behind.
struct CrashSink {
    buf: Arc<Mutex<Vec<u8>>>,
    budget: usize,
    torn: bool,
}

impl LogSink for CrashSink {
    fn write_record(&mut self, line: &[u8]) -> io::Result<()> {
        if self.budget == 0 {
            if self.torn {
                self.buf.lock().extend_from_slice(&line[..line.len() / 2]);
                self.torn = false;
            }
            return Err(io::Error::other("simulated crash"));
        }
        self.budget -= 1;
        let mut b = self.buf.lock();
        b.extend_from_slice(line);
        b.push(b'\n');
        Ok(())
    }

    fn sync(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Reads the persisted bytes directly: the decision durably recorded for
/// `txn`, if any, and the participants whose enlistment reached the log.
fn durable_view(bytes: &[u8], txn: &TxnId) -> (Option<bool>, BTreeSet<String>) {
    let mut decided = None;
    let mut enlisted = BTreeSet::new();
    for line in bytes.split(|b| *b == b'\n') {
        let Ok(v) = serde_json::from_slice::<serde_json::Value>(line) else { continue };
        let a = &v["admin"];
        if a["txnId"] != txn.as_str() {
            continue;
        }
        match a["op"].as_str() {
            Some("txnDecided") => decided = Some(a["state"] == "committed"),
            Some("txnEnlisted") => {
                enlisted.insert(a["participant"].as_str().unwrap_or_default().to_owned());
            }
            _ => {}
        }
    }
    (decided, enlisted)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CrashReport {
    pub trials: u64,
    pub consistent: u64,
    /// Trials where no decision reached the log and restart aborted.
    pub presumed_aborts: u64,
    /// Trials where a commit decision survived the crash.
    pub durable_commits: u64,
}

/// Crashes the coordinator at a random log write during a transaction, then
/// restarts it from the bytes that made it to the log.
pub fn crash_trials(trials: usize, seed: u64) -> Result<CrashReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CrashReport::default();
    for trial in 0..trials {
        let k = rng.gen_range(1..=4usize);
        let parts: Vec<Arc<SimParticipant>> = (0..k)
            .map(|p| {
                let vote = if rng.gen_bool(0.85) { VoteSpec::Yes } else { VoteSpec::No };
                Arc::new(SimParticipant::new(format!("crash{trial}:p{p}"), vote, Duration::ZERO, Weak::new()))
            })
            .collect();
        // begin, k enlistments, preparing, decided, completed
        let budget = rng.gen_range(1..=k + 3);
        let buf = Arc::new(Mutex::new(Vec::new()));
        let sink = CrashSink { buf: buf.clone(), budget, torn: rng.gen_bool(0.5) };
        let clock = Arc::new(ManualClock::new(sim_epoch()));
        let ids = Arc::new(SeededIds::new(seed ^ trial as u64));
        let store = EventStore::with_sink(Box::new(sink), EventLog::default(), SyncPolicy::EveryAppend, clock.clone(), ids.clone())
            .map_err(|e| HarnessError::Trial(e.to_string()))?;
        let coord = TxnCoordinator::new(Arc::new(store));
        let txn = coord.begin().map_err(|e| HarnessError::Trial(e.to_string()))?;
        let mut crashed = false;
        for p in &parts {
            if coord.enlist(&txn, p.clone()).is_err() {
                crashed = true;
                break;
            }
        }
        if !crashed {
            crashed = coord.commit(&txn, Duration::from_millis(200)).is_err();
        }
        drop(coord);

        let bytes = buf.lock().clone();
        let (log, _) = EventLog::parse_jsonl(&bytes).map_err(|e| HarnessError::Trial(e.to_string()))?;
        let store = EventStore::with_sink(Box::new(MemorySink::new()), log.clone(), SyncPolicy::EveryAppend, clock, ids)
            .map_err(|e| HarnessError::Trial(e.to_string()))?;
        let coord = TxnCoordinator::restore(Arc::new(store), &log);
        let resolve = |id: &str| parts.iter().find(|p| p.id() == id).map(|p| p.clone() as Arc<dyn Participant>);
        coord.recover(&resolve).map_err(|e| HarnessError::Trial(e.to_string()))?;

        let (decided, enlisted) = durable_view(&bytes, &txn);
        let committed = decided == Some(true);
        let want = if committed { TxnState::Committed } else { TxnState::Aborted };
        let ok = crashed
            && coord.state(&txn) == Some(want)
            && parts.iter().all(|p| {
                let seen = p.observed();
                seen.iter().all(|c| *c == committed) && (!enlisted.contains(p.id()) || !seen.is_empty())
            });
        report.trials += 1;
        report.consistent += ok as u64;
        match decided {
            None => report.presumed_aborts += 1,
            Some(true) => report.durable_commits += 1,
            Some(false) => {}
        }
    }
    Ok(report)
}

// ---- event sourcing ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ReplayReport {
    pub operations: u64,
    pub rejected: u64,
    pub events: u64,
    pub live_digest: String,
    pub replay_digest: String,
    /// Gateway state rebuilt from the persisted bytes equals the live state.
    pub restored_state_matches: bool,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.live_digest == self.replay_digest && self.restored_state_matches
    }
}

/// Drives a gateway through `ops` random operations, then rebuilds it from
/// the log bytes.
pub fn event_sourcing_trial(ops: usize, seed: u64) -> Result<ReplayReport, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sink = MemorySink::new();
    let clock = Arc::new(ManualClock::new(sim_epoch()));
    let ids = Arc::new(SeededIds::new(seed));
    let store = EventStore::with_sink(Box::new(sink.clone()), EventLog::default(), SyncPolicy::Never, clock.clone(), ids.clone())
        .map_err(|e| HarnessError::Trial(e.to_string()))?;
    let config = GatewayConfig { heartbeat_deadline_ms: 5_000, ..GatewayConfig::default() };
    let rt = Runtime { clock: clock.clone(), ids: ids.clone(), local_delivery: true };
    let gw = Gateway::with_store(config.clone(), rt, Arc::new(store))?;

    const KINDS: [&str; 2] = ["air", "soil"];
    let dev = |rng: &mut ChaCha8Rng| device_id(rng.gen_range(0..20));
    let mut groups: Vec<Uuid> = Vec::new();
    let mut subs: Vec<Uuid> = Vec::new();
    let mut open: Vec<TxnId> = Vec::new();
    let mut rejected = 0u64;
    let uuid = |rng: &mut ChaCha8Rng| uuid::Builder::from_random_bytes(rng.gen()).into_uuid();

    for _ in 0..ops {
        let roll = rng.gen_range(0..100);
        let r: Result<(), HarnessError> = (|| {
            match roll {
                0..=34 => {
                    let mut ts = vec![
                        Triple::number("temp", rng.gen_range(-200..400) as f64 / 10.0).expect("finite"),
                        Triple::string("kind", *KINDS.choose(&mut rng).expect("nonempty")).expect("valid"),
                    ];
                    if rng.gen_bool(0.3) {
                        ts.push(Triple::number("lat", rng.gen_range(59.0..61.0)).expect("finite"));
                        ts.push(Triple::number("lon", rng.gen_range(24.0..26.0)).expect("finite"));
                    }
                    if rng.gen_bool(0.1) {
                        ts.push(Triple::boolean("alarm", rng.gen()).expect("valid"));
                    }
                    let d = DataElement::with_id(uuid(&mut rng), ts, Vec::new()).expect("valid");
                    if rng.gen_bool(0.8) {
                        gw.append_element(ContextElement::new(d, dev(&mut rng), "Sensor").expect("valid"))?;
                    } else {
                        gw.append_element(d)?;
                    }
                }
                35..=39 => {
                    let deadline = rng.gen_bool(0.5).then(|| Duration::from_millis(rng.gen_range(500..5000)));
                    gw.register_object(&dev(&mut rng), None, deadline)?;
                }
                40..=44 => gw.presence_update(&dev(&mut rng), PresenceStatus::Online, None)?,
                45..=46 => gw.presence_update(&dev(&mut rng), PresenceStatus::Offline, None)?,
                47 => gw.remove_object(&dev(&mut rng))?,
                48..=50 => {
                    let attrs = if rng.gen_bool(0.6) {
                        vec![Triple::string("kind", *KINDS.choose(&mut rng).expect("nonempty")).expect("valid")]
                    } else {
                        Vec::new()
                    };
                    let explicit = (0..rng.gen_range(0..3)).map(|_| dev(&mut rng)).collect();
                    groups.push(gw.create_group(attrs, explicit)?);
                }
                51 => {
                    if let Some(g) = groups.choose(&mut rng).copied() {
                        gw.delete_group(g)?;
                    }
                }
                52..=66 => {
                    let target = match (rng.gen_range(0..4), groups.choose(&mut rng).copied()) {
                        (1, Some(g)) => Target::Group { target: g },
                        (2, Some(g)) => Target::Any { target: g },
                        (3, Some(g)) => Target::Selective {
                            target: g,
                            predicate: Filter {
                                triple_equals: vec![TripleEquals {
                                    name: "kind".into(),
                                    value: FilterValue::Text("air".into()),
                                }],
                                ..Filter::default()
                            },
                        },
                        _ => Target::Single { target: dev(&mut rng) },
                    };
                    let txn = if rng.gen_bool(0.2) { open.choose(&mut rng).cloned() } else { None };
                    let class = match (&txn, rng.gen_bool(0.5)) {
                        (Some(_), _) => DeliveryClass::Transactional,
                        (None, true) => DeliveryClass::Confirmed,
                        (None, false) => DeliveryClass::Unconfirmed,
                    };
                    let payload = DataElement::with_id(
                        uuid(&mut rng),
                        vec![Triple::string("cmd", "ping").expect("valid")],
                        Vec::new(),
                    )
                    .expect("valid");
                    gw.send_message(Message {
                        msg_id: uuid(&mut rng),
                        sender: dev(&mut rng),
                        target,
                        payload,
                        delivery_class: class,
                        txn_id: txn,
                    })?;
                }
                67..=74 => {
                    let d = dev(&mut rng);
                    if let Some(m) = gw.pending(&d)?.first() {
                        gw.ack(&d, m.msg_id)?;
                    }
                }
                75..=77 => open.push(gw.begin_txn()?),
                78..=79 => {
                    if !open.is_empty() {
                        let t = open.swap_remove(rng.gen_range(0..open.len()));
                        gw.commit_txn(&t, Some(Duration::from_millis(500)))?;
                    }
                }
                80 => {
                    if !open.is_empty() {
                        let t = open.swap_remove(rng.gen_range(0..open.len()));
                        gw.abort_txn(&t)?;
                    }
                }
                81..=83 => {
                    let target = dev(&mut rng);
                    let predicate = match rng.gen_range(0..5) {
                        0 => Predicate::Band { triple_name: "temp".into(), low: 0.0, high: 25.0 },
                        1 => Predicate::Geofence {
                            area_id: "a".into(),
                            shape: Shape::Circle {
                                center: openm2m::notify::LatLon { lat: 60.0, lon: 25.0 },
                                radius_m: 50_000.0,
                            },
                        },
                        2 => match groups.choose(&mut rng) {
                            Some(g) => Predicate::GroupChange { group_id: *g },
                            None => Predicate::Alarm { triple_name: "alarm".into() },
                        },
                        3 => Predicate::Presence { object_id: target.clone() },
                        _ => Predicate::Alarm { triple_name: "alarm".into() },
                    };
                    subs.push(gw.subscribe(Subscription {
                        sub_id: uuid(&mut rng),
                        subscriber: "local:replay".into(),
                        registrar: target.clone(),
                        target,
                        predicate,
                    })?);
                }
                84 => {
                    if !subs.is_empty() {
                        let s = subs.swap_remove(rng.gen_range(0..subs.len()));
                        gw.unsubscribe(s)?;
                    }
                }
                85..=87 => {
                    let units = Decimal::new(rng.gen_range(0..10_000), 2);
                    gw.charge(&dev(&mut rng), units, "bandwidth")?;
                }
                _ => {
                    clock.advance(chrono::Duration::milliseconds(rng.gen_range(0..2_000)));
                    gw.tick()?;
                }
            }
            Ok(())
        })();
        if r.is_err() {
            rejected += 1;
        }
    }
    for t in open {
        gw.abort_txn(&t)?;
    }

    let bytes = sink.bytes();
    let (log, intact) = EventLog::parse_jsonl(&bytes).map_err(|e| HarnessError::Trial(e.to_string()))?;
    let replay_digest = replay(&log).map_err(|e| HarnessError::Trial(e.to_string()))?.digest();
    let live_digest = gw.store().snapshot_digest();

    let restored_store = EventStore::with_sink(Box::new(MemorySink::new()), log, SyncPolicy::Never, clock.clone(), ids.clone())
        .map_err(|e| HarnessError::Trial(e.to_string()))?;
    let rt = Runtime { clock, ids, local_delivery: false };
    let restored = Gateway::with_store(config, rt, Arc::new(restored_store))?;
    Ok(ReplayReport {
        operations: ops as u64,
        rejected,
        events: gw.store().last_seq(),
        live_digest,
        replay_digest,
        restored_state_matches: intact == bytes.len() && restored.state_digest() == gw.state_digest(),
    })
}

// ---- codec ----

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct CodecReport {
    pub elements: u64,
    pub failures: u64,
    pub first_failure: Option<String>,
}

/// Round-trips random elements through XML and JSON and compares digests
/// within and across formats.
pub fn codec_trial(elements: usize, seed: u64) -> CodecReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CodecReport::default();
    for _ in 0..elements {
        let e = crate::gen::element(&mut rng);
        let want = e.digest();
        let mut fail = None;
        let mut digests = Vec::new();
        for f in [Format::Xml, Format::Json] {
            match decode_element(&encode_element(&e, f), f) {
                Ok(back) if back == e && back.digest() == want => digests.push(back.digest()),
                Ok(back) => fail = Some(format!("{f:?} round trip changed {} into {}", e.digest(), back.digest())),
                Err(err) => fail = Some(format!("{f:?} decode failed: {err}")),
            }
        }
        if fail.is_none() && digests.len() == 2 && digests[0] != digests[1] {
            fail = Some("XML and JSON decode to different digests".into());
        }
        report.elements += 1;
        if let Some(f) = fail {
            report.failures += 1;
            report.first_failure.get_or_insert(f);
        }
    }
    report
}

// ---- notification walks ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub enum WalkKind {
    Band,
    Geofence,
    GroupChange,
    Presence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct WalkReport {
    pub kind: WalkKind,
    pub walks: u64,
    pub matching: u64,
    pub notifications: u64,
}

fn reading(at_ms: u64, device: usize, pairs: &[(&str, serde_json::Value)]) -> Step {
    Step {
        at_ms,
        action: Action::Reading {
            device,
            triples: pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        },
    }
}

/// A convex polygon: vertices on a circle at well-separated angles.
fn convex_polygon(rng: &mut ChaCha8Rng, lat: f64, lon: f64, r: f64) -> Vec<[f64; 2]> {
    let k = rng.gen_range(3..=7);
    let step = std::f64::consts::TAU / k as f64;
    (0..k)
        .map(|i| {
            let a = i as f64 * step + rng.gen_range(-0.3..0.3) * step;
            [lat + r * a.sin(), lon + r * a.cos()]
        })
        .collect()
}

/// One random walk of `kind` as a scenario; the watched device is device 0.
pub fn walk_scenario(kind: WalkKind, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(5..40);
    let mut steps = Vec::new();
    let watch = match kind {
        WalkKind::Band => {
            let low = rng.gen_range(-10.0..30.0);
            let high = low + rng.gen_range(0.5..15.0);
            for i in 0..n {
                let device = if rng.gen_bool(0.8) { 0 } else { 1 };
                let pairs: &[(&str, serde_json::Value)] = if rng.gen_bool(0.1) {
                    &[("other", serde_json::json!(1))]
                } else {
                    &[("t", serde_json::json!(rng.gen_range(low - 15.0..high + 15.0)))]
                };
                steps.push(reading(i * 100, device, pairs));
            }
            Watch::Band { triple: "t".into(), low, high }
        }
        WalkKind::Geofence => {
            let (lat, lon) = (rng.gen_range(-60.0..60.0), rng.gen_range(-170.0..170.0));
            let r = rng.gen_range(0.001..0.05);
            let watch = if rng.gen_bool(0.5) {
                Watch::Circle { lat, lon, radius_m: r * 111_000.0 }
            } else {
                Watch::Polygon { vertices: convex_polygon(&mut rng, lat, lon, r) }
            };
            let (mut la, mut lo) = (lat + rng.gen_range(-2.0 * r..2.0 * r), lon + rng.gen_range(-2.0 * r..2.0 * r));
            for i in 0..n {
                la = (la + rng.gen_range(-0.6 * r..0.6 * r)).clamp(lat - 2.0 * r, lat + 2.0 * r);
                lo = (lo + rng.gen_range(-0.6 * r..0.6 * r)).clamp(lon - 2.0 * r, lon + 2.0 * r);
                if rng.gen_bool(0.1) {
                    steps.push(reading(i * 100, 0, &[("temp", serde_json::json!(20))]));
                } else {
                    steps.push(Step { at_ms: i * 100, action: Action::Move { device: 0, lat: la, lon: lo } });
                }
            }
            watch
        }
        WalkKind::GroupChange => {
            let mut attributes = BTreeMap::new();
            attributes.insert("kind".to_owned(), "air".to_owned());
            if rng.gen_bool(0.5) {
                attributes.insert("uom".to_owned(), "Cel".to_owned());
            }
            for i in 0..n {
                let device = if rng.gen_bool(0.8) { 0 } else { 1 };
                let kind = *["air", "soil"].choose(&mut rng).expect("nonempty");
                let uom = *["Cel", "K"].choose(&mut rng).expect("nonempty");
                steps.push(if rng.gen_bool(0.1) {
                    Step { at_ms: i * 100, action: Action::Move { device, lat: 1.0, lon: 2.0 } }
                } else {
                    reading(i * 100, device, &[("kind", kind.into()), ("uom", uom.into())])
                });
            }
            Watch::Group { attributes }
        }
        WalkKind::Presence => {
            let mut at = 0;
            for _ in 0..n {
                // heartbeats jittered around the 1 s deadline
                at += rng.gen_range(700..1400);
                let device = if rng.gen_bool(0.85) { 0 } else { 1 };
                let action = if rng.gen_bool(0.1) { Action::Offline { device } } else { Action::Heartbeat { device } };
                steps.push(Step { at_ms: at, action });
            }
            Watch::Presence
        }
    };
    Scenario {
        device_count: 2,
        steps,
        subscriptions: vec![SubscriptionSpec { device: 0, watch }],
        heartbeat_deadline_ms: 1000,
        ..Scenario::empty(seed)
    }
}

pub fn notification_walks(kind: WalkKind, walks: usize, seed: u64) -> Result<WalkReport, HarnessError> {
    let mut report = WalkReport { kind, walks: 0, matching: 0, notifications: 0 };
    for w in 0..walks {
        let r = run_scenario(&walk_scenario(kind, seed.wrapping_mul(1_000_003).wrapping_add(w as u64)))?;
        report.walks += 1;
        report.matching += (r.notification_diff == 0) as u64;
        report.notifications += r.notifications;
    }
    Ok(report)
}

// ---- any-mode fairness ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FairnessReport {
    pub sends: u64,
    pub members: u64,
    pub counts: Vec<u64>,
    pub bounds: (u64, u64),
}

impl FairnessReport {
    pub fn within_bounds(&self) -> bool {
        self.counts.len() as u64 == self.members
            && self.counts.iter().sum::<u64>() == self.sends
            && self.counts.iter().all(|c| (self.bounds.0..=self.bounds.1).contains(c))
    }
}

pub fn any_mode_fairness(members: usize, sends: usize, seed: u64) -> Result<FairnessReport, HarnessError> {
    let r = run_scenario(&Scenario::any_mode(members, sends, seed))?;
    Ok(FairnessReport {
        sends: sends as u64,
        members: members as u64,
        counts: r.delivered_counts.values().copied().collect(),
        bounds: oracle::fair_bounds(sends as u64, members as u64),
    })
}
