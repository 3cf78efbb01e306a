//! Discrete-event simulation of a device fleet around an in-process gateway.
//!
//! Virtual time advances in fixed ticks. Each tick applies the steps that
//! are due, runs the gateway's timers, moves transmissions through a lossy,
//! duplicating network, and lets every device that received something poll
//! its inbox and acknowledge. Everything random comes from the scenario seed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use openm2m::broker::{DeliveryClass, Message, Receipt, Target, Transmission};
use openm2m::env::{ManualClock, SeededIds};
use openm2m::gateway::PresenceStatus;
use openm2m::model::{ContextElement, DataElement, Triple};
use openm2m::notify::{Cause, LatLon, Predicate, Shape, Subscription};
use openm2m::txn::{Participant, TxnId, TxnState, Vote};
use openm2m::{Gateway, GatewayConfig, GatewayError, Runtime};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use uuid::Uuid;

use crate::oracle::{self, Area, Happening, Watcher};
use crate::scenario::{Action, Scenario, ScenarioError, SendClass, SendMode, VoteSpec, Watch};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("scenario invalid: {0}")]
    ScenarioInvalid(String),
    #[error("gateway unreachable: {0}")]
    GatewayUnreachable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("trial setup failed: {0}")]
    Trial(String),
}

impl From<ScenarioError> for HarnessError {
    fn from(e: ScenarioError) -> Self {
        HarnessError::ScenarioInvalid(e.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Consistency {
    pub consistent: u64,
    pub trials: u64,
}

impl Consistency {
    pub fn all(&self) -> bool {
        self.consistent == self.trials
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NetworkStats {
    pub transmissions: u64,
    pub dropped: u64,
    pub duplicated: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct RunReport {
    pub messages_sent: u64,
    /// Distinct messages each device processed.
    pub delivered_counts: BTreeMap<String, u64>,
    /// Messages a device processed more than once, counted over the devices'
    /// own processing logs.
    pub duplicate_count: u64,
    /// Expected deliveries that never reached the device.
    pub undelivered: u64,
    pub network: NetworkStats,
    pub txn_outcome_consistency: Consistency,
    pub notifications: u64,
    /// Disagreements between fired notifications and the replay oracle.
    pub notification_diff: u64,
    /// Virtual milliseconds from the first tick to quiescence.
    pub wall_clock_ms: u64,
}

pub fn sim_epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2010, 4, 30, 12, 0, 0).unwrap()
}

pub fn device_id(i: usize) -> String {
    format!("dev-{i:04}")
}

/// In-process participant with a scripted vote. Records every phase-two
/// message it receives.
pub struct SimParticipant {
    id: String,
    behavior: VoteSpec,
    late_by: Duration,
    gateway: Weak<Gateway>,
    observed: Mutex<Vec<bool>>,
}

impl SimParticipant {
    pub fn new(id: String, behavior: VoteSpec, late_by: Duration, gateway: Weak<Gateway>) -> SimParticipant {
        SimParticipant { id, behavior, late_by, gateway, observed: Mutex::new(Vec::new()) }
    }

    /// Phase-two messages seen so far, `true` for commit.
    pub fn observed(&self) -> Vec<bool> {
        self.observed.lock().clone()
    }
}

impl Participant for SimParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn prepare(&self, txn: &TxnId) -> Option<Vote> {
        match self.behavior {
            VoteSpec::Yes => Some(Vote::Yes),
            VoteSpec::No => Some(Vote::No),
            VoteSpec::Timeout => None,
            VoteSpec::Late => {
                thread::sleep(self.late_by);
                Some(Vote::Yes)
            }
            VoteSpec::AbortDuringPrepare => {
                if let Some(gw) = self.gateway.upgrade() {
                    let _ = gw.abort_txn(txn);
                }
                Some(Vote::Yes)
            }
        }
    }

    fn commit(&self, _txn: &TxnId) {
        self.observed.lock().push(true);
    }

    fn rollback(&self, _txn: &TxnId) {
        self.observed.lock().push(false);
    }
}

struct TxnTrial {
    txn: TxnId,
    committed: bool,
    expect_commit: bool,
    participants: Vec<Arc<SimParticipant>>,
    message: Option<Uuid>,
}

struct Watched {
    sub: Uuid,
    device: String,
    oracle: Watcher,
    expected: Vec<Cause>,
}

struct Sim<'a> {
    s: &'a Scenario,
    gw: Arc<Gateway>,
    clock: Arc<ManualClock>,
    rng: ChaCha8Rng,
    devices: Vec<String>,
    fleet: Option<Uuid>,
    processed: BTreeMap<String, Vec<Uuid>>,
    in_flight: BTreeMap<u64, Vec<Transmission>>,
    watched: Vec<Watched>,
    trials: Vec<TxnTrial>,
    report: RunReport,
    expected_deliveries: u64,
}

pub fn run_scenario(s: &Scenario) -> Result<RunReport, HarnessError> {
    s.validate()?;
    let clock = Arc::new(ManualClock::new(sim_epoch()));
    let config = GatewayConfig {
        prepare_timeout_ms: s.prepare_timeout_ms,
        heartbeat_deadline_ms: s.heartbeat_deadline_ms,
        tick_ms: s.tick_ms,
        ..GatewayConfig::default()
    };
    let rt = Runtime { clock: clock.clone(), ids: Arc::new(SeededIds::new(s.seed)), local_delivery: false };
    let gw = Arc::new(Gateway::in_memory(config, rt));
    let mut sim = Sim {
        s,
        gw,
        clock,
        rng: ChaCha8Rng::seed_from_u64(s.seed),
        devices: (0..s.device_count).map(device_id).collect(),
        fleet: None,
        processed: BTreeMap::new(),
        in_flight: BTreeMap::new(),
        watched: Vec::new(),
        trials: Vec::new(),
        report: RunReport::default(),
        expected_deliveries: 0,
    };
    sim.setup()?;
    sim.run()?;
    Ok(sim.finish())
}

impl Sim<'_> {
    fn setup(&mut self) -> Result<(), HarnessError> {
        let s = self.s;
        for spec in &s.subscriptions {
            let device = self.devices[spec.device].clone();
            let (predicate, oracle) = match &spec.watch {
                Watch::Band { triple, low, high } => (
                    Predicate::Band { triple_name: triple.clone(), low: *low, high: *high },
                    Watcher::band(triple, *low, *high),
                ),
                Watch::Circle { lat, lon, radius_m } => (
                    Predicate::Geofence {
                        area_id: format!("circle-{device}"),
                        shape: Shape::Circle { center: LatLon { lat: *lat, lon: *lon }, radius_m: *radius_m },
                    },
                    Watcher::area(Area::Circle { center: (*lat, *lon), radius_m: *radius_m }),
                ),
                Watch::Polygon { vertices } => (
                    Predicate::Geofence {
                        area_id: format!("polygon-{device}"),
                        shape: Shape::Polygon {
                            vertices: vertices.iter().map(|[lat, lon]| LatLon { lat: *lat, lon: *lon }).collect(),
                        },
                    },
                    Watcher::area(Area::Polygon(vertices.iter().map(|[a, b]| (*a, *b)).collect())),
                ),
                Watch::Group { attributes } => {
                    let triples = attributes
                        .iter()
                        .map(|(k, v)| Triple::string(k, v))
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| HarnessError::ScenarioInvalid(e.to_string()))?;
                    let group_id = self.gw.create_group(triples, BTreeSet::new())?;
                    (Predicate::GroupChange { group_id }, Watcher::group(attributes.clone(), false))
                }
                Watch::Presence => (
                    Predicate::Presence { object_id: device.clone() },
                    Watcher::presence(self.s.heartbeat_deadline_ms),
                ),
            };
            let sub_id = self.uuid();
            let sub = self.gw.subscribe(Subscription {
                sub_id,
                subscriber: "local:sim".into(),
                registrar: device.clone(),
                target: device.clone(),
                predicate,
            })?;
            self.watched.push(Watched { sub, device, oracle, expected: Vec::new() });
        }
        for d in self.devices.clone() {
            self.gw.register_object(&d, None, None)?;
            self.happen(&d, &Happening::Registered { at_ms: 0 });
            self.processed.insert(d, Vec::new());
        }
        if !self.devices.is_empty() {
            self.fleet = Some(self.gw.create_group(Vec::new(), self.devices.iter().cloned().collect())?);
        }
        Ok(())
    }

    fn uuid(&mut self) -> Uuid {
        uuid::Builder::from_random_bytes(self.rng.gen()).into_uuid()
    }

    fn happen(&mut self, device: &str, h: &Happening) {
        for w in self.watched.iter_mut().filter(|w| w.device == device) {
            if let Some(c) = w.oracle.observe(h) {
                w.expected.push(c);
            }
        }
    }

    fn run(&mut self) -> Result<(), HarnessError> {
        let tick = self.s.tick_ms;
        let mut order: Vec<usize> = (0..self.s.steps.len()).collect();
        order.sort_by_key(|i| (self.s.steps[*i].at_ms, *i));
        let last_step = order.last().map_or(0, |i| self.s.steps[*i].at_ms);
        let horizon = last_step + 600_000;
        let mut next = 0;
        let mut now = 0u64;
        loop {
            self.clock.set(sim_epoch() + chrono::Duration::milliseconds(now as i64));
            while next < order.len() && self.s.steps[order[next]].at_ms <= now {
                self.apply(order[next], now)?;
                next += 1;
            }
            self.gw.tick()?;
            let devices = self.devices.clone();
            for d in &devices {
                self.happen(d, &Happening::Tick { at_ms: now });
            }
            self.carry(now)?;
            let idle = next == order.len()
                && self.in_flight.is_empty()
                && self.gw.broker().next_deadline().is_none();
            if idle || now >= horizon {
                break;
            }
            now += tick;
        }
        self.report.wall_clock_ms = now;
        Ok(())
    }

    fn element(&mut self, device: &str, triples: Vec<Triple>) -> Result<(), HarnessError> {
        let id = self.uuid();
        let d = DataElement::with_id(id, triples, Vec::new())
            .and_then(|d| ContextElement::new(d, device, "Sensor"))
            .map_err(|e| HarnessError::ScenarioInvalid(e.to_string()))?;
        self.gw.append_element(d)?;
        Ok(())
    }

    fn apply(&mut self, index: usize, now: u64) -> Result<(), HarnessError> {
        let bad = |e: openm2m::model::ModelError| HarnessError::ScenarioInvalid(format!("step {index}: {e}"));
        let s = self.s;
        match &s.steps[index].action {
            Action::Reading { device, triples } => {
                let d = self.devices[*device].clone();
                let mut ts = Vec::new();
                for (k, v) in triples {
                    ts.push(match v {
                        serde_json::Value::Bool(b) => Triple::boolean(k, *b),
                        serde_json::Value::String(s) => Triple::string(k, s),
                        other => Triple::number(k, other.as_f64().unwrap_or(f64::NAN)),
                    }
                    .map_err(bad)?);
                }
                self.element(&d, ts)?;
                self.happen(&d, &Happening::Element(triples.clone()));
            }
            Action::Move { device, lat, lon } => {
                let d = self.devices[*device].clone();
                self.element(&d, vec![Triple::number("lat", *lat).map_err(bad)?, Triple::number("lon", *lon).map_err(bad)?])?;
                let pos = [("lat".to_owned(), (*lat).into()), ("lon".to_owned(), (*lon).into())];
                self.happen(&d, &Happening::Element(pos.into_iter().collect()));
            }
            Action::Heartbeat { device } => {
                let d = self.devices[*device].clone();
                self.gw.presence_update(&d, PresenceStatus::Online, None)?;
                self.happen(&d, &Happening::Heartbeat { at_ms: now });
            }
            Action::Offline { device } => {
                let d = self.devices[*device].clone();
                self.gw.presence_update(&d, PresenceStatus::Offline, None)?;
                self.happen(&d, &Happening::Offline);
            }
            Action::Send { from, to, mode, class } => {
                let fleet = self.fleet.expect("devices exist");
                let (target, expected) = match mode {
                    SendMode::Single => (Target::Single { target: self.devices[to.expect("validated")].clone() }, 1),
                    SendMode::Group => (Target::Group { target: fleet }, self.devices.len() as u64),
                    SendMode::Any => (Target::Any { target: fleet }, 1),
                };
                let msg_id = self.uuid();
                let payload = DataElement::with_id(self.uuid(), vec![Triple::number("step", index as f64).map_err(bad)?], Vec::new())
                    .map_err(bad)?;
                self.gw.send_message(Message {
                    msg_id,
                    sender: self.devices[*from].clone(),
                    target,
                    payload,
                    delivery_class: match class {
                        SendClass::Unconfirmed => DeliveryClass::Unconfirmed,
                        SendClass::Confirmed => DeliveryClass::Confirmed,
                    },
                    txn_id: None,
                })?;
                self.report.messages_sent += 1;
                self.expected_deliveries += expected;
            }
            Action::Transaction { votes, message } => self.transaction(index, votes, *message)?,
        }
        Ok(())
    }

    fn transaction(&mut self, index: usize, votes: &[VoteSpec], message: bool) -> Result<(), HarnessError> {
        let timeout = Duration::from_millis(self.s.prepare_timeout_ms);
        let votes: Vec<VoteSpec> = votes
            .iter()
            .enumerate()
            .map(|(p, v)| {
                self.s
                    .faults
                    .participant_failures
                    .iter()
                    .find(|f| f.step == index && f.participant == p)
                    .map_or(*v, |f| f.behavior)
            })
            .collect();
        let txn = self.gw.begin_txn()?;
        let participants: Vec<Arc<SimParticipant>> = votes
            .iter()
            .enumerate()
            .map(|(p, v)| {
                Arc::new(SimParticipant::new(
                    format!("sim:step{index}:p{p}"),
                    *v,
                    timeout * 3,
                    Arc::downgrade(&self.gw),
                ))
            })
            .collect();
        for p in &participants {
            self.gw.enlist(&txn, p.clone())?;
        }
        let msg = if message {
            let msg_id = self.uuid();
            let payload = DataElement::with_id(self.uuid(), vec![Triple::number("step", index as f64).expect("finite")], Vec::new())
                .expect("valid payload");
            self.gw.send_message(Message {
                msg_id,
                sender: self.devices[0].clone(),
                target: Target::Single { target: self.devices[1].clone() },
                payload,
                delivery_class: DeliveryClass::Transactional,
                txn_id: Some(txn.clone()),
            })?;
            self.report.messages_sent += 1;
            Some(msg_id)
        } else {
            None
        };
        let committed = self.gw.commit_txn(&txn, Some(timeout))?.is_committed();
        if committed && message {
            self.expected_deliveries += 1;
        }
        self.trials.push(TxnTrial {
            txn,
            committed,
            expect_commit: votes.iter().all(|v| *v == VoteSpec::Yes),
            participants,
            message: msg,
        });
        Ok(())
    }

    /// Moves queued transmissions onto the network and hands over whatever
    /// arrives this tick.
    fn carry(&mut self, now: u64) -> Result<(), HarnessError> {
        let tick = self.s.tick_ms;
        for t in self.gw.broker().drain_outbox() {
            self.report.network.transmissions += 1;
            if self.rng.gen_bool(self.s.faults.drop_rate) {
                self.report.network.dropped += 1;
                continue;
            }
            let copies = if self.rng.gen_bool(self.s.faults.duplication_rate) {
                self.report.network.duplicated += 1;
                2
            } else {
                1
            };
            for _ in 0..copies {
                let delay = self.rng.gen_range(0..=self.s.max_delay_ticks);
                self.in_flight.entry(now + delay * tick).or_default().push(t.clone());
            }
        }
        let Some(arrivals) = self.in_flight.remove(&now) else { return Ok(()) };
        let mut woken = BTreeSet::new();
        for t in arrivals {
            if self.gw.deliver(&t)? == Receipt::Accepted {
                woken.insert(t.recipient.clone());
            }
        }
        for d in woken {
            for m in self.gw.pending(&d)? {
                self.processed.get_mut(&d).expect("known device").push(m.msg_id);
                self.gw.ack(&d, m.msg_id)?;
            }
        }
        Ok(())
    }

    fn finish(mut self) -> RunReport {
        let pairs = self
            .processed
            .iter()
            .flat_map(|(d, ms)| ms.iter().map(move |m| (d.clone(), *m)));
        self.report.duplicate_count = oracle::duplicate_count(pairs);
        let mut total = 0;
        for (d, ms) in &self.processed {
            let n = ms.iter().collect::<BTreeSet<_>>().len() as u64;
            total += n;
            self.report.delivered_counts.insert(d.clone(), n);
        }
        self.report.undelivered = self.expected_deliveries.saturating_sub(total);

        let receiver = self.devices.get(1).cloned().unwrap_or_default();
        let got: BTreeSet<Uuid> = self.processed.get(&receiver).into_iter().flatten().copied().collect();
        let mut c = Consistency::default();
        for t in &self.trials {
            c.trials += 1;
            let recorded = self.gw.txns().state(&t.txn);
            let want = if t.committed { TxnState::Committed } else { TxnState::Aborted };
            let ok = t.committed == t.expect_commit
                && recorded == Some(want)
                && t.participants.iter().all(|p| {
                    let seen = p.observed();
                    !seen.is_empty() && seen.iter().all(|c| *c == t.committed)
                })
                && t.message.is_none_or(|m| got.contains(&m) == t.committed);
            if ok {
                c.consistent += 1;
            }
        }
        self.report.txn_outcome_consistency = c;

        let fired = self.gw.notifications();
        for w in &self.watched {
            let got: Vec<Cause> = fired.iter().filter(|n| n.sub_id == w.sub).map(|n| n.cause).collect();
            self.report.notifications += got.len() as u64;
            self.report.notification_diff += oracle::sequence_diff(&got, &w.expected);
        }
        self.report
    }
}
