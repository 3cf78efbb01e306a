//! Append-only event log with a key-value index over elements.
//!
//! Every element creation is an event. Events are written to a line-delimited
//! JSON log before they become visible; the in-memory [`Snapshot`] is always
//! the left fold of [`Snapshot::apply`] over the log, so [`replay`] of the
//! persisted log reproduces it exactly. Administrative records (groups,
//! subscriptions, transactions, message bookkeeping, charges) travel through
//! the same log.

mod sink;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

pub use sink::{FileSink, LogSink, MemorySink, NullSink};

use crate::admin::AdminRecord;
use crate::env::{Clock, IdSource};
use crate::model::{element_digest, Element, Number, Triple, Value};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("corrupt log: {0}")]
    CorruptLog(String),
    #[error("filter has no clauses")]
    EmptyFilter,
    #[error("element {0} was stored with a different entity identity")]
    IdentityChanged(Uuid),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Data,
    Context,
    Admin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventBody {
    Element(Element),
    Admin(AdminRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LogLine", into = "LogLine")]
pub struct Event {
    pub seq: u64,
    pub event_id: Uuid,
    pub occurred_at: DateTime<Utc>,
    pub body: EventBody,
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match &self.body {
            EventBody::Element(Element::Data(_)) => EventKind::Data,
            EventBody::Element(Element::Context(_)) => EventKind::Context,
            EventBody::Admin(_) => EventKind::Admin,
        }
    }

    pub fn element(&self) -> Option<&Element> {
        match &self.body {
            EventBody::Element(e) => Some(e),
            EventBody::Admin(_) => None,
        }
    }

    pub fn admin(&self) -> Option<&AdminRecord> {
        match &self.body {
            EventBody::Admin(a) => Some(a),
            EventBody::Element(_) => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

/// On-disk record: `{"seq":…,"eventId":…,"kind":…,"occurredAt":…,"element":{…}}`.
#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct LogLine {
    seq: u64,
    event_id: Uuid,
    kind: EventKind,
    occurred_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    element: Option<Element>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    admin: Option<AdminRecord>,
}

impl From<Event> for LogLine {
    fn from(e: Event) -> Self {
        let kind = e.kind();
        let (element, admin) = match e.body {
            EventBody::Element(el) => (Some(el), None),
            EventBody::Admin(a) => (None, Some(a)),
        };
        LogLine { seq: e.seq, event_id: e.event_id, kind, occurred_at: e.occurred_at, element, admin }
    }
}

impl TryFrom<LogLine> for Event {
    type Error = String;

    fn try_from(l: LogLine) -> Result<Self, Self::Error> {
        let body = match (l.kind, l.element, l.admin) {
            (EventKind::Admin, None, Some(a)) => EventBody::Admin(a),
            (k, Some(e), None) if k != EventKind::Admin => {
                let expected = match e {
                    Element::Data(_) => EventKind::Data,
                    Element::Context(_) => EventKind::Context,
                };
                if k != expected {
                    return Err(format!("seq {}: kind does not match element", l.seq));
                }
                EventBody::Element(e)
            }
            _ => return Err(format!("seq {}: payload does not match kind", l.seq)),
        };
        if l.seq == 0 {
            return Err("sequence numbers start at 1".into());
        }
        Ok(Event { seq: l.seq, event_id: l.event_id, occurred_at: l.occurred_at, body })
    }
}

/// Ordered log contents as read back from storage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub entries: Vec<Event>,
}

impl EventLog {
    /// Parses JSON lines. A final line without its newline is a torn write and
    /// is dropped; any other unparsable line is corruption. Returns the log and
    /// the byte length of the intact prefix.
    pub fn parse_jsonl(bytes: &[u8]) -> Result<(EventLog, usize), StoreError> {
        let mut entries = Vec::new();
        let mut pos = 0;
        let mut intact = 0;
        let mut reader = io::BufReader::new(bytes);
        let mut line = Vec::new();
        loop {
            line.clear();
            let n = reader
                .read_until(b'\n', &mut line)
                .map_err(|e| StoreError::CorruptLog(e.to_string()))?;
            if n == 0 {
                break;
            }
            pos += n;
            let complete = line.ends_with(b"\n");
            let body = line.strip_suffix(b"\n").unwrap_or(&line);
            if body.iter().all(u8::is_ascii_whitespace) {
                if complete {
                    intact = pos;
                }
                continue;
            }
            match serde_json::from_slice::<Event>(body) {
                Ok(ev) if complete => {
                    entries.push(ev);
                    intact = pos;
                }
                Ok(_) | Err(_) if !complete => break,
                Ok(_) => unreachable!(),
                Err(e) => {
                    return Err(StoreError::CorruptLog(format!(
                        "record {}: {e}",
                        entries.len() + 1
                    )))
                }
            }
        }
        Ok((EventLog { entries }, intact))
    }

    pub fn read_file(path: &Path) -> Result<EventLog, StoreError> {
        match fs::read(path) {
            Ok(bytes) => Ok(EventLog::parse_jsonl(&bytes)?.0),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(EventLog::default()),
            Err(e) => Err(StoreError::StorageFailure(e.to_string())),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| e.to_json_line() + "\n")
            .collect()
    }

    /// Sequence numbers must run 1, 2, 3, … without gaps or repeats.
    pub fn validate(&self) -> Result<(), StoreError> {
        for (i, e) in self.entries.iter().enumerate() {
            let expected = i as u64 + 1;
            if e.seq != expected {
                return Err(StoreError::CorruptLog(format!(
                    "expected seq {expected}, found {}",
                    e.seq
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredElement {
    pub seq: u64,
    pub element: Element,
}

/// Latest-wins view of the log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Snapshot {
    elements: BTreeMap<Uuid, StoredElement>,
    by_entity: BTreeMap<(String, String), Vec<Uuid>>,
    latest_by_entity: BTreeMap<String, Uuid>,
    last_seq: u64,
}

impl Snapshot {
    pub fn apply(&mut self, event: &Event) {
        self.last_seq = event.seq;
        let Some(element) = event.element() else {
            return;
        };
        let id = element.element_id();
        if let Some((eid, ety)) = element.entity() {
            let ids = self.by_entity.entry((eid.to_owned(), ety.to_owned())).or_default();
            if !ids.contains(&id) {
                ids.push(id);
            }
            self.latest_by_entity.insert(eid.to_owned(), id);
        }
        self.elements.insert(id, StoredElement { seq: event.seq, element: element.clone() });
    }

    pub fn get(&self, id: Uuid) -> Option<&StoredElement> {
        self.elements.get(&id)
    }

    pub fn elements(&self) -> impl Iterator<Item = &StoredElement> {
        self.elements.values()
    }

    pub fn element_count(&self) -> usize {
        self.elements.len()
    }

    pub fn entities(&self) -> impl Iterator<Item = (&(String, String), &Vec<Uuid>)> {
        self.by_entity.iter()
    }

    pub fn entity_count(&self) -> usize {
        self.by_entity.len()
    }

    /// Most recently appended element for an entity id, whatever its type.
    pub fn latest_for_entity(&self, entity_id: &str) -> Option<&StoredElement> {
        self.latest_by_entity
            .get(entity_id)
            .and_then(|id| self.elements.get(id))
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.latest_by_entity.keys().map(String::as_str)
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("last {}\n", self.last_seq));
        for (id, se) in &self.elements {
            h.update(format!("el {id} {} {}\n", se.seq, element_digest(&se.element)));
        }
        for ((eid, ety), ids) in &self.by_entity {
            h.update(format!("ent {eid:?} {ety:?}"));
            for id in ids {
                h.update(format!(" {id}"));
            }
            h.update("\n");
        }
        for (eid, id) in &self.latest_by_entity {
            h.update(format!("latest {eid:?} {id}\n"));
        }
        hex::encode(h.finalize())
    }
}

/// Rebuilds a snapshot from a log, refusing gaps and duplicate sequence numbers.
pub fn replay(log: &EventLog) -> Result<Snapshot, StoreError> {
    log.validate()?;
    let mut s = Snapshot::default();
    for e in &log.entries {
        s.apply(e);
    }
    Ok(s)
}

/// A scalar compared against triple values in filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterValue {
    Bool(bool),
    Number(f64),
    Text(String),
}

impl FilterValue {
    pub fn matches(&self, triple: &Triple) -> bool {
        match (self, triple.value()) {
            (FilterValue::Bool(b), Value::Boolean(v)) => b == v,
            (FilterValue::Number(n), Value::Number(v)) => Number::new(*n) == Some(*v),
            (FilterValue::Text(s), Value::Number(v)) => s.parse::<Number>().ok() == Some(*v),
            (FilterValue::Text(s), Value::Boolean(v)) => s == &v.to_string(),
            (FilterValue::Text(s), Value::String(v) | Value::Timestamp(v) | Value::Uri(v)) => s == v,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TripleEquals {
    pub name: String,
    pub value: FilterValue,
}

/// Conjunctive element filter. At least one clause is required.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Filter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub triple_equals: Vec<TripleEquals>,
    /// Matches events with a sequence number strictly greater than this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub since_seq: Option<u64>,
}

impl Filter {
    pub fn entity_type(t: impl Into<String>) -> Filter {
        Filter { entity_type: Some(t.into()), ..Filter::default() }
    }

    pub fn triple_equals(name: impl Into<String>, value: FilterValue) -> Filter {
        Filter {
            triple_equals: vec![TripleEquals { name: name.into(), value }],
            ..Filter::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entity_type.is_none() && self.triple_equals.is_empty() && self.since_seq.is_none()
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.is_empty() {
            Err(StoreError::EmptyFilter)
        } else {
            Ok(())
        }
    }

    pub fn matches_element(&self, seq: u64, element: &Element) -> bool {
        if let Some(t) = &self.entity_type {
            if element.entity_type() != Some(t.as_str()) {
                return false;
            }
        }
        if let Some(since) = self.since_seq {
            if seq <= since {
                return false;
            }
        }
        self.triple_equals.iter().all(|c| {
            element
                .triple(&c.name)
                .is_some_and(|t| c.value.matches(t))
        })
    }

    pub fn matches(&self, event: &Event) -> bool {
        event
            .element()
            .is_some_and(|e| self.matches_element(event.seq, e))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "mode", content = "records")]
pub enum SyncPolicy {
    /// fsync after every append.
    #[default]
    EveryAppend,
    /// fsync once per batch of this many appends.
    Batch(u32),
    /// Leave syncing to the OS.
    Never,
}

struct Writer {
    sink: Box<dyn LogSink>,
    next_seq: u64,
    unsynced: u32,
    policy: SyncPolicy,
}

#[derive(Default)]
struct Published {
    events: Vec<Arc<Event>>,
    snapshot: Snapshot,
    by_entity_type: HashMap<String, Vec<u64>>,
}

impl Published {
    fn push(&mut self, ev: Arc<Event>) {
        self.snapshot.apply(&ev);
        if let Some(t) = ev.element().and_then(Element::entity_type) {
            self.by_entity_type.entry(t.to_owned()).or_default().push(ev.seq);
        }
        self.events.push(ev);
    }

    fn event(&self, seq: u64) -> &Arc<Event> {
        &self.events[seq as usize - 1]
    }
}

/// The event store. Appends are serialized internally; reads see the latest
/// published state.
pub struct EventStore {
    writer: Mutex<Writer>,
    published: RwLock<Published>,
    clock: Arc<dyn Clock>,
    ids: Arc<dyn IdSource>,
}

impl EventStore {
    /// Store over an arbitrary sink, resuming after `existing`.
    pub fn with_sink(
        sink: Box<dyn LogSink>,
        existing: EventLog,
        policy: SyncPolicy,
        clock: Arc<dyn Clock>,
        ids: Arc<dyn IdSource>,
    ) -> Result<EventStore, StoreError> {
        existing.validate()?;
        let mut published = Published::default();
        for e in existing.entries {
            published.push(Arc::new(e));
        }
        let next_seq = published.events.len() as u64 + 1;
        Ok(EventStore {
            writer: Mutex::new(Writer { sink, next_seq, unsynced: 0, policy }),
            published: RwLock::new(published),
            clock,
            ids,
        })
    }

    pub fn in_memory(clock: Arc<dyn Clock>, ids: Arc<dyn IdSource>) -> EventStore {
        EventStore::with_sink(
            Box::new(NullSink),
            EventLog::default(),
            SyncPolicy::Never,
            clock,
            ids,
        )
        .expect("empty log is valid")
    }

    /// Opens (or creates) a log file and replays it. A torn final record left
    /// by a crash is cut off before appending resumes.
    pub fn open(
        path: &Path,
        policy: SyncPolicy,
        clock: Arc<dyn Clock>,
        ids: Arc<dyn IdSource>,
    ) -> Result<EventStore, StoreError> {
        let io_err = |e: io::Error| StoreError::StorageFailure(format!("{}: {e}", path.display()));
        let log = match fs::read(path) {
            Ok(bytes) => {
                let (log, intact) = EventLog::parse_jsonl(&bytes)?;
                if intact < bytes.len() {
                    tracing::warn!(
                        path = %path.display(),
                        dropped = bytes.len() - intact,
                        "truncating torn log tail"
                    );
                    let f = fs::OpenOptions::new().write(true).open(path).map_err(io_err)?;
                    f.set_len(intact as u64).map_err(io_err)?;
                }
                log
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => EventLog::default(),
            Err(e) => return Err(io_err(e)),
        };
        let sink = FileSink::open(path).map_err(io_err)?;
        EventStore::with_sink(Box::new(sink), log, policy, clock, ids)
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn ids(&self) -> &Arc<dyn IdSource> {
        &self.ids
    }

    /// Persists then publishes one event; the sequence number is assigned here.
    pub fn append(&self, body: EventBody) -> Result<Arc<Event>, StoreError> {
        let mut w = self.writer.lock();
        if let EventBody::Element(el) = &body {
            let published = self.published.read();
            if let Some(prev) = published.snapshot.get(el.element_id()) {
                if prev.element.entity() != el.entity() {
                    return Err(StoreError::IdentityChanged(el.element_id()));
                }
            }
        }
        let event = Event {
            seq: w.next_seq,
            event_id: self.ids.uuid(),
            occurred_at: self.clock.now(),
            body,
        };
        let line = event.to_json_line();
        let fail = |e: io::Error| StoreError::StorageFailure(e.to_string());
        w.sink.write_record(line.as_bytes()).map_err(fail)?;
        w.unsynced += 1;
        let sync_now = match w.policy {
            SyncPolicy::EveryAppend => true,
            SyncPolicy::Batch(n) => w.unsynced >= n.max(1),
            SyncPolicy::Never => false,
        };
        if sync_now {
            w.sink.sync().map_err(fail)?;
            w.unsynced = 0;
        }
        w.next_seq += 1;
        let event = Arc::new(event);
        self.published.write().push(Arc::clone(&event));
        Ok(event)
    }

    pub fn append_element(&self, element: impl Into<Element>) -> Result<Arc<Event>, StoreError> {
        self.append(EventBody::Element(element.into()))
    }

    pub fn append_admin(&self, record: AdminRecord) -> Result<Arc<Event>, StoreError> {
        self.append(EventBody::Admin(record))
    }

    pub fn sync(&self) -> Result<(), StoreError> {
        let mut w = self.writer.lock();
        w.unsynced = 0;
        w.sink.sync().map_err(|e| StoreError::StorageFailure(e.to_string()))
    }

    pub fn get(&self, id: Uuid) -> Option<Element> {
        self.published
            .read()
            .snapshot
            .get(id)
            .map(|s| s.element.clone())
    }

    /// Element events satisfying every clause, in sequence order.
    pub fn query(&self, filter: &Filter) -> Result<Vec<Arc<Event>>, StoreError> {
        filter.validate()?;
        let p = self.published.read();
        let since = filter.since_seq.unwrap_or(0);
        let out = match &filter.entity_type {
            Some(t) => p
                .by_entity_type
                .get(t)
                .map(|seqs| {
                    let start = seqs.partition_point(|&s| s <= since);
                    seqs[start..]
                        .iter()
                        .map(|&s| p.event(s))
                        .filter(|e| filter.matches(e))
                        .cloned()
                        .collect()
                })
                .unwrap_or_default(),
            None => p
                .events
                .iter()
                .skip(since.min(p.events.len() as u64) as usize)
                .filter(|e| filter.matches(e))
                .cloned()
                .collect(),
        };
        Ok(out)
    }

    /// All events with a sequence number greater than `seq`.
    pub fn events_since(&self, seq: u64) -> Vec<Arc<Event>> {
        let p = self.published.read();
        let start = (seq as usize).min(p.events.len());
        p.events[start..].to_vec()
    }

    pub fn last_seq(&self) -> u64 {
        self.published.read().events.len() as u64
    }

    pub fn with_snapshot<R>(&self, f: impl FnOnce(&Snapshot) -> R) -> R {
        f(&self.published.read().snapshot)
    }

    pub fn snapshot(&self) -> Snapshot {
        self.published.read().snapshot.clone()
    }

    pub fn snapshot_digest(&self) -> String {
        self.published.read().snapshot.digest()
    }

    pub fn log(&self) -> EventLog {
        EventLog {
            entries: self
                .published
                .read()
                .events
                .iter()
                .map(|e| (**e).clone())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::parse_om_observation;
    use crate::env::{ManualClock, RandomIds, SeededIds};
    use crate::model::{promote_to_context, DataElement};

    const OM: &[u8] = include_bytes!("../../tests/fixtures/om_observation.xml");

    fn store() -> EventStore {
        EventStore::in_memory(
            Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH)),
            Arc::new(SeededIds::new(1)),
        )
    }

    fn reading(entity: &str, v: f64) -> Element {
        let d = DataElement::new(vec![Triple::number("value", v).unwrap()], vec![]).unwrap();
        Element::Context(promote_to_context(&d, entity, "Sensor").unwrap())
    }

    #[test]
    fn first_append_is_seq_one() {
        let s = store();
        let e = s
            .append_element(DataElement::new(vec![], vec![]).unwrap())
            .unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.kind(), EventKind::Data);
    }

    #[test]
    fn om_append_is_context_event_and_queryable() {
        let s = store();
        let e = s.append_element(parse_om_observation(OM).unwrap()).unwrap();
        assert_eq!(e.kind(), EventKind::Context);
        s.append_element(reading("other", 1.0)).unwrap();
        let by_type = s.query(&Filter::entity_type("Observation")).unwrap();
        assert_eq!(by_type.len(), 1);
        assert_eq!(by_type[0].seq, e.seq);
        let by_uom = s
            .query(&Filter::triple_equals("uom", FilterValue::Text("Cel".into())))
            .unwrap();
        assert_eq!(by_uom.iter().map(|e| e.seq).collect::<Vec<_>>(), [e.seq]);
        assert!(matches!(s.query(&Filter::default()), Err(StoreError::EmptyFilter)));
    }

    #[test]
    fn filter_value_matching() {
        let t = Triple::number("value", 22.3).unwrap();
        assert!(FilterValue::Number(22.3).matches(&t));
        assert!(FilterValue::Text("22.30".into()).matches(&t));
        assert!(!FilterValue::Number(22.0).matches(&t));
        let b = Triple::boolean("alarm", true).unwrap();
        assert!(FilterValue::Bool(true).matches(&b));
        assert!(FilterValue::Text("true".into()).matches(&b));
        assert!(!FilterValue::Number(1.0).matches(&b));
    }

    #[test]
    fn get_is_latest_version() {
        let s = store();
        assert!(s.get(Uuid::new_v4()).is_none());
        let id = Uuid::new_v4();
        let v1 = DataElement::with_id(id, vec![Triple::number("v", 1.0).unwrap()], vec![]).unwrap();
        let v2 = DataElement::with_id(id, vec![Triple::number("v", 2.0).unwrap()], vec![]).unwrap();
        s.append_element(v1.clone()).unwrap();
        assert_eq!(s.get(id), Some(Element::Data(v1)));
        s.append_element(v2.clone()).unwrap();
        assert_eq!(s.get(id), Some(Element::Data(v2.clone())));
        // replay of the full history agrees
        let snap = replay(&s.log()).unwrap();
        assert_eq!(snap.get(id).unwrap().element, Element::Data(v2));
    }

    #[test]
    fn identity_is_immutable() {
        let s = store();
        let d = DataElement::new(vec![], vec![]).unwrap();
        s.append_element(promote_to_context(&d, "a", "T").unwrap()).unwrap();
        assert!(matches!(
            s.append_element(promote_to_context(&d, "b", "T").unwrap()),
            Err(StoreError::IdentityChanged(_))
        ));
        assert!(matches!(s.append_element(d), Err(StoreError::IdentityChanged(_))));
        assert_eq!(s.last_seq(), 1);
    }

    #[test]
    fn replay_rejects_gaps_and_duplicates() {
        assert_eq!(replay(&EventLog::default()).unwrap(), Snapshot::default());
        let s = store();
        for i in 0..6 {
            s.append_element(reading("x", i as f64)).unwrap();
        }
        let mut log = s.log();
        log.entries[5].seq = 5;
        assert!(matches!(replay(&log), Err(StoreError::CorruptLog(_))));
        let mut log = s.log();
        log.entries.remove(2);
        assert!(matches!(replay(&log), Err(StoreError::CorruptLog(_))));
    }

    #[test]
    fn jsonl_round_trip_and_torn_tail() {
        let s = store();
        s.append_element(parse_om_observation(OM).unwrap()).unwrap();
        s.append_element(reading("x", 1.5)).unwrap();
        let text = s.log().to_jsonl();
        let first: serde_json::Value =
            serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["seq", "eventId", "kind", "occurredAt", "element"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        let (log, intact) = EventLog::parse_jsonl(text.as_bytes()).unwrap();
        assert_eq!(log, s.log());
        assert_eq!(intact, text.len());

        let torn = format!("{text}{{\"seq\":3,\"ev");
        let (log, intact) = EventLog::parse_jsonl(torn.as_bytes()).unwrap();
        assert_eq!(log.entries.len(), 2);
        assert_eq!(intact, text.len());

        let garbage = format!("{text}not json\n");
        assert!(matches!(
            EventLog::parse_jsonl(garbage.as_bytes()),
            Err(StoreError::CorruptLog(_))
        ));
    }

    #[test]
    fn file_store_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH));
        let ids: Arc<dyn IdSource> = Arc::new(RandomIds);
        let digest = {
            let s = EventStore::open(&path, SyncPolicy::EveryAppend, clock.clone(), ids.clone())
                .unwrap();
            s.append_element(parse_om_observation(OM).unwrap()).unwrap();
            s.append_element(reading("x", 3.0)).unwrap();
            s.snapshot_digest()
        };
        // simulate a crash in the middle of the next write
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(b"{\"seq\":3,");
        fs::write(&path, bytes).unwrap();

        let s = EventStore::open(&path, SyncPolicy::EveryAppend, clock, ids).unwrap();
        assert_eq!(s.snapshot_digest(), digest);
        assert_eq!(s.append_element(reading("x", 4.0)).unwrap().seq, 3);
        assert_eq!(EventLog::read_file(&path).unwrap().entries.len(), 3);
    }

    #[test]
    fn failing_sink_does_not_publish() {
        struct Broken;
        impl LogSink for Broken {
            fn write_record(&mut self, _: &[u8]) -> io::Result<()> {
                Err(io::Error::other("disk full"))
            }
            fn sync(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let s = EventStore::with_sink(
            Box::new(Broken),
            EventLog::default(),
            SyncPolicy::EveryAppend,
            Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH)),
            Arc::new(RandomIds),
        )
        .unwrap();
        assert!(matches!(
            s.append_element(reading("x", 1.0)),
            Err(StoreError::StorageFailure(_))
        ));
        assert_eq!(s.last_seq(), 0);
    }
}
