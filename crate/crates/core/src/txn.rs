//! Two-phase commit coordinator keyed by Open API transaction ids.
//!
//! Every state change is written to the event log before it takes effect, and
//! the decision is durable before any participant hears phase two. On restart
//! [`TxnCoordinator::restore`] rebuilds the records and
//! [`TxnCoordinator::recover`] completes them: undecided transactions are
//! aborted (presumed abort), decided but unfinished ones are re-driven.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::admin::AdminRecord;
use crate::store::{EventLog, EventStore, StoreError};

pub const DEFAULT_PREPARE_TIMEOUT: Duration = Duration::from_secs(2);

/// 32 uppercase hex digits, e.g. `AEDF7D2C67BB4C7DB7615856868057C3`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TxnId(String);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("transaction id must be 32 uppercase hex digits, got `{0}`")]
pub struct TxnIdError(pub String);

impl TxnId {
    pub fn from_bytes(bytes: [u8; 16]) -> TxnId {
        TxnId(hex::encode_upper(bytes))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl FromStr for TxnId {
    type Err = TxnIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() == 32 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'A'..=b'F')) {
            Ok(TxnId(s.to_owned()))
        } else {
            Err(TxnIdError(s.to_owned()))
        }
    }
}

impl TryFrom<String> for TxnId {
    type Error = TxnIdError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TxnId> for String {
    fn from(t: TxnId) -> String {
        t.0
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxnId({})", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Yes,
    No,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxnState {
    Open,
    Preparing,
    Committed,
    Aborted,
}

impl TxnState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TxnState::Committed | TxnState::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum Outcome {
    Committed,
    Aborted { reason: String },
}

impl Outcome {
    pub fn is_committed(&self) -> bool {
        matches!(self, Outcome::Committed)
    }
}

/// A resource manager taking part in two-phase commit.
///
/// `prepare` returns `None` when no vote could be obtained; the coordinator
/// records that as a timeout. `commit` and `rollback` must be idempotent,
/// since recovery may repeat them.
pub trait Participant: Send + Sync {
    fn id(&self) -> &str;
    fn prepare(&self, txn: &TxnId) -> Option<Vote>;
    fn commit(&self, txn: &TxnId);
    fn rollback(&self, txn: &TxnId);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TransactionRecord {
    pub txn_id: TxnId,
    pub participants: Vec<String>,
    pub state: TxnState,
    pub decisions: BTreeMap<String, Decision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum TxnError {
    #[error("unknown transaction {0}")]
    UnknownTxn(TxnId),
    #[error("transaction {0} is {1:?}")]
    TxnClosed(TxnId, TxnState),
    #[error("transaction {0} already committed")]
    AlreadyCommitted(TxnId),
    #[error("transaction {0} already exists")]
    DuplicateTxn(TxnId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

struct Entry {
    record: TransactionRecord,
    handles: Vec<Arc<dyn Participant>>,
    completed: bool,
}

/// What [`TxnCoordinator::recover`] did to one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovered {
    pub txn_id: TxnId,
    pub state: TxnState,
    /// Participants that could not be resolved and were not notified.
    pub unreachable: Vec<String>,
}

pub struct TxnCoordinator {
    store: Arc<EventStore>,
    txns: RwLock<HashMap<TxnId, Arc<Mutex<Entry>>>>,
}

impl TxnCoordinator {
    pub fn new(store: Arc<EventStore>) -> TxnCoordinator {
        TxnCoordinator { store, txns: RwLock::new(HashMap::new()) }
    }

    /// Rebuilds transaction records from the administrative log. Participant
    /// handles are not persisted; [`recover`](Self::recover) resolves them.
    pub fn restore(store: Arc<EventStore>, log: &EventLog) -> TxnCoordinator {
        let mut txns: HashMap<TxnId, Entry> = HashMap::new();
        for ev in &log.entries {
            let Some(rec) = ev.admin() else { continue };
            match rec {
                AdminRecord::TxnBegun { txn_id } => {
                    txns.insert(
                        txn_id.clone(),
                        Entry {
                            record: TransactionRecord {
                                txn_id: txn_id.clone(),
                                participants: Vec::new(),
                                state: TxnState::Open,
                                decisions: BTreeMap::new(),
                                reason: None,
                            },
                            handles: Vec::new(),
                            completed: false,
                        },
                    );
                }
                AdminRecord::TxnEnlisted { txn_id, participant } => {
                    if let Some(e) = txns.get_mut(txn_id) {
                        if !e.record.participants.contains(participant) {
                            e.record.participants.push(participant.clone());
                        }
                    }
                }
                AdminRecord::TxnPreparing { txn_id } => {
                    if let Some(e) = txns.get_mut(txn_id) {
                        e.record.state = TxnState::Preparing;
                    }
                }
                AdminRecord::TxnDecided { txn_id, state, decisions, reason } => {
                    if let Some(e) = txns.get_mut(txn_id) {
                        e.record.state = *state;
                        e.record.decisions = decisions.clone();
                        e.record.reason = reason.clone();
                    }
                }
                AdminRecord::TxnCompleted { txn_id } => {
                    if let Some(e) = txns.get_mut(txn_id) {
                        e.completed = true;
                    }
                }
                _ => {}
            }
        }
        TxnCoordinator {
            store,
            txns: RwLock::new(
                txns.into_iter()
                    .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
                    .collect(),
            ),
        }
    }

    /// Completes every transaction left unfinished by a crash.
    pub fn recover(
        &self,
        resolve: &dyn Fn(&str) -> Option<Arc<dyn Participant>>,
    ) -> Result<Vec<Recovered>, TxnError> {
        let mut entries: Vec<_> = self.txns.read().values().cloned().collect();
        entries.sort_by_key(|e| e.lock().record.txn_id.clone());
        let mut out = Vec::new();
        for entry in entries {
            let mut e = entry.lock();
            if e.completed {
                continue;
            }
            let mut unreachable = Vec::new();
            let mut handles = Vec::new();
            for p in &e.record.participants {
                match resolve(p) {
                    Some(h) => handles.push(h),
                    None => unreachable.push(p.clone()),
                }
            }
            e.handles = handles;
            if !e.record.state.is_terminal() {
                let reason = "presumed abort after coordinator restart".to_owned();
                self.store.append_admin(AdminRecord::TxnDecided {
                    txn_id: e.record.txn_id.clone(),
                    state: TxnState::Aborted,
                    decisions: e.record.decisions.clone(),
                    reason: Some(reason.clone()),
                })?;
                e.record.state = TxnState::Aborted;
                e.record.reason = Some(reason);
            }
            let commit = e.record.state == TxnState::Committed;
            phase_two(&e.record.txn_id, &e.handles, commit);
            self.store.append_admin(AdminRecord::TxnCompleted { txn_id: e.record.txn_id.clone() })?;
            e.completed = true;
            out.push(Recovered {
                txn_id: e.record.txn_id.clone(),
                state: e.record.state,
                unreachable,
            });
        }
        Ok(out)
    }

    fn entry(&self, id: &TxnId) -> Result<Arc<Mutex<Entry>>, TxnError> {
        self.txns
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| TxnError::UnknownTxn(id.clone()))
    }

    pub fn begin(&self) -> Result<TxnId, TxnError> {
        let mut txns = self.txns.write();
        let id = loop {
            let id = self.store.ids().txn_id();
            if !txns.contains_key(&id) {
                break id;
            }
        };
        self.insert_open(&mut txns, id)
    }

    /// Begins a transaction under an id chosen by the client.
    pub fn begin_with_id(&self, id: TxnId) -> Result<TxnId, TxnError> {
        let mut txns = self.txns.write();
        if txns.contains_key(&id) {
            return Err(TxnError::DuplicateTxn(id));
        }
        self.insert_open(&mut txns, id)
    }

    fn insert_open(&self, txns: &mut HashMap<TxnId, Arc<Mutex<Entry>>>, id: TxnId) -> Result<TxnId, TxnError> {
        self.store.append_admin(AdminRecord::TxnBegun { txn_id: id.clone() })?;
        txns.insert(
            id.clone(),
            Arc::new(Mutex::new(Entry {
                record: TransactionRecord {
                    txn_id: id.clone(),
                    participants: Vec::new(),
                    state: TxnState::Open,
                    decisions: BTreeMap::new(),
                    reason: None,
                },
                handles: Vec::new(),
                completed: false,
            })),
        );
        Ok(id)
    }

    /// Adds a participant. Enlisting the same id twice keeps one entry.
    pub fn enlist(&self, id: &TxnId, participant: Arc<dyn Participant>) -> Result<(), TxnError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock();
        if e.record.state != TxnState::Open {
            return Err(TxnError::TxnClosed(id.clone(), e.record.state));
        }
        let pid = participant.id().to_owned();
        if e.record.participants.contains(&pid) {
            return Ok(());
        }
        self.store.append_admin(AdminRecord::TxnEnlisted {
            txn_id: id.clone(),
            participant: pid.clone(),
        })?;
        e.record.participants.push(pid);
        e.handles.push(participant);
        Ok(())
    }

    pub fn commit(&self, id: &TxnId, prepare_timeout: Duration) -> Result<Outcome, TxnError> {
        let entry = self.entry(id)?;
        let handles = {
            let mut e = entry.lock();
            if e.record.state != TxnState::Open {
                return Err(TxnError::TxnClosed(id.clone(), e.record.state));
            }
            self.store.append_admin(AdminRecord::TxnPreparing { txn_id: id.clone() })?;
            e.record.state = TxnState::Preparing;
            e.handles.clone()
        };

        let decisions = prepare_all(id, &handles, prepare_timeout);

        let mut e = entry.lock();
        if e.record.state != TxnState::Preparing {
            // aborted while votes were being collected
            return Ok(Outcome::Aborted {
                reason: e.record.reason.clone().unwrap_or_else(|| "aborted".into()),
            });
        }
        let refusal = decisions.iter().find(|(_, d)| **d != Decision::Yes);
        let (state, reason) = match refusal {
            None => (TxnState::Committed, None),
            Some((p, Decision::No)) => (TxnState::Aborted, Some(format!("participant {p} voted no"))),
            Some((p, _)) => (TxnState::Aborted, Some(format!("participant {p} did not vote in time"))),
        };
        self.store.append_admin(AdminRecord::TxnDecided {
            txn_id: id.clone(),
            state,
            decisions: decisions.clone(),
            reason: reason.clone(),
        })?;
        e.record.state = state;
        e.record.decisions = decisions;
        e.record.reason = reason.clone();

        phase_two(id, &e.handles, state == TxnState::Committed);
        self.store.append_admin(AdminRecord::TxnCompleted { txn_id: id.clone() })?;
        e.completed = true;
        Ok(match reason {
            None => Outcome::Committed,
            Some(reason) => Outcome::Aborted { reason },
        })
    }

    pub fn abort(&self, id: &TxnId) -> Result<(), TxnError> {
        let entry = self.entry(id)?;
        let mut e = entry.lock();
        match e.record.state {
            TxnState::Committed => return Err(TxnError::AlreadyCommitted(id.clone())),
            TxnState::Aborted => return Ok(()),
            TxnState::Open | TxnState::Preparing => {}
        }
        let reason = "aborted by request".to_owned();
        self.store.append_admin(AdminRecord::TxnDecided {
            txn_id: id.clone(),
            state: TxnState::Aborted,
            decisions: e.record.decisions.clone(),
            reason: Some(reason.clone()),
        })?;
        e.record.state = TxnState::Aborted;
        e.record.reason = Some(reason);
        phase_two(id, &e.handles, false);
        self.store.append_admin(AdminRecord::TxnCompleted { txn_id: id.clone() })?;
        e.completed = true;
        Ok(())
    }

    pub fn record(&self, id: &TxnId) -> Option<TransactionRecord> {
        self.txns.read().get(id).map(|e| e.lock().record.clone())
    }

    pub fn state(&self, id: &TxnId) -> Option<TxnState> {
        self.txns.read().get(id).map(|e| e.lock().record.state)
    }

    /// All records, ordered by id.
    pub fn records(&self) -> Vec<TransactionRecord> {
        let mut v: Vec<_> = self
            .txns
            .read()
            .values()
            .map(|e| e.lock().record.clone())
            .collect();
        v.sort_by(|a, b| a.txn_id.cmp(&b.txn_id));
        v
    }
}

/// Phase one. Votes arriving at or after the deadline count as timeouts.
fn prepare_all(
    id: &TxnId,
    handles: &[Arc<dyn Participant>],
    timeout: Duration,
) -> BTreeMap<String, Decision> {
    let mut decisions: BTreeMap<String, Decision> = handles
        .iter()
        .map(|h| (h.id().to_owned(), Decision::Timeout))
        .collect();
    if handles.is_empty() {
        return decisions;
    }
    let deadline = Instant::now() + timeout;
    let (tx, rx) = mpsc::channel();
    for h in handles {
        let h = Arc::clone(h);
        let tx = tx.clone();
        let id = id.clone();
        thread::spawn(move || {
            let vote = h.prepare(&id);
            let _ = tx.send((h.id().to_owned(), vote, Instant::now()));
        });
    }
    drop(tx);
    let mut outstanding = handles.len();
    while outstanding > 0 {
        let now = Instant::now();
        if now >= deadline {
            break;
        }
        match rx.recv_timeout(deadline - now) {
            Ok((pid, vote, at)) => {
                outstanding -= 1;
                if at < deadline {
                    let d = match vote {
                        Some(Vote::Yes) => Decision::Yes,
                        Some(Vote::No) => Decision::No,
                        None => Decision::Timeout,
                    };
                    decisions.insert(pid, d);
                }
            }
            Err(_) => break,
        }
    }
    decisions
}

fn phase_two(id: &TxnId, handles: &[Arc<dyn Participant>], commit: bool) {
    for h in handles {
        if commit {
            h.commit(id);
        } else {
            h.rollback(id);
        }
    }
}

/// A participant reached over HTTP. Each phase is a JSON POST of
/// `{"txnId":…,"phase":…}`; prepare expects `{"vote":"yes"|"no"}` back.
pub struct HttpParticipant {
    url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct VoteReply {
    vote: Vote,
}

impl HttpParticipant {
    pub fn new(url: impl Into<String>, timeout: Duration) -> HttpParticipant {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpParticipant { url: url.into(), agent }
    }

    fn post(&self, txn: &TxnId, phase: &str) -> Result<ureq::http::Response<ureq::Body>, ureq::Error> {
        self.agent
            .post(&self.url)
            .send_json(serde_json::json!({ "txnId": txn.as_str(), "phase": phase }))
    }
}

impl Participant for HttpParticipant {
    fn id(&self) -> &str {
        &self.url
    }

    fn prepare(&self, txn: &TxnId) -> Option<Vote> {
        match self.post(txn, "prepare") {
            Ok(mut resp) => match resp.body_mut().read_json::<VoteReply>() {
                Ok(r) => Some(r.vote),
                Err(e) => {
                    tracing::warn!(url = %self.url, txn = %txn, "unreadable vote: {e}");
                    None
                }
            },
            Err(e) => {
                tracing::warn!(url = %self.url, txn = %txn, "prepare failed: {e}");
                None
            }
        }
    }

    fn commit(&self, txn: &TxnId) {
        if let Err(e) = self.post(txn, "commit") {
            tracing::warn!(url = %self.url, txn = %txn, "commit notification failed: {e}");
        }
    }

    fn rollback(&self, txn: &TxnId) {
        if let Err(e) = self.post(txn, "rollback") {
            tracing::warn!(url = %self.url, txn = %txn, "rollback notification failed: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{ManualClock, SeededIds};
    use chrono::{DateTime, Utc};
    use std::collections::HashSet;

    #[derive(Default)]
    struct Probe {
        id: String,
        vote: Option<Vote>,
        delay: Duration,
        seen: Mutex<Vec<&'static str>>,
    }

    impl Probe {
        fn new(id: &str, vote: Option<Vote>) -> Arc<Probe> {
            Arc::new(Probe { id: id.into(), vote, ..Probe::default() })
        }
        fn phases(&self) -> Vec<&'static str> {
            self.seen.lock().clone()
        }
    }

    impl Participant for Probe {
        fn id(&self) -> &str {
            &self.id
        }
        fn prepare(&self, _: &TxnId) -> Option<Vote> {
            self.seen.lock().push("prepare");
            thread::sleep(self.delay);
            self.vote
        }
        fn commit(&self, _: &TxnId) {
            self.seen.lock().push("commit");
        }
        fn rollback(&self, _: &TxnId) {
            self.seen.lock().push("rollback");
        }
    }

    fn coordinator() -> TxnCoordinator {
        TxnCoordinator::new(Arc::new(EventStore::in_memory(
            Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH)),
            Arc::new(SeededIds::new(9)),
        )))
    }

    #[test]
    fn txn_id_format() {
        let id: TxnId = "AEDF7D2C67BB4C7DB7615856868057C3".parse().unwrap();
        assert_eq!(id.as_str(), "AEDF7D2C67BB4C7DB7615856868057C3");
        for bad in ["", "AEDF7D2C67BB4C7DB7615856868057C", "aedf7d2c67bb4c7db7615856868057c3", "AEDF7D2C67BB4C7DB7615856868057CG"] {
            assert!(bad.parse::<TxnId>().is_err(), "{bad}");
        }
        let t = TxnId::from_bytes([0xab; 16]);
        assert_eq!(t.as_str(), "ABABABABABABABABABABABABABABABAB");
    }

    #[test]
    fn begin_ids_are_fresh() {
        let c = coordinator();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            let id = c.begin().unwrap();
            assert!(id.as_str().parse::<TxnId>().is_ok());
            assert!(seen.insert(id));
        }
    }

    #[test]
    fn empty_transaction_commits() {
        let c = coordinator();
        let id = c.begin().unwrap();
        assert_eq!(c.commit(&id, Duration::from_millis(50)).unwrap(), Outcome::Committed);
        assert_eq!(c.state(&id), Some(TxnState::Committed));
        assert!(matches!(c.commit(&id, Duration::ZERO), Err(TxnError::TxnClosed(..))));
    }

    #[test]
    fn one_no_aborts_everyone() {
        let c = coordinator();
        let id = c.begin().unwrap();
        let ps = [Probe::new("a", Some(Vote::Yes)), Probe::new("b", Some(Vote::No)), Probe::new("c", Some(Vote::Yes))];
        for p in &ps {
            c.enlist(&id, p.clone()).unwrap();
        }
        let out = c.commit(&id, Duration::from_secs(1)).unwrap();
        assert!(matches!(out, Outcome::Aborted { .. }));
        for p in &ps {
            assert_eq!(p.phases(), ["prepare", "rollback"]);
        }
        let rec = c.record(&id).unwrap();
        assert_eq!(rec.decisions["b"], Decision::No);
    }

    #[test]
    fn enlist_is_idempotent_and_closed_after_commit() {
        let c = coordinator();
        let id = c.begin().unwrap();
        let p = Probe::new("a", Some(Vote::Yes));
        c.enlist(&id, p.clone()).unwrap();
        c.enlist(&id, p.clone()).unwrap();
        assert_eq!(c.record(&id).unwrap().participants, ["a"]);
        assert!(c.commit(&id, Duration::from_secs(1)).unwrap().is_committed());
        assert_eq!(p.phases(), ["prepare", "commit"]);
        assert!(matches!(c.enlist(&id, p), Err(TxnError::TxnClosed(_, TxnState::Committed))));
        let unknown = TxnId::from_bytes([0; 16]);
        assert!(matches!(c.enlist(&unknown, Probe::new("x", None)), Err(TxnError::UnknownTxn(_))));
    }

    #[test]
    fn slow_vote_is_a_timeout() {
        let c = coordinator();
        let id = c.begin().unwrap();
        let slow = Arc::new(Probe {
            id: "slow".into(),
            vote: Some(Vote::Yes),
            delay: Duration::from_millis(200),
            ..Probe::default()
        });
        c.enlist(&id, slow.clone()).unwrap();
        c.enlist(&id, Probe::new("fast", Some(Vote::Yes))).unwrap();
        let out = c.commit(&id, Duration::from_millis(20)).unwrap();
        assert!(matches!(out, Outcome::Aborted { .. }));
        assert_eq!(c.record(&id).unwrap().decisions["slow"], Decision::Timeout);
        assert_eq!(slow.phases().last(), Some(&"rollback"));
    }

    #[test]
    fn abort_paths() {
        let c = coordinator();
        let id = c.begin().unwrap();
        c.abort(&id).unwrap();
        assert_eq!(c.state(&id), Some(TxnState::Aborted));
        let id = c.begin().unwrap();
        c.commit(&id, Duration::ZERO).unwrap();
        assert!(matches!(c.abort(&id), Err(TxnError::AlreadyCommitted(_))));
    }

    #[test]
    fn abort_during_prepare_wins() {
        let c = Arc::new(coordinator());
        let id = c.begin().unwrap();
        let slow = Arc::new(Probe {
            id: "slow".into(),
            vote: Some(Vote::Yes),
            delay: Duration::from_millis(100),
            ..Probe::default()
        });
        c.enlist(&id, slow.clone()).unwrap();
        let committer = {
            let c = c.clone();
            let id = id.clone();
            thread::spawn(move || c.commit(&id, Duration::from_secs(2)).unwrap())
        };
        while c.state(&id) != Some(TxnState::Preparing) {
            thread::yield_now();
        }
        c.abort(&id).unwrap();
        assert!(!committer.join().unwrap().is_committed());
        assert!(!slow.phases().contains(&"commit"));
        assert_eq!(c.state(&id), Some(TxnState::Aborted));
    }

    #[test]
    fn restore_and_presume_abort() {
        let c = coordinator();
        let open = c.begin().unwrap();
        c.enlist(&open, Probe::new("a", Some(Vote::Yes))).unwrap();
        let done = c.begin().unwrap();
        c.commit(&done, Duration::ZERO).unwrap();

        let restored = TxnCoordinator::restore(c.store.clone(), &c.store.log());
        assert_eq!(restored.records(), c.records());
        let a = Probe::new("a", Some(Vote::Yes));
        let resolver = {
            let a = a.clone();
            move |id: &str| (id == "a").then(|| a.clone() as Arc<dyn Participant>)
        };
        let rec = restored.recover(&resolver).unwrap();
        assert_eq!(rec.len(), 1);
        assert_eq!(rec[0].txn_id, open);
        assert_eq!(rec[0].state, TxnState::Aborted);
        assert_eq!(a.phases(), ["rollback"]);
        assert!(restored.recover(&resolver).unwrap().is_empty());
    }
}
