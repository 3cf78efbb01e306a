//! Message delivery without duplication.
//!
//! A send resolves its recipients once, records the message in the log and
//! queues one [`Transmission`] per recipient. Whatever carries transmissions
//! (the in-process pump, a simulated network) hands arrivals back through
//! [`Broker::receive`], which admits each `(recipient, msgId)` pair into the
//! inbox at most once. Confirmed and transactional messages are retransmitted
//! until acknowledged or the retry budget runs out.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use crate::admin::AdminRecord;
use crate::model::{DataElement, Element};
use crate::store::{EventLog, EventStore, Filter, StoreError};
use crate::txn::{Participant, TxnId, TxnState, Vote};

pub type ObjectId = String;

/// Addressing mode and target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Target {
    Single { target: ObjectId },
    Group { target: Uuid },
    Any { target: Uuid },
    Selective { target: Uuid, predicate: Filter },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryClass {
    Unconfirmed,
    Confirmed,
    Transactional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Message {
    pub msg_id: Uuid,
    pub sender: ObjectId,
    #[serde(flatten)]
    pub target: Target,
    pub payload: DataElement,
    pub delivery_class: DeliveryClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txn_id: Option<TxnId>,
}

impl Message {
    pub fn validate(&self) -> Result<(), BrokerError> {
        let transactional = self.delivery_class == DeliveryClass::Transactional;
        if transactional != self.txn_id.is_some() {
            return Err(BrokerError::InvalidMessage(
                "txnId must be present exactly when deliveryClass is transactional".into(),
            ));
        }
        if let Target::Selective { predicate, .. } = &self.target {
            if predicate.is_empty() {
                return Err(BrokerError::InvalidMessage("selective predicate has no clauses".into()));
            }
        }
        if self.sender.is_empty() {
            return Err(BrokerError::InvalidMessage("empty sender".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeliveryStatus {
    /// Not yet in the recipient's inbox (in flight, or staged in a transaction).
    Pending,
    Delivered,
    Acked,
    Expired,
    /// The controlling transaction aborted.
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveryReport {
    pub msg_id: Uuid,
    pub per_recipient: BTreeMap<ObjectId, DeliveryStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transmission {
    pub recipient: ObjectId,
    pub msg_id: Uuid,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Receipt {
    Accepted,
    Duplicate,
    /// Arrived after the delivery expired or was cancelled; dropped.
    Stale,
}

#[derive(Debug, thiserror::Error)]
pub enum BrokerError {
    #[error("unknown target {0}")]
    UnknownTarget(String),
    #[error("group {0} has no members")]
    EmptyGroup(Uuid),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("message {0} already exists with different content")]
    ConflictingMessage(Uuid),
    #[error("message {msg_id} was not delivered to {recipient}")]
    UnknownDelivery { recipient: ObjectId, msg_id: Uuid },
    #[error("unknown recipient {0}")]
    UnknownRecipient(ObjectId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// What the broker needs to know about objects and groups.
pub trait Directory {
    fn is_registered(&self, object: &str) -> bool;
    fn group_members(&self, group: Uuid) -> Option<BTreeSet<ObjectId>>;
    /// Sequence number and element most recently stored for an entity.
    fn latest_element(&self, entity: &str) -> Option<(u64, Element)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    /// Wait after transmission number `attempt` (1-based) before the next one.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.base * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
struct Delivery {
    status: DeliveryStatus,
    attempts: u32,
    next_retry: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone)]
struct Entry {
    message: Message,
    order: u64,
    released: bool,
    recipients: BTreeMap<ObjectId, Delivery>,
}

#[derive(Default)]
struct State {
    messages: HashMap<Uuid, Entry>,
    seen: HashSet<(ObjectId, Uuid)>,
    inbox: HashMap<ObjectId, Vec<Uuid>>,
    rotation: HashMap<Uuid, u64>,
    outbox: VecDeque<Transmission>,
    timers: BTreeSet<(DateTime<Utc>, Uuid, ObjectId)>,
    by_txn: HashMap<TxnId, Vec<Uuid>>,
    next_order: u64,
}

impl State {
    fn report(&self, id: Uuid) -> Option<DeliveryReport> {
        self.messages.get(&id).map(|e| DeliveryReport {
            msg_id: id,
            per_recipient: e.recipients.iter().map(|(r, d)| (r.clone(), d.status)).collect(),
        })
    }

    fn retries(class: DeliveryClass) -> bool {
        class != DeliveryClass::Unconfirmed
    }

    fn transmit(&mut self, id: Uuid, now: DateTime<Utc>, policy: &RetryPolicy) {
        let Some(entry) = self.messages.get_mut(&id) else { return };
        let retry = Self::retries(entry.message.delivery_class);
        for (r, d) in entry.recipients.iter_mut() {
            if !matches!(d.status, DeliveryStatus::Pending | DeliveryStatus::Delivered) {
                continue;
            }
            d.attempts += 1;
            self.outbox.push_back(Transmission { recipient: r.clone(), msg_id: id, attempt: d.attempts });
            if retry {
                let at = now + policy.backoff(d.attempts);
                d.next_retry = Some(at);
                self.timers.insert((at, id, r.clone()));
            }
        }
    }

    fn release(&mut self, id: Uuid, now: DateTime<Utc>, policy: &RetryPolicy) {
        match self.messages.get_mut(&id) {
            Some(e) if !e.released => e.released = true,
            _ => return,
        }
        self.transmit(id, now, policy);
    }

    fn cancel(&mut self, id: Uuid) {
        if let Some(e) = self.messages.get_mut(&id) {
            if e.released {
                return;
            }
            for d in e.recipients.values_mut() {
                d.status = DeliveryStatus::Cancelled;
                d.next_retry = None;
            }
        }
    }

    fn accept(&mut self, message: Message, recipients: &[ObjectId]) -> Uuid {
        let id = message.msg_id;
        if let Some(t) = &message.txn_id {
            self.by_txn.entry(t.clone()).or_default().push(id);
        }
        if let Target::Any { target } = &message.target {
            *self.rotation.entry(*target).or_default() += 1;
        }
        let released = message.delivery_class != DeliveryClass::Transactional;
        self.next_order += 1;
        self.messages.insert(
            id,
            Entry {
                message,
                order: self.next_order,
                released,
                recipients: recipients
                    .iter()
                    .map(|r| {
                        (r.clone(), Delivery { status: DeliveryStatus::Pending, attempts: 0, next_retry: None })
                    })
                    .collect(),
            },
        );
        id
    }

    fn mark_received(&mut self, recipient: &str, id: Uuid) {
        self.seen.insert((recipient.to_owned(), id));
        self.inbox.entry(recipient.to_owned()).or_default().push(id);
        if let Some(d) = self.messages.get_mut(&id).and_then(|e| e.recipients.get_mut(recipient)) {
            if d.status == DeliveryStatus::Pending {
                d.status = DeliveryStatus::Delivered;
            }
        }
    }

    fn set_status(&mut self, recipient: &str, id: Uuid, status: DeliveryStatus) {
        if let Some(d) = self.messages.get_mut(&id).and_then(|e| e.recipients.get_mut(recipient)) {
            d.status = status;
            d.next_retry = None;
        }
    }
}

pub struct Broker {
    store: Arc<EventStore>,
    policy: RetryPolicy,
    state: Mutex<State>,
}

impl Broker {
    pub fn new(store: Arc<EventStore>, policy: RetryPolicy) -> Broker {
        Broker { store, policy, state: Mutex::new(State::default()) }
    }

    /// Rebuilds broker state from the log. Deliveries still in flight are
    /// queued again with a fresh retry budget; the seen-set keeps that from
    /// producing duplicates.
    pub fn restore(store: Arc<EventStore>, policy: RetryPolicy, log: &EventLog) -> Broker {
        let mut st = State::default();
        let mut decided: HashMap<TxnId, TxnState> = HashMap::new();
        for ev in &log.entries {
            let Some(rec) = ev.admin() else { continue };
            match rec {
                AdminRecord::MessageAccepted { message, recipients } => {
                    st.accept(message.clone(), recipients);
                }
                AdminRecord::MessageReceived { recipient, msg_id } => st.mark_received(recipient, *msg_id),
                AdminRecord::MessageAcked { recipient, msg_id } => {
                    st.set_status(recipient, *msg_id, DeliveryStatus::Acked)
                }
                AdminRecord::MessageExpired { recipient, msg_id } => {
                    st.set_status(recipient, *msg_id, DeliveryStatus::Expired)
                }
                AdminRecord::TxnDecided { txn_id, state, .. } => {
                    decided.insert(txn_id.clone(), *state);
                }
                _ => {}
            }
        }
        for (txn, state) in decided {
            for id in st.by_txn.get(&txn).cloned().unwrap_or_default() {
                match state {
                    TxnState::Committed => {
                        if let Some(e) = st.messages.get_mut(&id) {
                            e.released = true;
                        }
                    }
                    _ => st.cancel(id),
                }
            }
        }
        let now = store.clock().now();
        let mut in_flight: Vec<(u64, Uuid)> = st
            .messages
            .iter()
            .filter(|(_, e)| e.released)
            .map(|(id, e)| (e.order, *id))
            .collect();
        in_flight.sort();
        for (_, id) in in_flight {
            st.transmit(id, now, &policy);
        }
        Broker { store, policy, state: Mutex::new(st) }
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    /// Resolves recipients and records the message. Sending the same message
    /// (same id and content) again returns the existing report.
    pub fn send(&self, m: Message, dir: &dyn Directory) -> Result<DeliveryReport, BrokerError> {
        m.validate()?;
        if let Some(existing) = self.duplicate_send(&m)? {
            return Ok(existing);
        }
        let members = match &m.target {
            Target::Single { target } => {
                if !dir.is_registered(target) {
                    return Err(BrokerError::UnknownTarget(target.clone()));
                }
                None
            }
            Target::Group { target } | Target::Any { target } | Target::Selective { target, .. } => {
                Some(
                    dir.group_members(*target)
                        .ok_or_else(|| BrokerError::UnknownTarget(target.to_string()))?,
                )
            }
        };
        let selected: Option<Vec<ObjectId>> = match (&m.target, &members) {
            (Target::Selective { predicate, .. }, Some(ms)) => Some(
                ms.iter()
                    .filter(|o| {
                        dir.latest_element(o)
                            .is_some_and(|(seq, el)| predicate.matches_element(seq, &el))
                    })
                    .cloned()
                    .collect(),
            ),
            _ => None,
        };

        let now = self.store.clock().now();
        let mut st = self.state.lock();
        if let Some(existing) = st.messages.get(&m.msg_id) {
            return if existing.message == m {
                Ok(st.report(m.msg_id).expect("present"))
            } else {
                Err(BrokerError::ConflictingMessage(m.msg_id))
            };
        }
        let recipients: Vec<ObjectId> = match (&m.target, members) {
            (Target::Single { target }, _) => vec![target.clone()],
            (Target::Group { .. }, Some(ms)) => ms.into_iter().collect(),
            (Target::Any { target }, Some(ms)) => {
                if ms.is_empty() {
                    return Err(BrokerError::EmptyGroup(*target));
                }
                let turn = st.rotation.get(target).copied().unwrap_or(0);
                let pick = (turn % ms.len() as u64) as usize;
                vec![ms.into_iter().nth(pick).expect("index in range")]
            }
            (Target::Selective { .. }, Some(_)) => selected.unwrap_or_default(),
            _ => unreachable!("group modes always resolve members"),
        };
        self.store.append_admin(AdminRecord::MessageAccepted {
            message: m.clone(),
            recipients: recipients.clone(),
        })?;
        let id = st.accept(m, &recipients);
        if st.messages[&id].released {
            st.transmit(id, now, &self.policy);
        }
        Ok(st.report(id).expect("just inserted"))
    }

    fn duplicate_send(&self, m: &Message) -> Result<Option<DeliveryReport>, BrokerError> {
        let st = self.state.lock();
        match st.messages.get(&m.msg_id) {
            Some(e) if e.message == *m => Ok(st.report(m.msg_id)),
            Some(_) => Err(BrokerError::ConflictingMessage(m.msg_id)),
            None => Ok(None),
        }
    }

    /// Transmissions waiting to be carried, oldest first.
    pub fn drain_outbox(&self) -> Vec<Transmission> {
        self.state.lock().outbox.drain(..).collect()
    }

    /// An arrival at the recipient. Admits the message into the inbox unless
    /// this recipient has already seen it.
    pub fn receive(&self, recipient: &str, msg_id: Uuid) -> Result<Receipt, BrokerError> {
        let mut st = self.state.lock();
        let status = st
            .messages
            .get(&msg_id)
            .filter(|e| e.released)
            .and_then(|e| e.recipients.get(recipient))
            .map(|d| d.status)
            .ok_or_else(|| BrokerError::UnknownDelivery { recipient: recipient.to_owned(), msg_id })?;
        if st.seen.contains(&(recipient.to_owned(), msg_id)) {
            return Ok(Receipt::Duplicate);
        }
        if matches!(status, DeliveryStatus::Expired | DeliveryStatus::Cancelled) {
            return Ok(Receipt::Stale);
        }
        self.store.append_admin(AdminRecord::MessageReceived {
            recipient: recipient.to_owned(),
            msg_id,
        })?;
        st.mark_received(recipient, msg_id);
        Ok(Receipt::Accepted)
    }

    pub fn ack(&self, recipient: &str, msg_id: Uuid) -> Result<DeliveryReport, BrokerError> {
        let mut st = self.state.lock();
        if !st.seen.contains(&(recipient.to_owned(), msg_id)) {
            return Err(BrokerError::UnknownDelivery { recipient: recipient.to_owned(), msg_id });
        }
        let status = st.messages[&msg_id].recipients[recipient].status;
        if status != DeliveryStatus::Acked {
            self.store.append_admin(AdminRecord::MessageAcked {
                recipient: recipient.to_owned(),
                msg_id,
            })?;
            st.set_status(recipient, msg_id, DeliveryStatus::Acked);
        }
        Ok(st.report(msg_id).expect("seen implies known"))
    }

    /// Messages in the inbox that have not been acknowledged, in send order
    /// (which keeps each sender's messages in FIFO order). A delivery that ran
    /// out of retries stays here until acked; expiry only ends retransmission.
    pub fn pending(&self, recipient: &str, dir: &dyn Directory) -> Result<Vec<Message>, BrokerError> {
        if !dir.is_registered(recipient) {
            return Err(BrokerError::UnknownRecipient(recipient.to_owned()));
        }
        let st = self.state.lock();
        let mut out: Vec<(u64, &Message)> = st
            .inbox
            .get(recipient)
            .into_iter()
            .flatten()
            .filter_map(|id| st.messages.get(id))
            .filter(|e| {
                matches!(
                    e.recipients.get(recipient).map(|d| d.status),
                    Some(DeliveryStatus::Delivered | DeliveryStatus::Expired)
                )
            })
            .map(|e| (e.order, &e.message))
            .collect();
        out.sort_by_key(|(o, _)| *o);
        Ok(out.into_iter().map(|(_, m)| m.clone()).collect())
    }

    /// Retransmits or expires deliveries whose retry timer has passed.
    pub fn tick(&self, now: DateTime<Utc>) -> Result<usize, BrokerError> {
        let mut st = self.state.lock();
        let mut changed = 0;
        while let Some(first) = st.timers.first().cloned() {
            if first.0 > now {
                break;
            }
            st.timers.pop_first();
            let (at, id, recipient) = first;
            let policy = self.policy;
            let Some(entry) = st.messages.get_mut(&id) else { continue };
            let Some(d) = entry.recipients.get_mut(&recipient) else { continue };
            if d.next_retry != Some(at)
                || !matches!(d.status, DeliveryStatus::Pending | DeliveryStatus::Delivered)
            {
                continue;
            }
            changed += 1;
            if d.attempts >= policy.attempts {
                self.store.append_admin(AdminRecord::MessageExpired {
                    recipient: recipient.clone(),
                    msg_id: id,
                })?;
                d.status = DeliveryStatus::Expired;
                d.next_retry = None;
            } else {
                d.attempts += 1;
                let next = now + policy.backoff(d.attempts);
                d.next_retry = Some(next);
                let attempt = d.attempts;
                st.timers.insert((next, id, recipient.clone()));
                st.outbox.push_back(Transmission { recipient, msg_id: id, attempt });
            }
        }
        Ok(changed)
    }

    /// Earliest pending retry timer.
    pub fn next_deadline(&self) -> Option<DateTime<Utc>> {
        self.state.lock().timers.first().map(|t| t.0)
    }

    pub fn report(&self, msg_id: Uuid) -> Option<DeliveryReport> {
        self.state.lock().report(msg_id)
    }

    pub fn message(&self, msg_id: Uuid) -> Option<Message> {
        self.state.lock().messages.get(&msg_id).map(|e| e.message.clone())
    }

    /// Every message id ever admitted to `recipient`'s inbox, in arrival order.
    pub fn inbox_history(&self, recipient: &str) -> Vec<Uuid> {
        self.state.lock().inbox.get(recipient).cloned().unwrap_or_default()
    }

    pub fn is_staged(&self, msg_id: Uuid) -> bool {
        self.state.lock().messages.get(&msg_id).is_some_and(|e| {
            !e.released && e.recipients.values().all(|d| d.status == DeliveryStatus::Pending)
        })
    }

    /// Makes a staged transactional message deliverable.
    pub fn release(&self, msg_id: Uuid) {
        let now = self.store.clock().now();
        self.state.lock().release(msg_id, now, &self.policy);
    }

    /// Discards a staged transactional message for good.
    pub fn discard(&self, msg_id: Uuid) {
        self.state.lock().cancel(msg_id);
    }

    /// Digest over every message's delivery state, for replay comparisons.
    pub fn digest(&self) -> String {
        let st = self.state.lock();
        let mut ids: Vec<_> = st.messages.iter().map(|(id, e)| (e.order, *id)).collect();
        ids.sort();
        let mut h = Sha256::new();
        for (order, id) in ids {
            let e = &st.messages[&id];
            h.update(format!("{order} {id} {}", e.released));
            for (r, d) in &e.recipients {
                h.update(format!(" {r}={:?}", d.status));
            }
            h.update("\n");
        }
        let mut rot: Vec<_> = st.rotation.iter().collect();
        rot.sort();
        for (g, n) in rot {
            h.update(format!("rot {g} {n}\n"));
        }
        hex::encode(h.finalize())
    }
}

/// Enlists one transactional message in its transaction: votes yes while the
/// message is staged, releases it on commit and discards it on rollback.
pub struct MessageParticipant {
    id: String,
    msg_id: Uuid,
    broker: Arc<Broker>,
}

impl MessageParticipant {
    pub const PREFIX: &'static str = "message:";

    pub fn new(broker: Arc<Broker>, msg_id: Uuid) -> MessageParticipant {
        MessageParticipant { id: format!("{}{msg_id}", Self::PREFIX), msg_id, broker }
    }

    /// Inverse of the participant id format.
    pub fn parse_id(id: &str) -> Option<Uuid> {
        id.strip_prefix(Self::PREFIX)?.parse().ok()
    }
}

impl Participant for MessageParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn prepare(&self, _txn: &TxnId) -> Option<Vote> {
        Some(if self.broker.is_staged(self.msg_id) { Vote::Yes } else { Vote::No })
    }

    fn commit(&self, _txn: &TxnId) {
        self.broker.release(self.msg_id);
    }

    fn rollback(&self, _txn: &TxnId) {
        self.broker.discard(self.msg_id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Clock, ManualClock, SeededIds};
    use crate::model::Triple;
    use crate::txn::TxnCoordinator;

    #[derive(Default)]
    struct Dir {
        objects: BTreeSet<ObjectId>,
        groups: HashMap<Uuid, BTreeSet<ObjectId>>,
    }

    impl Directory for Dir {
        fn is_registered(&self, o: &str) -> bool {
            self.objects.contains(o)
        }
        fn group_members(&self, g: Uuid) -> Option<BTreeSet<ObjectId>> {
            self.groups.get(&g).cloned()
        }
        fn latest_element(&self, _: &str) -> Option<(u64, Element)> {
            None
        }
    }

    struct Fixture {
        clock: Arc<ManualClock>,
        store: Arc<EventStore>,
        broker: Arc<Broker>,
        dir: Dir,
        group: Uuid,
    }

    fn fixture() -> Fixture {
        let clock = Arc::new(ManualClock::new(DateTime::<Utc>::UNIX_EPOCH));
        let store = Arc::new(EventStore::in_memory(clock.clone(), Arc::new(SeededIds::new(3))));
        let broker = Arc::new(Broker::new(store.clone(), RetryPolicy::default()));
        let mut dir = Dir::default();
        for o in ["a", "b", "c", "sender"] {
            dir.objects.insert(o.into());
        }
        let group = Uuid::from_u128(7);
        dir.groups.insert(group, ["a", "b", "c"].into_iter().map(String::from).collect());
        Fixture { clock, store, broker, dir, group }
    }

    fn msg(target: Target, class: DeliveryClass) -> Message {
        Message {
            msg_id: Uuid::new_v4(),
            sender: "sender".into(),
            target,
            payload: DataElement::new(vec![Triple::string("command", "on").unwrap()], vec![]).unwrap(),
            delivery_class: class,
            txn_id: None,
        }
    }

    fn carry(f: &Fixture) {
        for t in f.broker.drain_outbox() {
            f.broker.receive(&t.recipient, t.msg_id).unwrap();
        }
    }

    #[test]
    fn single_to_unknown_object() {
        let f = fixture();
        let m = msg(Target::Single { target: "ghost".into() }, DeliveryClass::Unconfirmed);
        assert!(matches!(f.broker.send(m, &f.dir), Err(BrokerError::UnknownTarget(_))));
    }

    #[test]
    fn group_fan_out_once_each() {
        let f = fixture();
        let m = msg(Target::Group { target: f.group }, DeliveryClass::Confirmed);
        let id = m.msg_id;
        let r = f.broker.send(m, &f.dir).unwrap();
        assert_eq!(r.per_recipient.len(), 3);
        let tx = f.broker.drain_outbox();
        assert_eq!(tx.len(), 3);
        for t in tx.iter().chain(tx.iter()) {
            f.broker.receive(&t.recipient, t.msg_id).unwrap();
        }
        for o in ["a", "b", "c"] {
            assert_eq!(f.broker.inbox_history(o), [id]);
        }
    }

    #[test]
    fn ack_is_idempotent_and_requires_delivery() {
        let f = fixture();
        let m = msg(Target::Single { target: "a".into() }, DeliveryClass::Confirmed);
        let id = m.msg_id;
        f.broker.send(m, &f.dir).unwrap();
        assert!(matches!(f.broker.ack("a", id), Err(BrokerError::UnknownDelivery { .. })));
        carry(&f);
        assert_eq!(f.broker.ack("a", id).unwrap().per_recipient["a"], DeliveryStatus::Acked);
        assert_eq!(f.broker.ack("a", id).unwrap().per_recipient["a"], DeliveryStatus::Acked);
        assert!(f.broker.pending("a", &f.dir).unwrap().is_empty());
    }

    #[test]
    fn retry_budget_then_expired() {
        let f = fixture();
        let m = msg(Target::Single { target: "a".into() }, DeliveryClass::Confirmed);
        let id = m.msg_id;
        f.broker.send(m, &f.dir).unwrap();
        let mut attempts = f.broker.drain_outbox().len();
        for step_ms in [499, 1, 999, 1, 1999, 1] {
            f.clock.advance(chrono::Duration::milliseconds(step_ms));
            f.broker.tick(f.clock.now()).unwrap();
            attempts += f.broker.drain_outbox().len();
        }
        assert_eq!(attempts, 3);
        assert_eq!(f.broker.report(id).unwrap().per_recipient["a"], DeliveryStatus::Expired);
        assert_eq!(f.broker.receive("a", id).unwrap(), Receipt::Stale);
    }

    #[test]
    fn pending_is_fifo_per_sender() {
        let f = fixture();
        let m1 = msg(Target::Single { target: "a".into() }, DeliveryClass::Confirmed);
        let m2 = msg(Target::Single { target: "a".into() }, DeliveryClass::Confirmed);
        let (i1, i2) = (m1.msg_id, m2.msg_id);
        assert!(f.broker.pending("a", &f.dir).unwrap().is_empty());
        f.broker.send(m1, &f.dir).unwrap();
        f.broker.send(m2, &f.dir).unwrap();
        // second arrives first
        let mut tx = f.broker.drain_outbox();
        tx.reverse();
        for t in tx {
            f.broker.receive(&t.recipient, t.msg_id).unwrap();
        }
        let ids: Vec<_> = f.broker.pending("a", &f.dir).unwrap().iter().map(|m| m.msg_id).collect();
        assert_eq!(ids, [i1, i2]);
        assert!(matches!(f.broker.pending("ghost", &f.dir), Err(BrokerError::UnknownRecipient(_))));
    }

    #[test]
    fn any_mode_round_robin() {
        let f = fixture();
        let mut picks = Vec::new();
        for _ in 0..6 {
            let r = f
                .broker
                .send(msg(Target::Any { target: f.group }, DeliveryClass::Unconfirmed), &f.dir)
                .unwrap();
            picks.extend(r.per_recipient.into_keys());
        }
        assert_eq!(picks, ["a", "b", "c", "a", "b", "c"]);
        let mut dir = Dir::default();
        dir.groups.insert(f.group, BTreeSet::new());
        assert!(matches!(
            f.broker.send(msg(Target::Any { target: f.group }, DeliveryClass::Unconfirmed), &dir),
            Err(BrokerError::EmptyGroup(_))
        ));
    }

    #[test]
    fn transactional_gating() {
        let f = fixture();
        let coord = TxnCoordinator::new(f.store.clone());
        for commit in [true, false] {
            let txn = coord.begin().unwrap();
            let mut m = msg(Target::Single { target: "b".into() }, DeliveryClass::Transactional);
            m.txn_id = Some(txn.clone());
            let id = m.msg_id;
            coord.enlist(&txn, Arc::new(MessageParticipant::new(f.broker.clone(), id))).unwrap();
            f.broker.send(m, &f.dir).unwrap();
            assert!(f.broker.drain_outbox().is_empty());
            assert!(f.broker.pending("b", &f.dir).unwrap().iter().all(|m| m.msg_id != id));
            if commit {
                assert!(coord.commit(&txn, Duration::from_secs(1)).unwrap().is_committed());
            } else {
                coord.abort(&txn).unwrap();
            }
            carry(&f);
            let visible = f.broker.pending("b", &f.dir).unwrap().iter().any(|m| m.msg_id == id);
            assert_eq!(visible, commit);
        }
    }

    #[test]
    fn validation() {
        let f = fixture();
        let m = msg(Target::Single { target: "a".into() }, DeliveryClass::Transactional);
        assert!(matches!(f.broker.send(m, &f.dir), Err(BrokerError::InvalidMessage(_))));
        let mut m = msg(Target::Single { target: "a".into() }, DeliveryClass::Confirmed);
        m.txn_id = Some(TxnId::from_bytes([1; 16]));
        assert!(matches!(f.broker.send(m, &f.dir), Err(BrokerError::InvalidMessage(_))));
    }

    #[test]
    fn restore_keeps_seen_set() {
        let f = fixture();
        let m = msg(Target::Group { target: f.group }, DeliveryClass::Confirmed);
        let id = m.msg_id;
        f.broker.send(m, &f.dir).unwrap();
        carry(&f);
        f.broker.ack("a", id).unwrap();
        let restored = Broker::restore(f.store.clone(), RetryPolicy::default(), &f.store.log());
        assert_eq!(restored.digest(), f.broker.digest());
        // b and c are re-sent, but nothing lands twice
        let tx = restored.drain_outbox();
        assert_eq!(tx.len(), 2);
        for t in tx {
            assert_eq!(restored.receive(&t.recipient, t.msg_id).unwrap(), Receipt::Duplicate);
        }
        assert_eq!(restored.inbox_history("b"), [id]);
    }
}
