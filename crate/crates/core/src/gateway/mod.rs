//! The gateway service: objects and presence, groups, messaging, sessions,
//! transactions, subscriptions and charging over one event store.
//!
//! All durable state changes are events in the store. Each component keeps an
//! in-memory view that is rebuilt from the log on start, so a gateway opened
//! on an existing log resumes where the previous one stopped.

pub mod config;
pub mod http;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

pub use config::{ConfigError, GatewayConfig};

use crate::admin::{AdminRecord, ChargeRecord};
use crate::broker::{
    Broker, BrokerError, DeliveryClass, DeliveryReport, Directory, Message, MessageParticipant,
    ObjectId, Receipt, Target, Transmission,
};
use crate::codec::{parse_om_observation_with_id, CodecError, DoRequest, DoResponse};
use crate::env::{with_offset, Clock, IdSource, RandomIds, SystemClock};
use crate::group::Group;
use crate::model::{DataElement, Element, Triple};
use crate::notify::{BadPredicate, Notification, NotifyEngine, Subscription};
use crate::store::{Event, EventLog, EventStore, Snapshot, StoreError};
use crate::txn::{HttpParticipant, Outcome, Participant, TxnCoordinator, TxnError, TxnId, TxnState};

/// Account charged for events on elements without an entity identity.
pub const ANONYMOUS_ACCOUNT: &str = "anonymous";

const NOTIFICATION_LOG_CAPACITY: usize = 100_000;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("unknown object {0}")]
    UnknownObject(String),
    #[error("unknown group {0}")]
    UnknownGroup(Uuid),
    #[error("a group needs defining attributes or explicit members")]
    EmptyGroup,
    #[error("unknown subscription {0}")]
    UnknownSub(Uuid),
    #[error("charge units must be non-negative")]
    NegativeUnits,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    BadPredicate(#[from] BadPredicate),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Txn(#[from] TxnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl GatewayError {
    /// HTTP status used on the REST surface and inside `<result>`.
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::UnknownObject(_)
            | GatewayError::UnknownGroup(_)
            | GatewayError::UnknownSub(_) => 404,
            GatewayError::EmptyGroup
            | GatewayError::NegativeUnits
            | GatewayError::Invalid(_)
            | GatewayError::BadPredicate(_)
            | GatewayError::Codec(_) => 400,
            GatewayError::Broker(e) => match e {
                BrokerError::UnknownTarget(_)
                | BrokerError::UnknownDelivery { .. }
                | BrokerError::UnknownRecipient(_) => 404,
                BrokerError::EmptyGroup(_) | BrokerError::ConflictingMessage(_) => 409,
                BrokerError::InvalidMessage(_) => 400,
                BrokerError::Store(_) => 500,
            },
            GatewayError::Txn(e) => match e {
                TxnError::UnknownTxn(_) => 404,
                TxnError::TxnClosed(..) | TxnError::AlreadyCommitted(_) | TxnError::DuplicateTxn(_) => 409,
                TxnError::Store(_) => 500,
            },
            GatewayError::Store(StoreError::EmptyFilter) => 400,
            GatewayError::Store(StoreError::IdentityChanged(_)) => 409,
            GatewayError::Store(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresenceStatus {
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectRecord {
    pub object_id: ObjectId,
    pub callback: Option<String>,
    pub online: bool,
    #[serde(skip)]
    pub heartbeat_deadline: Duration,
    #[serde(skip)]
    pub last_heartbeat: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionRecord {
    pub session_id: Uuid,
    pub endpoints: (ObjectId, ObjectId),
    pub state: SessionState,
    pub last_activity: DateTime<Utc>,
}

/// Fold of the administrative records the gateway itself owns.
#[derive(Debug, Default, Clone)]
struct Registry {
    objects: BTreeMap<ObjectId, ObjectRecord>,
    groups: BTreeMap<Uuid, Group>,
    subscriptions: BTreeMap<Uuid, Subscription>,
    balances: BTreeMap<String, Decimal>,
    charges: u64,
}

impl Registry {
    fn apply(&mut self, ev: &Event) {
        let Some(rec) = ev.admin() else { return };
        match rec {
            AdminRecord::ObjectRegistered { object_id, callback, heartbeat_deadline_ms } => {
                let r = self.objects.entry(object_id.clone()).or_insert_with(|| ObjectRecord {
                    object_id: object_id.clone(),
                    callback: None,
                    online: false,
                    heartbeat_deadline: Duration::ZERO,
                    last_heartbeat: ev.occurred_at,
                });
                r.callback = callback.clone();
                r.heartbeat_deadline = Duration::from_millis(*heartbeat_deadline_ms);
                r.last_heartbeat = ev.occurred_at;
            }
            AdminRecord::ObjectRemoved { object_id } => {
                self.objects.remove(object_id);
            }
            AdminRecord::PresenceChanged { object_id, online } => {
                if let Some(r) = self.objects.get_mut(object_id) {
                    r.online = *online;
                    if *online {
                        r.last_heartbeat = ev.occurred_at;
                    }
                }
            }
            AdminRecord::GroupCreated { group_id, defining_attributes, explicit_members } => {
                self.groups.insert(
                    *group_id,
                    Group {
                        group_id: *group_id,
                        defining_attributes: defining_attributes.clone(),
                        explicit_members: explicit_members.clone(),
                    },
                );
            }
            AdminRecord::GroupDeleted { group_id } => {
                self.groups.remove(group_id);
            }
            AdminRecord::SubscriptionAdded { subscription } => {
                self.subscriptions.insert(subscription.sub_id, subscription.clone());
            }
            AdminRecord::SubscriptionRemoved { sub_id } => {
                self.subscriptions.remove(sub_id);
            }
            AdminRecord::ChargeRecorded { charge } => {
                *self.balances.entry(charge.account_id.clone()).or_default() += charge.units;
                self.charges += 1;
            }
            _ => {}
        }
    }

    fn digest_into(&self, h: &mut Sha256) {
        for o in self.objects.values() {
            h.update(format!(
                "obj {:?} {:?} {} {}\n",
                o.object_id,
                o.callback,
                o.online,
                o.heartbeat_deadline.as_millis()
            ));
        }
        for g in self.groups.values() {
            h.update(format!("group {}\n", serde_json::to_string(g).expect("group serializes")));
        }
        for s in self.subscriptions.values() {
            h.update(format!("sub {}\n", serde_json::to_string(s).expect("subscription serializes")));
        }
        for (a, b) in &self.balances {
            h.update(format!("bal {a:?} {}\n", b.normalize()));
        }
        h.update(format!("charges {}\n", self.charges));
    }
}

struct DirView<'a> {
    registry: &'a Registry,
    store: &'a EventStore,
}

impl Directory for DirView<'_> {
    fn is_registered(&self, object: &str) -> bool {
        self.registry.objects.contains_key(object)
    }

    fn group_members(&self, group: Uuid) -> Option<BTreeSet<ObjectId>> {
        let g = self.registry.groups.get(&group)?;
        Some(self.store.with_snapshot(|s| g.members(s)))
    }

    fn latest_element(&self, entity: &str) -> Option<(u64, Element)> {
        self.store.with_snapshot(|s| {
            s.latest_for_entity(entity)
                .map(|se| (se.seq, se.element.clone()))
        })
    }
}

struct Outgoing {
    url: String,
    notification: Notification,
    attempts: u32,
    next_at: DateTime<Utc>,
}

#[derive(Default)]
struct NotifyState {
    engine: NotifyEngine,
    log: VecDeque<Notification>,
    total: u64,
    outbox: VecDeque<Outgoing>,
    queued: HashSet<(Uuid, u64)>,
}

fn is_http(url: &str) -> bool {
    url.starts_with("http://") || url.starts_with("https://")
}

/// Clock, id source and transport choice for a gateway instance.
#[derive(Clone)]
pub struct Runtime {
    pub clock: Arc<dyn Clock>,
    pub ids: Arc<dyn IdSource>,
    /// Hand queued transmissions straight to the local inboxes. A simulator
    /// turns this off and carries them itself.
    pub local_delivery: bool,
}

impl Default for Runtime {
    fn default() -> Self {
        Runtime { clock: Arc::new(SystemClock), ids: Arc::new(RandomIds), local_delivery: true }
    }
}

/// Summary counters for the store and registries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Stats {
    pub events: u64,
    pub elements: usize,
    pub entities: usize,
    pub objects: usize,
    pub groups: usize,
    pub subscriptions: usize,
    pub transactions: usize,
    pub charges: u64,
}

pub struct Gateway {
    config: GatewayConfig,
    runtime: Runtime,
    store: Arc<EventStore>,
    broker: Arc<Broker>,
    txns: Arc<TxnCoordinator>,
    registry: RwLock<Registry>,
    notify: Mutex<NotifyState>,
    sessions: Mutex<HashMap<(ObjectId, ObjectId), SessionRecord>>,
    agent: ureq::Agent,
}

impl Gateway {
    /// Opens the configured log (or an in-memory store) and restores state.
    pub fn open(config: GatewayConfig, runtime: Runtime) -> Result<Gateway, GatewayError> {
        let store = match &config.log_path {
            Some(p) => EventStore::open(p, config.sync, runtime.clock.clone(), runtime.ids.clone())?,
            None => EventStore::in_memory(runtime.clock.clone(), runtime.ids.clone()),
        };
        Gateway::with_store(config, runtime, Arc::new(store))
    }

    pub fn in_memory(config: GatewayConfig, runtime: Runtime) -> Gateway {
        let store = EventStore::in_memory(runtime.clock.clone(), runtime.ids.clone());
        Gateway::with_store(config, runtime, Arc::new(store)).expect("empty store restores")
    }

    /// Restores every component from `store`'s log, then finishes any
    /// transaction the previous run left undecided or unannounced.
    pub fn with_store(
        config: GatewayConfig,
        runtime: Runtime,
        store: Arc<EventStore>,
    ) -> Result<Gateway, GatewayError> {
        let log = store.log();
        let mut registry = Registry::default();
        let mut engine = NotifyEngine::new();
        let epoch = runtime.clock.now();
        for ev in &log.entries {
            registry.apply(ev);
            engine.evaluate(ev, epoch);
        }
        for r in registry.objects.values_mut() {
            r.last_heartbeat = r.last_heartbeat.max(epoch);
        }
        let broker = Arc::new(Broker::restore(store.clone(), config.retry_policy(), &log));
        let txns = Arc::new(TxnCoordinator::restore(store.clone(), &log));
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.callback_timeout_ms)))
            .build()
            .into();
        let gw = Gateway {
            config,
            runtime,
            store,
            broker,
            txns,
            registry: RwLock::new(registry),
            notify: Mutex::new(NotifyState { engine, ..NotifyState::default() }),
            sessions: Mutex::new(HashMap::new()),
            agent,
        };
        let resolver = gw.resolver();
        let recovered = gw.txns.recover(&resolver)?;
        for r in &recovered {
            tracing::info!(txn = %r.txn_id, state = ?r.state, "completed transaction left by previous run");
            if !r.unreachable.is_empty() {
                tracing::warn!(txn = %r.txn_id, participants = ?r.unreachable, "participants could not be notified");
            }
        }
        gw.after_change()?;
        Ok(gw)
    }

    fn resolver(&self) -> impl Fn(&str) -> Option<Arc<dyn Participant>> {
        let broker = self.broker.clone();
        let timeout = self.config.prepare_timeout();
        move |id: &str| {
            if let Some(msg) = MessageParticipant::parse_id(id) {
                Some(Arc::new(MessageParticipant::new(broker.clone(), msg)) as Arc<dyn Participant>)
            } else if is_http(id) {
                Some(Arc::new(HttpParticipant::new(id, timeout)) as Arc<dyn Participant>)
            } else {
                None
            }
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<EventStore> {
        &self.store
    }

    pub fn broker(&self) -> &Arc<Broker> {
        &self.broker
    }

    pub fn txns(&self) -> &Arc<TxnCoordinator> {
        &self.txns
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.runtime.clock.now()
    }

    fn after_change(&self) -> Result<(), GatewayError> {
        self.pump_notifications();
        if self.runtime.local_delivery {
            for t in self.broker.drain_outbox() {
                self.deliver(&t)?;
            }
        }
        Ok(())
    }

    /// Hands one transmission to its recipient's inbox and charges the
    /// sender for a first delivery.
    pub fn deliver(&self, t: &Transmission) -> Result<Receipt, GatewayError> {
        let receipt = self.broker.receive(&t.recipient, t.msg_id)?;
        if receipt == Receipt::Accepted && !self.config.charge_per_message.is_zero() {
            if let Some(m) = self.broker.message(t.msg_id) {
                self.charge_inner(&m.sender, self.config.charge_per_message, format!("message:{}", t.msg_id))?;
            }
        }
        Ok(receipt)
    }

    fn append_admin(&self, reg: &mut Registry, rec: AdminRecord) -> Result<Arc<Event>, GatewayError> {
        let ev = self.store.append_admin(rec)?;
        reg.apply(&ev);
        Ok(ev)
    }

    // ---- objects and presence ----

    /// Registers (or re-registers) an object; it comes online immediately.
    /// Returns true when the object was not known before.
    pub fn register_object(
        &self,
        object_id: &str,
        callback: Option<String>,
        heartbeat_deadline: Option<Duration>,
    ) -> Result<bool, GatewayError> {
        if object_id.is_empty() {
            return Err(GatewayError::Invalid("empty objectId".into()));
        }
        let deadline = heartbeat_deadline.unwrap_or(Duration::from_millis(self.config.heartbeat_deadline_ms));
        let created = {
            let mut reg = self.registry.write();
            let created = !reg.objects.contains_key(object_id);
            self.append_admin(
                &mut reg,
                AdminRecord::ObjectRegistered {
                    object_id: object_id.to_owned(),
                    callback,
                    heartbeat_deadline_ms: deadline.as_millis() as u64,
                },
            )?;
            if !reg.objects[object_id].online {
                self.append_admin(
                    &mut reg,
                    AdminRecord::PresenceChanged { object_id: object_id.to_owned(), online: true },
                )?;
            }
            created
        };
        self.after_change()?;
        Ok(created)
    }

    pub fn remove_object(&self, object_id: &str) -> Result<(), GatewayError> {
        {
            let mut reg = self.registry.write();
            if !reg.objects.contains_key(object_id) {
                return Err(GatewayError::UnknownObject(object_id.to_owned()));
            }
            self.append_admin(&mut reg, AdminRecord::ObjectRemoved { object_id: object_id.to_owned() })?;
        }
        self.after_change()
    }

    /// Heartbeat (`Online`) or explicit sign-off (`Offline`). A heartbeat
    /// may also replace the object's deadline.
    pub fn presence_update(
        &self,
        object_id: &str,
        status: PresenceStatus,
        heartbeat_deadline: Option<Duration>,
    ) -> Result<(), GatewayError> {
        let now = self.now();
        {
            let mut reg = self.registry.write();
            let rec = reg
                .objects
                .get_mut(object_id)
                .ok_or_else(|| GatewayError::UnknownObject(object_id.to_owned()))?;
            let online = status == PresenceStatus::Online;
            if online {
                rec.last_heartbeat = now;
            }
            let changed_deadline = heartbeat_deadline.filter(|d| *d != rec.heartbeat_deadline);
            let was_online = rec.online;
            let callback = rec.callback.clone();
            if let Some(d) = changed_deadline {
                self.append_admin(
                    &mut reg,
                    AdminRecord::ObjectRegistered {
                        object_id: object_id.to_owned(),
                        callback,
                        heartbeat_deadline_ms: d.as_millis() as u64,
                    },
                )?;
            }
            if was_online != online {
                self.append_admin(
                    &mut reg,
                    AdminRecord::PresenceChanged { object_id: object_id.to_owned(), online },
                )?;
            }
        }
        self.after_change()
    }

    pub fn object(&self, object_id: &str) -> Option<ObjectRecord> {
        self.registry.read().objects.get(object_id).cloned()
    }

    pub fn is_registered(&self, object_id: &str) -> bool {
        self.registry.read().objects.contains_key(object_id)
    }

    // ---- groups ----

    pub fn create_group(
        &self,
        defining_attributes: Vec<Triple>,
        explicit_members: BTreeSet<ObjectId>,
    ) -> Result<Uuid, GatewayError> {
        if defining_attributes.is_empty() && explicit_members.is_empty() {
            return Err(GatewayError::EmptyGroup);
        }
        let mut names = HashSet::new();
        if let Some(dup) = defining_attributes.iter().find(|t| !names.insert(t.name())) {
            return Err(GatewayError::Invalid(format!("attribute `{}` repeated", dup.name())));
        }
        let group_id = self.runtime.ids.uuid();
        {
            let mut reg = self.registry.write();
            self.append_admin(
                &mut reg,
                AdminRecord::GroupCreated { group_id, defining_attributes, explicit_members },
            )?;
        }
        self.after_change()?;
        Ok(group_id)
    }

    /// Current membership, evaluated against the latest snapshot.
    pub fn members(&self, group_id: Uuid) -> Result<BTreeSet<ObjectId>, GatewayError> {
        let reg = self.registry.read();
        let g = reg.groups.get(&group_id).ok_or(GatewayError::UnknownGroup(group_id))?;
        Ok(self.store.with_snapshot(|s| g.members(s)))
    }

    pub fn group(&self, group_id: Uuid) -> Option<Group> {
        self.registry.read().groups.get(&group_id).cloned()
    }

    pub fn delete_group(&self, group_id: Uuid) -> Result<(), GatewayError> {
        {
            let mut reg = self.registry.write();
            if !reg.groups.contains_key(&group_id) {
                return Err(GatewayError::UnknownGroup(group_id));
            }
            self.append_admin(&mut reg, AdminRecord::GroupDeleted { group_id })?;
        }
        self.after_change()
    }

    // ---- elements ----

    /// Stores an element, charges its entity and runs notifications.
    pub fn append_element(&self, element: impl Into<Element>) -> Result<Arc<Event>, GatewayError> {
        let element = element.into();
        let account = element.entity_id().unwrap_or(ANONYMOUS_ACCOUNT).to_owned();
        let ev = self.store.append_element(element)?;
        if !self.config.charge_per_event.is_zero() {
            self.charge_inner(&account, self.config.charge_per_event, format!("event:{}", ev.seq))?;
        }
        self.after_change()?;
        Ok(ev)
    }

    pub fn ingest_observation(&self, xml: &[u8]) -> Result<Arc<Event>, GatewayError> {
        let ctx = parse_om_observation_with_id(xml, self.runtime.ids.uuid())?;
        self.append_element(ctx)
    }

    pub fn element(&self, id: Uuid) -> Option<Element> {
        self.store.get(id)
    }

    /// Element events after `since`, in sequence order.
    pub fn element_events_since(&self, since: u64) -> Vec<Arc<Event>> {
        self.store
            .events_since(since)
            .into_iter()
            .filter(|e| e.element().is_some())
            .collect()
    }

    pub fn snapshot(&self) -> Snapshot {
        self.store.snapshot()
    }

    // ---- messaging ----

    pub fn send_message(&self, m: Message) -> Result<DeliveryReport, GatewayError> {
        let report = {
            let reg = self.registry.read();
            if !reg.objects.contains_key(&m.sender) {
                return Err(GatewayError::UnknownObject(m.sender.clone()));
            }
            m.validate()?;
            if let Some(txn) = &m.txn_id {
                let participant = MessageParticipant::new(self.broker.clone(), m.msg_id);
                self.txns.enlist(txn, Arc::new(participant))?;
            }
            let dir = DirView { registry: &reg, store: &self.store };
            self.broker.send(m, &dir)?
        };
        self.after_change()?;
        Ok(report)
    }

    pub fn ack(&self, recipient: &str, msg_id: Uuid) -> Result<DeliveryReport, GatewayError> {
        let r = self.broker.ack(recipient, msg_id)?;
        self.after_change()?;
        Ok(r)
    }

    pub fn pending(&self, recipient: &str) -> Result<Vec<Message>, GatewayError> {
        let reg = self.registry.read();
        let dir = DirView { registry: &reg, store: &self.store };
        Ok(self.broker.pending(recipient, &dir)?)
    }

    pub fn report(&self, msg_id: Uuid) -> Option<DeliveryReport> {
        self.broker.report(msg_id)
    }

    // ---- subscriptions ----

    pub fn subscribe(&self, s: Subscription) -> Result<Uuid, GatewayError> {
        s.validate()?;
        let id = s.sub_id;
        {
            let mut reg = self.registry.write();
            if reg.subscriptions.contains_key(&id) {
                return Err(GatewayError::Invalid(format!("subscription {id} exists")));
            }
            self.append_admin(&mut reg, AdminRecord::SubscriptionAdded { subscription: s })?;
        }
        self.after_change()?;
        Ok(id)
    }

    pub fn unsubscribe(&self, sub_id: Uuid) -> Result<(), GatewayError> {
        {
            let mut reg = self.registry.write();
            if !reg.subscriptions.contains_key(&sub_id) {
                return Err(GatewayError::UnknownSub(sub_id));
            }
            self.append_admin(&mut reg, AdminRecord::SubscriptionRemoved { sub_id })?;
        }
        self.after_change()
    }

    pub fn subscription(&self, sub_id: Uuid) -> Option<Subscription> {
        self.registry.read().subscriptions.get(&sub_id).cloned()
    }

    /// Feeds new log events to the notification engine, in order.
    fn pump_notifications(&self) {
        let mut st = self.notify.lock();
        let now = self.now();
        let events = self.store.events_since(st.engine.last_seq());
        for ev in events {
            for n in st.engine.evaluate(&ev, now) {
                let key = (n.sub_id, n.evidence.seq);
                let url = st.engine.subscription(n.sub_id).map(|s| s.subscriber.clone());
                if let Some(url) = url.filter(|u| is_http(u)) {
                    if st.queued.insert(key) {
                        st.outbox.push_back(Outgoing { url, notification: n.clone(), attempts: 0, next_at: now });
                    }
                }
                if st.log.len() == NOTIFICATION_LOG_CAPACITY {
                    st.log.pop_front();
                }
                st.log.push_back(n);
                st.total += 1;
            }
        }
    }

    /// Notifications fired so far (the most recent ones, if the log wrapped).
    pub fn notifications(&self) -> Vec<Notification> {
        self.notify.lock().log.iter().cloned().collect()
    }

    pub fn notification_count(&self) -> u64 {
        self.notify.lock().total
    }

    fn deliver_callbacks(&self, now: DateTime<Utc>) {
        let due: Vec<Outgoing> = {
            let mut st = self.notify.lock();
            let (due, wait): (Vec<_>, Vec<_>) = st.outbox.drain(..).partition(|o| o.next_at <= now);
            st.outbox = wait.into();
            due
        };
        let policy = self.config.retry_policy();
        let mut retry = Vec::new();
        for mut o in due {
            o.attempts += 1;
            match self.agent.post(&o.url).send_json(&o.notification) {
                Ok(_) => {}
                Err(e) if o.attempts < policy.attempts => {
                    tracing::debug!(url = %o.url, "notification delivery failed, will retry: {e}");
                    o.next_at = now + policy.backoff(o.attempts);
                    retry.push(o);
                }
                Err(e) => {
                    tracing::warn!(url = %o.url, sub = %o.notification.sub_id, "notification dropped after {} attempts: {e}", o.attempts);
                }
            }
        }
        self.notify.lock().outbox.extend(retry);
    }

    // ---- transactions ----

    pub fn begin_txn(&self) -> Result<TxnId, GatewayError> {
        Ok(self.txns.begin()?)
    }

    pub fn begin_txn_with_id(&self, id: TxnId) -> Result<TxnId, GatewayError> {
        Ok(self.txns.begin_with_id(id)?)
    }

    /// Enlists an HTTP participant by its callback URL.
    pub fn enlist_http(&self, txn: &TxnId, url: &str) -> Result<(), GatewayError> {
        if !is_http(url) {
            return Err(GatewayError::Invalid(format!("participant url `{url}` is not http(s)")));
        }
        let p = HttpParticipant::new(url, self.config.prepare_timeout());
        Ok(self.txns.enlist(txn, Arc::new(p))?)
    }

    pub fn enlist(&self, txn: &TxnId, participant: Arc<dyn Participant>) -> Result<(), GatewayError> {
        Ok(self.txns.enlist(txn, participant)?)
    }

    pub fn commit_txn(&self, txn: &TxnId, prepare_timeout: Option<Duration>) -> Result<Outcome, GatewayError> {
        let out = self
            .txns
            .commit(txn, prepare_timeout.unwrap_or_else(|| self.config.prepare_timeout()))?;
        self.after_change()?;
        Ok(out)
    }

    pub fn abort_txn(&self, txn: &TxnId) -> Result<(), GatewayError> {
        self.txns.abort(txn)?;
        self.after_change()
    }

    // ---- charging ----

    fn charge_inner(&self, account: &str, units: Decimal, resource: String) -> Result<ChargeRecord, GatewayError> {
        if units.is_sign_negative() && !units.is_zero() {
            return Err(GatewayError::NegativeUnits);
        }
        let charge = ChargeRecord {
            account_id: account.to_owned(),
            units,
            resource,
            at: self.now(),
        };
        let mut reg = self.registry.write();
        self.append_admin(&mut reg, AdminRecord::ChargeRecorded { charge: charge.clone() })?;
        Ok(charge)
    }

    pub fn charge(&self, account: &str, units: Decimal, resource: &str) -> Result<ChargeRecord, GatewayError> {
        if account.is_empty() {
            return Err(GatewayError::Invalid("empty accountId".into()));
        }
        let c = self.charge_inner(account, units, resource.to_owned())?;
        self.after_change()?;
        Ok(c)
    }

    pub fn balance(&self, account: &str) -> Decimal {
        self.registry.read().balances.get(account).copied().unwrap_or(Decimal::ZERO)
    }

    // ---- sessions and /a/do ----

    fn touch_session(&self, a: &str, b: &str, now: DateTime<Utc>) {
        let mut sessions = self.sessions.lock();
        let key = (a.to_owned(), b.to_owned());
        let fresh = || SessionRecord {
            session_id: self.runtime.ids.uuid(),
            endpoints: key.clone(),
            state: SessionState::Active,
            last_activity: now,
        };
        match sessions.get_mut(&key) {
            Some(s) if s.state == SessionState::Active => s.last_activity = now,
            _ => {
                sessions.insert(key.clone(), fresh());
            }
        }
    }

    pub fn sessions(&self) -> Vec<SessionRecord> {
        let mut v: Vec<_> = self.sessions.lock().values().cloned().collect();
        v.sort_by(|a, b| a.endpoints.cmp(&b.endpoints));
        v
    }

    fn dispatch_do(&self, req: &DoRequest) -> Result<(), GatewayError> {
        if !self.is_registered(&req.requestor.to_string()) {
            return Err(GatewayError::UnknownObject(req.requestor.to_string()));
        }
        if req.responders.is_empty() {
            return Err(GatewayError::Invalid("no responders".into()));
        }
        if req.commands.is_empty() {
            return Err(GatewayError::Invalid("no commands".into()));
        }
        for r in &req.responders {
            if !self.is_registered(&r.to_string()) {
                return Err(GatewayError::UnknownObject(r.to_string()));
            }
        }
        if let Some(txn) = &req.transaction_id {
            match self.txns.state(txn) {
                None => return Err(TxnError::UnknownTxn(txn.clone()).into()),
                Some(TxnState::Open) => {}
                Some(s) => return Err(TxnError::TxnClosed(txn.clone(), s).into()),
            }
        }
        let class = if req.transaction_id.is_some() {
            DeliveryClass::Transactional
        } else {
            DeliveryClass::Confirmed
        };
        let sender = req.requestor.to_string();
        let now = self.now();
        for r in &req.responders {
            let responder = r.to_string();
            for c in &req.commands {
                let payload = DataElement::with_id(
                    self.runtime.ids.uuid(),
                    vec![Triple::string("command", c.as_str()).map_err(CodecError::from)?],
                    vec![],
                )
                .map_err(CodecError::from)?;
                self.send_message(Message {
                    msg_id: self.runtime.ids.uuid(),
                    sender: sender.clone(),
                    target: Target::Single { target: responder.clone() },
                    payload,
                    delivery_class: class,
                    txn_id: req.transaction_id.clone(),
                })?;
            }
            self.touch_session(&sender, &responder, now);
        }
        Ok(())
    }

    /// Dispatches every command to every responder as a confirmed message
    /// (transactional when the request names a transaction).
    pub fn handle_do(&self, req: &DoRequest) -> DoResponse {
        let result = match self.dispatch_do(req) {
            Ok(()) => 200,
            Err(e) => {
                tracing::debug!(requestor = %req.requestor, "do request failed: {e}");
                e.status()
            }
        };
        DoResponse {
            requestor: req.requestor,
            timestamp: with_offset(self.now(), self.config.utc_offset_minutes),
            responders: req.responders.clone(),
            result,
        }
    }

    // ---- time ----

    /// Runs timers: message retries, heartbeat deadlines, idle sessions and
    /// notification callbacks.
    pub fn tick(&self) -> Result<(), GatewayError> {
        let now = self.now();
        self.broker.tick(now)?;
        {
            let mut reg = self.registry.write();
            let expired: Vec<ObjectId> = reg
                .objects
                .values()
                .filter(|o| o.online && now > o.last_heartbeat + o.heartbeat_deadline)
                .map(|o| o.object_id.clone())
                .collect();
            for object_id in expired {
                self.append_admin(&mut reg, AdminRecord::PresenceChanged { object_id, online: false })?;
            }
        }
        let idle = chrono::Duration::seconds(self.config.session_idle_secs as i64);
        for s in self.sessions.lock().values_mut() {
            if s.state == SessionState::Active && now - s.last_activity > idle {
                s.state = SessionState::Closed;
            }
        }
        self.after_change()?;
        self.deliver_callbacks(now);
        Ok(())
    }

    // ---- introspection ----

    pub fn stats(&self) -> Stats {
        let reg = self.registry.read();
        let (elements, entities) = self.store.with_snapshot(|s| (s.element_count(), s.entity_count()));
        Stats {
            events: self.store.last_seq(),
            elements,
            entities,
            objects: reg.objects.len(),
            groups: reg.groups.len(),
            subscriptions: reg.subscriptions.len(),
            transactions: self.txns.records().len(),
            charges: reg.charges,
        }
    }

    /// Digest over the element snapshot, registries, broker and transaction
    /// state. Two gateways with equal digests hold the same durable state.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("snapshot {}\n", self.store.snapshot_digest()));
        self.registry.read().digest_into(&mut h);
        h.update(format!("broker {}\n", self.broker.digest()));
        for r in self.txns.records() {
            h.update(format!("txn {}\n", serde_json::to_string(&r).expect("record serializes")));
        }
        hex::encode(h.finalize())
    }

    pub fn log(&self) -> EventLog {
        self.store.log()
    }
}
