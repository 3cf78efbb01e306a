//! Administrative records. Groups, subscriptions, transactions, message
//! bookkeeping, presence and charges persist through the same event log as
//! elements, so a restart rebuilds all of them by replay.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::broker::Message;
use crate::model::Triple;
use crate::notify::Subscription;
use crate::txn::{Decision, TxnId, TxnState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
pub enum AdminRecord {
    #[serde(rename_all = "camelCase")]
    ObjectRegistered {
        object_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        callback: Option<String>,
        heartbeat_deadline_ms: u64,
    },
    #[serde(rename_all = "camelCase")]
    ObjectRemoved { object_id: String },
    #[serde(rename_all = "camelCase")]
    PresenceChanged { object_id: String, online: bool },

    #[serde(rename_all = "camelCase")]
    GroupCreated {
        group_id: Uuid,
        defining_attributes: Vec<Triple>,
        explicit_members: BTreeSet<String>,
    },
    #[serde(rename_all = "camelCase")]
    GroupDeleted { group_id: Uuid },

    #[serde(rename_all = "camelCase")]
    SubscriptionAdded { subscription: Subscription },
    #[serde(rename_all = "camelCase")]
    SubscriptionRemoved { sub_id: Uuid },

    #[serde(rename_all = "camelCase")]
    TxnBegun { txn_id: TxnId },
    #[serde(rename_all = "camelCase")]
    TxnEnlisted { txn_id: TxnId, participant: String },
    #[serde(rename_all = "camelCase")]
    TxnPreparing { txn_id: TxnId },
    #[serde(rename_all = "camelCase")]
    TxnDecided {
        txn_id: TxnId,
        state: TxnState,
        decisions: BTreeMap<String, Decision>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    /// Phase two reached every participant.
    #[serde(rename_all = "camelCase")]
    TxnCompleted { txn_id: TxnId },

    #[serde(rename_all = "camelCase")]
    MessageAccepted { message: Message, recipients: Vec<String> },
    #[serde(rename_all = "camelCase")]
    MessageReceived { recipient: String, msg_id: Uuid },
    #[serde(rename_all = "camelCase")]
    MessageAcked { recipient: String, msg_id: Uuid },
    #[serde(rename_all = "camelCase")]
    MessageExpired { recipient: String, msg_id: Uuid },

    #[serde(rename_all = "camelCase")]
    ChargeRecorded { charge: ChargeRecord },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChargeRecord {
    pub account_id: String,
    pub units: Decimal,
    pub resource: String,
    pub at: DateTime<Utc>,
}
