use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::model::Triple;
use crate::store::Snapshot;

/// An addressable set of objects: the explicit members plus every entity
/// whose latest element carries all defining attribute triples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Group {
    pub group_id: Uuid,
    #[serde(default)]
    pub defining_attributes: Vec<Triple>,
    #[serde(default)]
    pub explicit_members: BTreeSet<String>,
}

impl Group {
    pub fn is_empty_definition(&self) -> bool {
        self.defining_attributes.is_empty() && self.explicit_members.is_empty()
    }

    pub fn is_member(&self, object_id: &str, snapshot: &Snapshot) -> bool {
        if self.explicit_members.contains(object_id) {
            return true;
        }
        if self.defining_attributes.is_empty() {
            return false;
        }
        snapshot
            .latest_for_entity(object_id)
            .is_some_and(|se| {
                self.defining_attributes
                    .iter()
                    .all(|a| se.element.triple(a.name()) == Some(a))
            })
    }

    pub fn members(&self, snapshot: &Snapshot) -> BTreeSet<String> {
        let mut out = self.explicit_members.clone();
        if !self.defining_attributes.is_empty() {
            out.extend(
                snapshot
                    .entity_ids()
                    .filter(|e| self.is_member(e, snapshot))
                    .map(str::to_owned),
            );
        }
        out
    }
}
