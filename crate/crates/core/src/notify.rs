//! Predicate subscriptions over the change feed.
//!
//! The engine consumes every event in sequence order and keeps its own view
//! of elements, groups and presence, so evaluation depends only on the log
//! prefix seen so far. Predicates are edge-triggered per subscription: a
//! notification fires when the predicate's state changes, except alarms,
//! which fire on every matching reading.

use std::collections::{BTreeMap, HashMap};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::admin::AdminRecord;
use crate::group::Group;
use crate::model::Element;
use crate::store::{Event, Snapshot};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum Shape {
    #[serde(rename_all = "camelCase")]
    Circle { center: LatLon, radius_m: f64 },
    /// Convex polygon; longitude is x, latitude is y.
    Polygon { vertices: Vec<LatLon> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum Predicate {
    #[serde(rename_all = "camelCase")]
    GroupChange { group_id: Uuid },
    #[serde(rename_all = "camelCase")]
    Geofence { area_id: String, shape: Shape },
    #[serde(rename_all = "camelCase")]
    Band { triple_name: String, low: f64, high: f64 },
    #[serde(rename_all = "camelCase")]
    Alarm { triple_name: String },
    #[serde(rename_all = "camelCase")]
    Presence { object_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Subscription {
    pub sub_id: Uuid,
    /// Callback address. `http(s)://` URLs receive JSON POSTs.
    pub subscriber: String,
    pub registrar: String,
    pub target: String,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad predicate: {0}")]
pub struct BadPredicate(pub String);

fn valid_point(p: &LatLon) -> bool {
    p.lat.is_finite() && p.lon.is_finite() && (-90.0..=90.0).contains(&p.lat) && (-180.0..=180.0).contains(&p.lon)
}

impl Shape {
    pub fn validate(&self) -> Result<(), BadPredicate> {
        match self {
            Shape::Circle { center, radius_m } => {
                if !valid_point(center) {
                    return Err(BadPredicate("circle center out of range".into()));
                }
                if !(radius_m.is_finite() && *radius_m > 0.0) {
                    return Err(BadPredicate("circle radius must be positive".into()));
                }
            }
            Shape::Polygon { vertices } => {
                if vertices.len() < 3 {
                    return Err(BadPredicate("polygon needs at least 3 vertices".into()));
                }
                if !vertices.iter().all(valid_point) {
                    return Err(BadPredicate("polygon vertex out of range".into()));
                }
                let n = vertices.len();
                let mut sign = 0.0f64;
                for i in 0..n {
                    let (a, b, c) = (vertices[i], vertices[(i + 1) % n], vertices[(i + 2) % n]);
                    let z = (b.lon - a.lon) * (c.lat - b.lat) - (b.lat - a.lat) * (c.lon - b.lon);
                    if z == 0.0 {
                        continue;
                    }
                    if sign != 0.0 && z.signum() != sign {
                        return Err(BadPredicate("polygon is not convex".into()));
                    }
                    sign = z.signum();
                }
                if sign == 0.0 {
                    return Err(BadPredicate("polygon is degenerate".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: LatLon) -> bool {
        match self {
            Shape::Circle { center, radius_m } => haversine_m(*center, p) <= *radius_m,
            Shape::Polygon { vertices } => in_polygon(vertices, p),
        }
    }
}

pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = (b.lat - a.lat).to_radians();
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Winding-number test; points on an edge count as inside.
fn in_polygon(vs: &[LatLon], p: LatLon) -> bool {
    let cross = |a: LatLon, b: LatLon| (b.lon - a.lon) * (p.lat - a.lat) - (p.lon - a.lon) * (b.lat - a.lat);
    let mut winding = 0i32;
    for i in 0..vs.len() {
        let (a, b) = (vs[i], vs[(i + 1) % vs.len()]);
        let c = cross(a, b);
        if c == 0.0
            && p.lon >= a.lon.min(b.lon)
            && p.lon <= a.lon.max(b.lon)
            && p.lat >= a.lat.min(b.lat)
            && p.lat <= a.lat.max(b.lat)
        {
            return true;
        }
        if a.lat <= p.lat {
            if b.lat > p.lat && c > 0.0 {
                winding += 1;
            }
        } else if b.lat <= p.lat && c < 0.0 {
            winding -= 1;
        }
    }
    winding != 0
}

impl Predicate {
    pub fn validate(&self) -> Result<(), BadPredicate> {
        match self {
            Predicate::Band { triple_name, low, high } => {
                if triple_name.is_empty() {
                    return Err(BadPredicate("band needs a triple name".into()));
                }
                if !(low.is_finite() && high.is_finite()) || low >= high {
                    return Err(BadPredicate(format!("band requires low < high, got [{low}, {high}]")));
                }
            }
            Predicate::Geofence { area_id, shape } => {
                if area_id.is_empty() {
                    return Err(BadPredicate("geofence needs an area id".into()));
                }
                shape.validate()?;
            }
            Predicate::Alarm { triple_name } if triple_name.is_empty() => {
                return Err(BadPredicate("alarm needs a triple name".into()));
            }
            Predicate::Presence { object_id } if object_id.is_empty() => {
                return Err(BadPredicate("presence needs an object id".into()));
            }
            _ => {}
        }
        Ok(())
    }
}

impl Subscription {
    pub fn validate(&self) -> Result<(), BadPredicate> {
        if self.target.is_empty() {
            return Err(BadPredicate("empty target".into()));
        }
        self.predicate.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Enter,
    Leave,
    Above,
    Below,
    Alarm,
    Online,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Notification {
    pub sub_id: Uuid,
    pub cause: Cause,
    pub fired_at: DateTime<Utc>,
    pub evidence: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Below,
    Inside,
    Above,
}

pub fn band_zone(v: f64, low: f64, high: f64) -> Zone {
    if v < low {
        Zone::Below
    } else if v > high {
        Zone::Above
    } else {
        Zone::Inside
    }
}

/// Position carried by an element as numeric `lat`/`lon` triples.
pub fn position(e: &Element) -> Option<LatLon> {
    let lat = e.triple("lat")?.value().as_number()?;
    let lon = e.triple("lon")?.value().as_number()?;
    Some(LatLon { lat, lon })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum State {
    Band(Zone),
    Flag(bool),
    Stateless,
}

#[derive(Debug, Clone)]
struct Active {
    sub: Subscription,
    state: State,
}

#[derive(Default)]
pub struct NotifyEngine {
    view: Snapshot,
    groups: BTreeMap<Uuid, Group>,
    online: BTreeMap<String, bool>,
    subs: BTreeMap<u64, Active>,
    order: HashMap<Uuid, u64>,
    next: u64,
}

impl NotifyEngine {
    pub fn new() -> NotifyEngine {
        NotifyEngine::default()
    }

    pub fn last_seq(&self) -> u64 {
        self.view.last_seq()
    }

    pub fn subscription(&self, id: Uuid) -> Option<&Subscription> {
        self.order.get(&id).map(|o| &self.subs[o].sub)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subs.values().map(|a| &a.sub)
    }

    fn is_member(&self, group: Uuid, object: &str) -> bool {
        self.groups
            .get(&group)
            .is_some_and(|g| g.is_member(object, &self.view))
    }

    /// State of a predicate against the current view, used when a
    /// subscription starts. Band and geofence look at the target's latest
    /// element; without a usable reading they start inside the band and
    /// outside the area.
    fn initial_state(&self, s: &Subscription) -> State {
        let latest = self.view.latest_for_entity(&s.target).map(|se| &se.element);
        match &s.predicate {
            Predicate::Band { triple_name, low, high } => State::Band(
                latest
                    .and_then(|e| e.triple(triple_name))
                    .and_then(|t| t.value().as_number())
                    .map_or(Zone::Inside, |v| band_zone(v, *low, *high)),
            ),
            Predicate::Geofence { shape, .. } => {
                State::Flag(latest.and_then(position).is_some_and(|p| shape.contains(p)))
            }
            Predicate::GroupChange { group_id } => State::Flag(self.is_member(*group_id, &s.target)),
            Predicate::Presence { object_id } => {
                State::Flag(self.online.get(object_id).copied().unwrap_or(false))
            }
            Predicate::Alarm { .. } => State::Stateless,
        }
    }

    /// Feeds one event. Events must arrive in sequence order.
    pub fn evaluate(&mut self, ev: &Event, now: DateTime<Utc>) -> Vec<Notification> {
        self.view.apply(ev);
        let mut group_touched = None;
        let mut presence_touched = None;
        match ev.admin() {
            Some(AdminRecord::SubscriptionAdded { subscription }) => {
                let state = self.initial_state(subscription);
                self.next += 1;
                self.order.insert(subscription.sub_id, self.next);
                self.subs.insert(self.next, Active { sub: subscription.clone(), state });
                return Vec::new();
            }
            Some(AdminRecord::SubscriptionRemoved { sub_id }) => {
                if let Some(o) = self.order.remove(sub_id) {
                    self.subs.remove(&o);
                }
                return Vec::new();
            }
            Some(AdminRecord::GroupCreated { group_id, defining_attributes, explicit_members }) => {
                self.groups.insert(
                    *group_id,
                    Group {
                        group_id: *group_id,
                        defining_attributes: defining_attributes.clone(),
                        explicit_members: explicit_members.clone(),
                    },
                );
                group_touched = Some(*group_id);
            }
            Some(AdminRecord::GroupDeleted { group_id }) => {
                self.groups.remove(group_id);
                group_touched = Some(*group_id);
            }
            Some(AdminRecord::PresenceChanged { object_id, online }) => {
                self.online.insert(object_id.clone(), *online);
                presence_touched = Some(object_id.as_str());
            }
            Some(AdminRecord::ObjectRemoved { object_id }) => {
                self.online.insert(object_id.clone(), false);
                presence_touched = Some(object_id.as_str());
            }
            _ => {}
        }
        let element = ev.element();
        let subject = element.and_then(Element::entity_id);

        let mut out = Vec::new();
        let orders: Vec<u64> = self.subs.keys().copied().collect();
        for o in orders {
            let (sub, state) = {
                let a = &self.subs[&o];
                (a.sub.clone(), a.state)
            };
            let for_target = subject == Some(sub.target.as_str());
            let fired = match (&sub.predicate, state) {
                (Predicate::Band { triple_name, low, high }, State::Band(zone)) if for_target => {
                    match element.and_then(|e| e.triple(triple_name)).and_then(|t| t.value().as_number()) {
                        Some(v) => {
                            let z = band_zone(v, *low, *high);
                            self.subs.get_mut(&o).expect("present").state = State::Band(z);
                            match z {
                                _ if z == zone => None,
                                Zone::Above => Some(Cause::Above),
                                Zone::Below => Some(Cause::Below),
                                Zone::Inside => None,
                            }
                        }
                        None => None,
                    }
                }
                (Predicate::Geofence { shape, .. }, State::Flag(inside)) if for_target => {
                    match element.and_then(position) {
                        Some(p) => {
                            let now_inside = shape.contains(p);
                            self.subs.get_mut(&o).expect("present").state = State::Flag(now_inside);
                            match (inside, now_inside) {
                                (false, true) => Some(Cause::Enter),
                                (true, false) => Some(Cause::Leave),
                                _ => None,
                            }
                        }
                        None => None,
                    }
                }
                (Predicate::GroupChange { group_id }, State::Flag(member))
                    if for_target || group_touched == Some(*group_id) =>
                {
                    let now_member = self.is_member(*group_id, &sub.target);
                    self.subs.get_mut(&o).expect("present").state = State::Flag(now_member);
                    match (member, now_member) {
                        (false, true) => Some(Cause::Enter),
                        (true, false) => Some(Cause::Leave),
                        _ => None,
                    }
                }
                (Predicate::Presence { object_id }, State::Flag(was))
                    if presence_touched == Some(object_id.as_str()) =>
                {
                    let now_online = self.online[object_id];
                    self.subs.get_mut(&o).expect("present").state = State::Flag(now_online);
                    match (was, now_online) {
                        (false, true) => Some(Cause::Online),
                        (true, false) => Some(Cause::Offline),
                        _ => None,
                    }
                }
                (Predicate::Alarm { triple_name }, _) if for_target => element
                    .and_then(|e| e.triple(triple_name))
                    .and_then(|t| t.value().as_bool())
                    .filter(|b| *b)
                    .map(|_| Cause::Alarm),
                _ => None,
            };
            if let Some(cause) = fired {
                out.push(Notification { sub_id: sub.sub_id, cause, fired_at: now, evidence: ev.clone() });
            }
        }
        out
    }
}
