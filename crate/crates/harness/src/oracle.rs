//! Reference models the simulator checks the gateway against. They share no
//! code with the gateway: geometry, membership and edge detection are
//! written out again here, and the inbox check is a plain multiset count.

use std::collections::{BTreeMap, HashMap};

use openm2m::notify::Cause;

const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Counts how many times each item occurs beyond the first.
pub fn duplicate_count<T: std::hash::Hash + Eq>(items: impl IntoIterator<Item = T>) -> u64 {
    let mut seen: HashMap<T, u64> = HashMap::new();
    for it in items {
        *seen.entry(it).or_default() += 1;
    }
    seen.values().map(|n| n - 1).sum()
}

/// Great-circle distance from the straight chord between the two points on
/// the unit sphere.
pub fn chord_distance_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    let unit = |(lat, lon): (f64, f64)| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (p, q) = (unit(a), unit(b));
    let c = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    2.0 * (c / 2.0).min(1.0).asin() * EARTH_RADIUS_M
}

/// Inside-or-on test for a convex polygon given as `(lat, lon)` vertices in
/// either orientation: the point never lies strictly right of one edge and
/// strictly left of another.
pub fn in_convex(vertices: &[(f64, f64)], p: (f64, f64)) -> bool {
    let (mut left, mut right) = (false, false);
    for i in 0..vertices.len() {
        let (a, b) = (vertices[i], vertices[(i + 1) % vertices.len()]);
        let cross = (b.1 - a.1) * (p.0 - a.0) - (b.0 - a.0) * (p.1 - a.1);
        left |= cross > 0.0;
        right |= cross < 0.0;
    }
    !(left && right)
}

pub enum Area {
    Circle { center: (f64, f64), radius_m: f64 },
    Polygon(Vec<(f64, f64)>),
}

impl Area {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        match self {
            Area::Circle { center, radius_m } => chord_distance_m(*center, p) <= *radius_m,
            Area::Polygon(vs) => in_convex(vs, p),
        }
    }
}

/// One subscription's view of the world, replayed step by step.
pub enum Watcher {
    Band { triple: String, low: f64, high: f64, side: i8 },
    Area { area: Area, inside: bool },
    Group { attributes: BTreeMap<String, String>, explicit: bool, exists: bool, member: bool },
    Presence { deadline_ms: u64, online: bool, last_ms: u64 },
}

/// What happened to the watched device.
#[derive(Debug, Clone)]
pub enum Happening {
    /// A new latest element. Numbers and strings keep their JSON form.
    Element(BTreeMap<String, serde_json::Value>),
    GroupDeleted,
    Registered { at_ms: u64 },
    Heartbeat { at_ms: u64 },
    Offline,
    Tick { at_ms: u64 },
}

impl Watcher {
    pub fn band(triple: &str, low: f64, high: f64) -> Watcher {
        Watcher::Band { triple: triple.into(), low, high, side: 0 }
    }

    pub fn area(area: Area) -> Watcher {
        Watcher::Area { area, inside: false }
    }

    /// Starts after the group exists; `explicit` when the device is listed.
    pub fn group(attributes: BTreeMap<String, String>, explicit: bool) -> Watcher {
        Watcher::Group { attributes, explicit, exists: true, member: explicit }
    }

    /// Starts before the device registers.
    pub fn presence(deadline_ms: u64) -> Watcher {
        Watcher::Presence { deadline_ms, online: false, last_ms: 0 }
    }

    pub fn observe(&mut self, h: &Happening) -> Option<Cause> {
        match (self, h) {
            (Watcher::Band { triple, low, high, side }, Happening::Element(ts)) => {
                let v = ts.get(triple.as_str()).and_then(|v| v.as_f64())?;
                let now = if v > *high {
                    1
                } else if v < *low {
                    -1
                } else {
                    0
                };
                let was = std::mem::replace(side, now);
                match now {
                    1 if was != 1 => Some(Cause::Above),
                    -1 if was != -1 => Some(Cause::Below),
                    _ => None,
                }
            }
            (Watcher::Area { area, inside }, Happening::Element(ts)) => {
                let lat = ts.get("lat").and_then(|v| v.as_f64())?;
                let lon = ts.get("lon").and_then(|v| v.as_f64())?;
                let now = area.contains((lat, lon));
                let was = std::mem::replace(inside, now);
                flag_edge(was, now, Cause::Enter, Cause::Leave)
            }
            (Watcher::Group { attributes, explicit, exists, member }, h) => {
                let now = match h {
                    Happening::Element(ts) => {
                        *exists
                            && (*explicit
                                || (!attributes.is_empty()
                                    && attributes
                                        .iter()
                                        .all(|(k, v)| ts.get(k).and_then(|x| x.as_str()) == Some(v.as_str()))))
                    }
                    Happening::GroupDeleted => {
                        *exists = false;
                        false
                    }
                    _ => return None,
                };
                let was = std::mem::replace(member, now);
                flag_edge(was, now, Cause::Enter, Cause::Leave)
            }
            (Watcher::Presence { deadline_ms, online, last_ms }, h) => {
                let now = match *h {
                    Happening::Registered { at_ms } | Happening::Heartbeat { at_ms } => {
                        *last_ms = at_ms;
                        true
                    }
                    Happening::Offline => false,
                    Happening::Tick { at_ms } => *online && at_ms <= *last_ms + *deadline_ms,
                    _ => return None,
                };
                let was = std::mem::replace(online, now);
                flag_edge(was, now, Cause::Online, Cause::Offline)
            }
            _ => None,
        }
    }
}

fn flag_edge(was: bool, now: bool, rise: Cause, fall: Cause) -> Option<Cause> {
    match (was, now) {
        (false, true) => Some(rise),
        (true, false) => Some(fall),
        _ => None,
    }
}

/// Positions where two cause sequences disagree, plus the length difference.
pub fn sequence_diff<T: PartialEq>(a: &[T], b: &[T]) -> u64 {
    let common = a.iter().zip(b).filter(|(x, y)| x != y).count();
    (common + a.len().abs_diff(b.len())) as u64
}

/// Any-mode deliveries spread over `members` must each land within one of
/// the even share.
pub fn fair_bounds(sends: u64, members: u64) -> (u64, u64) {
    (sends / members - 1, sends.div_ceil(members) + 1)
}
