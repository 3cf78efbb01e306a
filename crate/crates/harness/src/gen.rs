//! Seeded random elements.

use chrono::{FixedOffset, TimeZone};
use openm2m::model::{ContextElement, DataElement, Element, Triple, Value};
use rand::seq::SliceRandom;
use rand::Rng;
use uuid::Uuid;

const ALNUM: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const NASTY: &[&str] = &["<", ">", "&", "\"", "'", " ", "é", "日本", "\u{1F600}", "]]>", "\t"];

fn word(rng: &mut impl Rng, min: usize, max: usize) -> String {
    let n = rng.gen_range(min..=max);
    (0..n).map(|_| *ALNUM.choose(rng).expect("nonempty") as char).collect()
}

fn text(rng: &mut impl Rng) -> String {
    let mut s = String::new();
    for _ in 0..rng.gen_range(0..6) {
        if rng.gen_bool(0.3) {
            s.push_str(NASTY.choose(rng).expect("nonempty"));
        } else {
            s.push_str(&word(rng, 1, 4));
        }
    }
    s
}

fn number(rng: &mut impl Rng) -> f64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-100i64..100) as f64,
        1 => rng.gen_range(-1e6..1e6),
        2 => loop {
            let f = f64::from_bits(rng.gen());
            if f.is_finite() {
                break f;
            }
        },
        _ => (rng.gen_range(-100_000i64..100_000) as f64) / 100.0,
    }
}

pub fn value(rng: &mut impl Rng) -> Value {
    match rng.gen_range(0..5) {
        0 => Value::String(text(rng)),
        1 => Triple::number("n", number(rng)).expect("finite").value().clone(),
        2 => Value::Boolean(rng.gen()),
        3 => {
            let off = FixedOffset::east_opt(rng.gen_range(-12..=14) * 3600).expect("in range");
            let t = off
                .timestamp_millis_opt(rng.gen_range(0..4_000_000_000_000))
                .single()
                .expect("unambiguous");
            Value::Timestamp(t.format("%Y-%m-%dT%H:%M:%S%.3f%:z").to_string())
        }
        _ => Value::Uri(format!("http://example.org/{}/{}", word(rng, 1, 6), word(rng, 1, 6))),
    }
}

pub fn triples(rng: &mut impl Rng, max: usize) -> Vec<Triple> {
    let mut names = std::collections::BTreeSet::new();
    for _ in 0..rng.gen_range(0..=max) {
        names.insert(format!("{}{}", word(rng, 1, 1), word(rng, 0, 6)));
    }
    let mut ts: Vec<Triple> = names
        .into_iter()
        .map(|n| Triple::new(n, value(rng)).expect("valid triple"))
        .collect();
    ts.shuffle(rng);
    ts
}

pub fn element(rng: &mut impl Rng) -> Element {
    let data = DataElement::with_id(Uuid::from_u128(rng.gen()), triples(rng, 8), triples(rng, 3))
        .expect("valid element");
    if rng.gen_bool(0.5) {
        return Element::Data(data);
    }
    let first = data.triples().first().map(|t| t.name().to_owned());
    let mut c = ContextElement::new(data, format!("urn:dev:{}", word(rng, 1, 8)), format!("T{}", word(rng, 0, 8)))
        .expect("valid identity");
    if let Some(name) = first {
        c = c.with_attribute_metadata(&name, triples(rng, 3)).expect("attribute exists");
    }
    Element::Context(c)
}
