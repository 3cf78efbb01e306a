//! OGC Observations & Measurements ingest, limited to the single-observation
//! shape: `gml:name`, `om:phenomenonTime/gml:TimeInstant/gml:timePosition`
//! and an `om:parameter/om:NamedValue` carrying the measured value with `uom`.

use chrono::NaiveDateTime;
use uuid::Uuid;

use super::dom::{self, Node};
use super::CodecError;
use crate::model::{ContextElement, DataElement, Number, Triple, Value};

pub const OBSERVATION_TYPE: &str = "Observation";

pub fn parse_om_observation(xml: &[u8]) -> Result<ContextElement, CodecError> {
    parse_om_observation_with_id(xml, Uuid::new_v4())
}

/// Times without an offset are taken as UTC and gain a `Z` designator; the
/// rest of the lexical form (including fractional digits) is kept.
fn normalize_time(s: &str) -> Result<String, CodecError> {
    if chrono::DateTime::parse_from_rfc3339(s).is_ok() {
        return Ok(s.to_owned());
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f")
        .map(|_| format!("{s}Z"))
        .map_err(|e| CodecError::OmMalformed(format!("timePosition `{s}`: {e}")))
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn named_value(root: &Node) -> Option<&Node> {
    root.children_named("parameter")
        .filter_map(|p| p.child("NamedValue"))
        .find(|nv| nv.child("value").is_some())
}

pub fn parse_om_observation_with_id(xml: &[u8], id: Uuid) -> Result<ContextElement, CodecError> {
    let root = dom::parse(xml).map_err(CodecError::OmMalformed)?;
    if !root.name.ends_with("Observation") {
        return Err(CodecError::OmMalformed(format!(
            "expected an Observation, found <{}>",
            root.name
        )));
    }
    let name = root
        .child("name")
        .map(|n| collapse_ws(&n.text))
        .filter(|n| !n.is_empty())
        .ok_or_else(|| CodecError::OmMalformed("missing gml:name".into()))?;
    let time = root
        .child("phenomenonTime")
        .and_then(|p| p.descendant("timePosition"))
        .map(Node::trimmed_text)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CodecError::OmMalformed("missing phenomenonTime".into()))?;

    let mut triples = vec![
        Triple::string("name", name.clone())?,
        Triple::timestamp("phenomenonTime", normalize_time(time)?)?,
    ];

    let nv = named_value(&root).ok_or(CodecError::MissingObservationValue)?;
    if let Some(href) = nv.child("name").and_then(|n| n.attr("href")) {
        triples.push(Triple::uri("parameter", href.trim()).map_err(|e| {
            CodecError::OmMalformed(format!("parameter reference: {e}"))
        })?);
    }
    let value_node = nv.child("value").ok_or(CodecError::MissingObservationValue)?;
    let raw = value_node.trimmed_text();
    if raw.is_empty() {
        return Err(CodecError::MissingObservationValue);
    }
    let number: Number = raw
        .parse()
        .map_err(|()| CodecError::OmMalformed(format!("value `{raw}` is not a number")))?;
    triples.push(Triple::new("value", Value::Number(number))?);
    if let Some(uom) = value_node.attr("uom") {
        triples.push(Triple::string("uom", uom)?);
    }

    let mut metadata = Vec::new();
    if let Some(d) = root.child("description") {
        let d = collapse_ws(&d.text);
        if !d.is_empty() {
            metadata.push(Triple::string("description", d)?);
        }
    }

    let entity_id = root.attr("id").map(str::to_owned).unwrap_or(name);
    let data = DataElement::with_id(id, triples, metadata)?;
    Ok(ContextElement::new(data, entity_id, OBSERVATION_TYPE)?)
}
