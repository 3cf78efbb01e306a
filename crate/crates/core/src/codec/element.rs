use std::collections::BTreeMap;

use serde::Deserialize;
use uuid::Uuid;

use super::dom::{self, escape_attr, Node};
use super::{CodecError, Format, OPENM2M_NS};
use crate::model::{ContextElement, DataElement, Element, ModelError, Triple, TypeTag};

pub fn encode_element(element: &Element, format: Format) -> Vec<u8> {
    match format {
        Format::Json => serde_json::to_vec(element).expect("element serializes"),
        Format::Xml => encode_xml(element).into_bytes(),
    }
}

pub fn decode_element(bytes: &[u8], format: Format) -> Result<Element, CodecError> {
    match format {
        Format::Json => decode_json(bytes),
        Format::Xml => decode_xml(bytes),
    }
}

fn push_triple(t: &Triple, out: &mut String) {
    out.push_str("<triple name=\"");
    escape_attr(t.name(), out);
    out.push_str("\" type=\"");
    out.push_str(t.type_tag().as_str());
    out.push_str("\" value=\"");
    escape_attr(&t.value().lexical(), out);
    out.push_str("\"/>");
}

fn push_triples(tag: &str, ts: &[Triple], out: &mut String) {
    if ts.is_empty() {
        out.push_str(&format!("<{tag}/>"));
        return;
    }
    out.push_str(&format!("<{tag}>"));
    ts.iter().for_each(|t| push_triple(t, out));
    out.push_str(&format!("</{tag}>"));
}

fn encode_xml(element: &Element) -> String {
    let mut out = String::from(super::XML_DECLARATION);
    out.push_str("<element xmlns=\"");
    out.push_str(OPENM2M_NS);
    out.push_str("\" elementId=\"");
    out.push_str(&element.element_id().to_string());
    out.push('"');
    if let Some((id, ty)) = element.entity() {
        out.push_str(" entityId=\"");
        escape_attr(id, &mut out);
        out.push_str("\" entityType=\"");
        escape_attr(ty, &mut out);
        out.push('"');
    }
    out.push('>');
    push_triples("triples", element.triples(), &mut out);
    push_triples("metadata", element.metadata(), &mut out);
    if let Some(attr_meta) = element.attribute_metadata().filter(|m| !m.is_empty()) {
        out.push_str("<attributeMetadata>");
        for (attr, meta) in attr_meta {
            out.push_str("<attribute name=\"");
            escape_attr(attr, &mut out);
            out.push_str("\">");
            meta.iter().for_each(|t| push_triple(t, &mut out));
            out.push_str("</attribute>");
        }
        out.push_str("</attributeMetadata>");
    }
    out.push_str("</element>");
    out
}

fn xml_err(reason: impl Into<String>) -> CodecError {
    CodecError::Malformed { format: Format::Xml, reason: reason.into() }
}

fn json_err(reason: impl Into<String>) -> CodecError {
    CodecError::Malformed { format: Format::Json, reason: reason.into() }
}

fn model_err(e: ModelError) -> CodecError {
    match e {
        ModelError::UnknownTypeTag(t) => CodecError::UnknownTypeTag(t),
        other => CodecError::Model(other),
    }
}

fn xml_triples(parent: Option<&Node>) -> Result<Vec<Triple>, CodecError> {
    let Some(parent) = parent else {
        return Ok(Vec::new());
    };
    parent
        .children_named("triple")
        .map(|n| {
            let name = n.attr("name").ok_or_else(|| xml_err("triple without name"))?;
            let tag = n.attr("type").ok_or_else(|| xml_err("triple without type"))?;
            let value = n.attr("value").ok_or_else(|| xml_err("triple without value"))?;
            let tag: TypeTag = tag.parse().map_err(model_err)?;
            Triple::parse(name, tag, value).map_err(model_err)
        })
        .collect()
}

fn decode_xml(bytes: &[u8]) -> Result<Element, CodecError> {
    let root = dom::parse(bytes).map_err(xml_err)?;
    if root.name != "element" {
        return Err(xml_err(format!("unexpected root `{}`", root.name)));
    }
    if root.ns.as_deref() != Some(OPENM2M_NS) {
        return Err(xml_err(format!(
            "root namespace `{}`",
            root.ns.as_deref().unwrap_or("")
        )));
    }
    let id: Uuid = root
        .attr("elementId")
        .ok_or_else(|| xml_err("missing elementId"))?
        .parse()
        .map_err(|e| xml_err(format!("elementId: {e}")))?;
    let triples = xml_triples(root.child("triples"))?;
    let metadata = xml_triples(root.child("metadata"))?;
    let data = DataElement::with_id(id, triples, metadata)?;
    let attr_meta = match root.child("attributeMetadata") {
        Some(am) => am
            .children_named("attribute")
            .map(|a| {
                let name = a.attr("name").ok_or_else(|| xml_err("attribute without name"))?;
                Ok((name.to_owned(), xml_triples(Some(a))?))
            })
            .collect::<Result<Vec<_>, CodecError>>()?,
        None => Vec::new(),
    };
    match (root.attr("entityId"), root.attr("entityType")) {
        (None, None) if attr_meta.is_empty() => Ok(Element::Data(data)),
        (id, ty) => {
            let mut ctx = ContextElement::new(data, id.unwrap_or(""), ty.unwrap_or(""))?;
            for (attr, meta) in attr_meta {
                ctx = ctx.with_attribute_metadata(&attr, meta)?;
            }
            Ok(Element::Context(ctx))
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RawDoc {
    element_id: Uuid,
    triples: Vec<RawTriple>,
    #[serde(default)]
    metadata: Vec<RawTriple>,
    entity_id: Option<String>,
    entity_type: Option<String>,
    #[serde(default)]
    attribute_metadata: BTreeMap<String, Vec<RawTriple>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTriple {
    name: String,
    #[serde(rename = "type")]
    tag: String,
    value: serde_json::Value,
}

fn json_triples(raw: Vec<RawTriple>) -> Result<Vec<Triple>, CodecError> {
    raw.into_iter()
        .map(|t| {
            let tag: TypeTag = t.tag.parse().map_err(model_err)?;
            Triple::from_json(t.name, tag, &t.value).map_err(model_err)
        })
        .collect()
}

fn decode_json(bytes: &[u8]) -> Result<Element, CodecError> {
    let raw: RawDoc = serde_json::from_slice(bytes).map_err(|e| json_err(e.to_string()))?;
    let data = DataElement::with_id(
        raw.element_id,
        json_triples(raw.triples)?,
        json_triples(raw.metadata)?,
    )?;
    match (raw.entity_id, raw.entity_type) {
        (None, None) if raw.attribute_metadata.is_empty() => Ok(Element::Data(data)),
        (id, ty) => {
            let mut ctx =
                ContextElement::new(data, id.unwrap_or_default(), ty.unwrap_or_default())?;
            for (attr, meta) in raw.attribute_metadata {
                ctx = ctx.with_attribute_metadata(&attr, json_triples(meta)?)?;
            }
            Ok(Element::Context(ctx))
        }
    }
}
