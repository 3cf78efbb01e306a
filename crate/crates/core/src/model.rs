//! Triple-based element model.
//!
//! A data element is a named collection of `<name, type, value>` triples with
//! optional metadata expressed in the same triple form. A context element is a
//! data element bound to an entity identity (`entityId`, `entityType`), with
//! optional per-attribute metadata.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use chrono::DateTime;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use uuid::Uuid;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("triple `{name}`: value does not match type `{tag}`")]
    TypeMismatch { name: String, tag: TypeTag },
    #[error("triple name must not be empty")]
    EmptyName,
    #[error("entity id and entity type must not be empty")]
    EmptyIdentity,
    #[error("unknown type tag `{0}`")]
    UnknownTypeTag(String),
    #[error("triple `{0}` contains a character that cannot be carried in XML")]
    InvalidCharacter(String),
    #[error("attribute metadata refers to missing triple `{0}`")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeTag {
    String,
    Number,
    Boolean,
    Timestamp,
    Uri,
}

impl TypeTag {
    pub const ALL: [TypeTag; 5] = [
        TypeTag::String,
        TypeTag::Number,
        TypeTag::Boolean,
        TypeTag::Timestamp,
        TypeTag::Uri,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TypeTag::String => "string",
            TypeTag::Number => "number",
            TypeTag::Boolean => "boolean",
            TypeTag::Timestamp => "timestamp",
            TypeTag::Uri => "uri",
        }
    }
}

impl fmt::Display for TypeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TypeTag {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TypeTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ModelError::UnknownTypeTag(s.to_owned()))
    }
}

/// A finite number, compared and rendered in its shortest round-trip form.
#[derive(Debug, Clone, Copy)]
pub struct Number(f64);

impl Number {
    pub fn new(v: f64) -> Option<Number> {
        if !v.is_finite() {
            return None;
        }
        // -0.0 and 0.0 render differently but are the same reading.
        Some(Number(if v == 0.0 { 0.0 } else { v }))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl PartialEq for Number {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Eq for Number {}

impl fmt::Display for Number {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Number {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        // Rust accepts "inf"/"nan" spellings; Number::new rejects them.
        s.parse::<f64>().ok().and_then(Number::new).ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    String(String),
    Number(Number),
    Boolean(bool),
    /// ISO-8601 with explicit offset, kept in its lexical form.
    Timestamp(String),
    Uri(String),
}

impl Value {
    pub fn type_tag(&self) -> TypeTag {
        match self {
            Value::String(_) => TypeTag::String,
            Value::Number(_) => TypeTag::Number,
            Value::Boolean(_) => TypeTag::Boolean,
            Value::Timestamp(_) => TypeTag::Timestamp,
            Value::Uri(_) => TypeTag::Uri,
        }
    }

    /// Canonical lexical form, as carried on both wire formats.
    pub fn lexical(&self) -> String {
        match self {
            Value::String(s) | Value::Timestamp(s) | Value::Uri(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            Value::Boolean(b) => b.to_string(),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(n.get()),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Boolean(b) => Some(*b),
            _ => None,
        }
    }

    fn text(&self) -> Option<&str> {
        match self {
            Value::String(s) | Value::Timestamp(s) | Value::Uri(s) => Some(s),
            _ => None,
        }
    }
}

pub(crate) fn is_xml_char(c: char) -> bool {
    matches!(c, '\t' | '\n' | '\r')
        || ('\u{20}'..='\u{D7FF}').contains(&c)
        || ('\u{E000}'..='\u{FFFD}').contains(&c)
        || c >= '\u{10000}'
}

fn valid_timestamp(s: &str) -> bool {
    DateTime::parse_from_rfc3339(s).is_ok()
}

fn valid_uri(s: &str) -> bool {
    let Some((scheme, rest)) = s.split_once(':') else {
        return false;
    };
    let mut chars = scheme.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
        && !rest.is_empty()
        && !s.chars().any(|c| c.is_whitespace() || c.is_control())
}

/// One `<name, type, value>` symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    name: String,
    value: Value,
}

impl Triple {
    pub fn new(name: impl Into<String>, value: Value) -> Result<Triple, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::EmptyName);
        }
        if !name.chars().all(is_xml_char) || !value.text().unwrap_or("").chars().all(is_xml_char)
        {
            return Err(ModelError::InvalidCharacter(name));
        }
        let tag = value.type_tag();
        let ok = match &value {
            Value::Timestamp(s) => valid_timestamp(s),
            Value::Uri(s) => valid_uri(s),
            _ => true,
        };
        if !ok {
            return Err(ModelError::TypeMismatch { name, tag });
        }
        Ok(Triple { name, value })
    }

    /// Build a triple from a type tag and the value's lexical form.
    pub fn parse(name: impl Into<String>, tag: TypeTag, lexical: &str) -> Result<Triple, ModelError> {
        let name = name.into();
        let mismatch = |name: String| ModelError::TypeMismatch { name, tag };
        let value = match tag {
            TypeTag::String => Value::String(lexical.to_owned()),
            TypeTag::Number => match lexical.parse::<Number>() {
                Ok(n) => Value::Number(n),
                Err(()) => return Err(mismatch(name)),
            },
            TypeTag::Boolean => match lexical.trim() {
                "true" => Value::Boolean(true),
                "false" => Value::Boolean(false),
                _ => return Err(mismatch(name)),
            },
            TypeTag::Timestamp => Value::Timestamp(lexical.trim().to_owned()),
            TypeTag::Uri => Value::Uri(lexical.trim().to_owned()),
        };
        Triple::new(name, value)
    }

    /// Build a triple from a JSON scalar whose runtime kind must agree with `tag`.
    pub fn from_json(
        name: impl Into<String>,
        tag: TypeTag,
        value: &serde_json::Value,
    ) -> Result<Triple, ModelError> {
        use serde_json::Value as J;
        let name = name.into();
        let v = match (tag, value) {
            (TypeTag::Number, J::Number(n)) => n
                .as_f64()
                .and_then(Number::new)
                .map(Value::Number),
            (TypeTag::Boolean, J::Bool(b)) => Some(Value::Boolean(*b)),
            (TypeTag::String, J::String(s)) => Some(Value::String(s.clone())),
            (TypeTag::Timestamp, J::String(s)) => Some(Value::Timestamp(s.clone())),
            (TypeTag::Uri, J::String(s)) => Some(Value::Uri(s.clone())),
            _ => None,
        };
        match v {
            Some(v) => Triple::new(name, v),
            None => Err(ModelError::TypeMismatch { name, tag }),
        }
    }

    pub fn string(name: impl Into<String>, v: impl Into<String>) -> Result<Triple, ModelError> {
        Triple::new(name, Value::String(v.into()))
    }

    pub fn number(name: impl Into<String>, v: f64) -> Result<Triple, ModelError> {
        let name = name.into();
        match Number::new(v) {
            Some(n) => Triple::new(name, Value::Number(n)),
            None => Err(ModelError::TypeMismatch { name, tag: TypeTag::Number }),
        }
    }

    pub fn boolean(name: impl Into<String>, v: bool) -> Result<Triple, ModelError> {
        Triple::new(name, Value::Boolean(v))
    }

    pub fn timestamp(name: impl Into<String>, v: impl Into<String>) -> Result<Triple, ModelError> {
        Triple::new(name, Value::Timestamp(v.into()))
    }

    pub fn uri(name: impl Into<String>, v: impl Into<String>) -> Result<Triple, ModelError> {
        Triple::new(name, Value::Uri(v.into()))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Value {
        &self.value
    }

    pub fn type_tag(&self) -> TypeTag {
        self.value.type_tag()
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        match &self.value {
            Value::Number(n) => serde_json::Number::from_f64(n.get())
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Boolean(b) => serde_json::Value::Bool(*b),
            other => serde_json::Value::String(other.lexical()),
        }
    }
}

impl Serialize for Triple {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Triple", 3)?;
        st.serialize_field("name", &self.name)?;
        st.serialize_field("type", &self.type_tag())?;
        st.serialize_field("value", &self.to_json_value())?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Triple {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            name: String,
            #[serde(rename = "type")]
            tag: String,
            value: serde_json::Value,
        }
        let raw = Raw::deserialize(d)?;
        let tag: TypeTag = raw.tag.parse().map_err(D::Error::custom)?;
        Triple::from_json(raw.name, tag, &raw.value).map_err(D::Error::custom)
    }
}

fn check_unique<'a>(names: impl Iterator<Item = &'a str>) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ModelError::DuplicateName(n.to_owned()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataElement {
    element_id: Uuid,
    triples: Vec<Triple>,
    metadata: Vec<Triple>,
}

impl DataElement {
    /// Builds an element with a fresh random id.
    pub fn new(triples: Vec<Triple>, metadata: Vec<Triple>) -> Result<DataElement, ModelError> {
        DataElement::with_id(Uuid::new_v4(), triples, metadata)
    }

    pub fn with_id(
        element_id: Uuid,
        triples: Vec<Triple>,
        metadata: Vec<Triple>,
    ) -> Result<DataElement, ModelError> {
        check_unique(triples.iter().map(Triple::name))?;
        check_unique(metadata.iter().map(Triple::name))?;
        Ok(DataElement { element_id, triples, metadata })
    }

    pub fn element_id(&self) -> Uuid {
        self.element_id
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn metadata(&self) -> &[Triple] {
        &self.metadata
    }

    pub fn triple(&self, name: &str) -> Option<&Triple> {
        self.triples.iter().find(|t| t.name == name)
    }
}

/// Builds a data element with a fresh id, preserving input order.
pub fn make_data_element(
    triples: Vec<Triple>,
    metadata: Vec<Triple>,
) -> Result<DataElement, ModelError> {
    DataElement::new(triples, metadata)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextElement {
    data: DataElement,
    entity_id: String,
    entity_type: String,
    attribute_metadata: BTreeMap<String, Vec<Triple>>,
}

impl ContextElement {
    pub fn new(
        data: DataElement,
        entity_id: impl Into<String>,
        entity_type: impl Into<String>,
    ) -> Result<ContextElement, ModelError> {
        let entity_id = entity_id.into();
        let entity_type = entity_type.into();
        if entity_id.is_empty() || entity_type.is_empty() {
            return Err(ModelError::EmptyIdentity);
        }
        if !entity_id.chars().all(is_xml_char) || !entity_type.chars().all(is_xml_char) {
            return Err(ModelError::InvalidCharacter(entity_id));
        }
        Ok(ContextElement {
            data,
            entity_id,
            entity_type,
            attribute_metadata: BTreeMap::new(),
        })
    }

    /// Attach metadata to one attribute; the attribute must be one of the triples.
    pub fn with_attribute_metadata(
        mut self,
        attribute: &str,
        metadata: Vec<Triple>,
    ) -> Result<ContextElement, ModelError> {
        if self.data.triple(attribute).is_none() {
            return Err(ModelError::UnknownAttribute(attribute.to_owned()));
        }
        check_unique(metadata.iter().map(Triple::name))?;
        self.attribute_metadata.insert(attribute.to_owned(), metadata);
        Ok(self)
    }

    pub fn data(&self) -> &DataElement {
        &self.data
    }

    pub fn entity_id(&self) -> &str {
        &self.entity_id
    }

    pub fn entity_type(&self) -> &str {
        &self.entity_type
    }

    pub fn attribute_metadata(&self) -> &BTreeMap<String, Vec<Triple>> {
        &self.attribute_metadata
    }

    /// Drops the entity identity (and attribute metadata that only exists with it).
    pub fn strip_identity(&self) -> DataElement {
        self.data.clone()
    }
}

/// Binds an entity identity to a copy of `element`.
pub fn promote_to_context(
    element: &DataElement,
    entity_id: &str,
    entity_type: &str,
) -> Result<ContextElement, ModelError> {
    ContextElement::new(element.clone(), entity_id, entity_type)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Data,
    Context,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ElementDoc", try_from = "ElementDoc")]
pub enum Element {
    Data(DataElement),
    Context(ContextElement),
}

impl Element {
    pub fn kind(&self) -> ElementKind {
        match self {
            Element::Data(_) => ElementKind::Data,
            Element::Context(_) => ElementKind::Context,
        }
    }

    pub fn data(&self) -> &DataElement {
        match self {
            Element::Data(d) => d,
            Element::Context(c) => &c.data,
        }
    }

    pub fn element_id(&self) -> Uuid {
        self.data().element_id
    }

    pub fn triples(&self) -> &[Triple] {
        &self.data().triples
    }

    pub fn metadata(&self) -> &[Triple] {
        &self.data().metadata
    }

    pub fn triple(&self, name: &str) -> Option<&Triple> {
        self.data().triple(name)
    }

    pub fn entity(&self) -> Option<(&str, &str)> {
        match self {
            Element::Data(_) => None,
            Element::Context(c) => Some((&c.entity_id, &c.entity_type)),
        }
    }

    pub fn entity_id(&self) -> Option<&str> {
        self.entity().map(|(id, _)| id)
    }

    pub fn entity_type(&self) -> Option<&str> {
        self.entity().map(|(_, t)| t)
    }

    pub fn attribute_metadata(&self) -> Option<&BTreeMap<String, Vec<Triple>>> {
        match self {
            Element::Data(_) => None,
            Element::Context(c) => Some(&c.attribute_metadata),
        }
    }

    pub fn digest(&self) -> String {
        element_digest(self)
    }
}

impl From<DataElement> for Element {
    fn from(d: DataElement) -> Self {
        Element::Data(d)
    }
}

impl From<ContextElement> for Element {
    fn from(c: ContextElement) -> Self {
        Element::Context(c)
    }
}

/// JSON document form of an element.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ElementDoc {
    pub element_id: Uuid,
    pub triples: Vec<Triple>,
    pub metadata: Vec<Triple>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entity_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entity_type: Option<String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub attribute_metadata: BTreeMap<String, Vec<Triple>>,
}

impl From<Element> for ElementDoc {
    fn from(e: Element) -> Self {
        match e {
            Element::Data(d) => ElementDoc {
                element_id: d.element_id,
                triples: d.triples,
                metadata: d.metadata,
                entity_id: None,
                entity_type: None,
                attribute_metadata: BTreeMap::new(),
            },
            Element::Context(c) => ElementDoc {
                element_id: c.data.element_id,
                triples: c.data.triples,
                metadata: c.data.metadata,
                entity_id: Some(c.entity_id),
                entity_type: Some(c.entity_type),
                attribute_metadata: c.attribute_metadata,
            },
        }
    }
}

impl TryFrom<ElementDoc> for Element {
    type Error = ModelError;

    fn try_from(doc: ElementDoc) -> Result<Self, Self::Error> {
        let data = DataElement::with_id(doc.element_id, doc.triples, doc.metadata)?;
        match (doc.entity_id, doc.entity_type) {
            (None, None) if doc.attribute_metadata.is_empty() => Ok(Element::Data(data)),
            (id, ty) => {
                let mut ctx =
                    ContextElement::new(data, id.unwrap_or_default(), ty.unwrap_or_default())?;
                for (attr, meta) in doc.attribute_metadata {
                    ctx = ctx.with_attribute_metadata(&attr, meta)?;
                }
                Ok(Element::Context(ctx))
            }
        }
    }
}

impl Serialize for DataElement {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ElementDoc::from(Element::Data(self.clone())).serialize(s)
    }
}

impl<'de> Deserialize<'de> for DataElement {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Element::try_from(ElementDoc::deserialize(d)?).map_err(D::Error::custom)? {
            Element::Data(e) => Ok(e),
            Element::Context(_) => Err(D::Error::custom("expected a data element without entity identity")),
        }
    }
}

fn canonical_triple(t: &Triple) -> serde_json::Value {
    serde_json::json!([t.name, t.type_tag().as_str(), t.value.lexical()])
}

fn canonical_sorted(ts: &[Triple]) -> serde_json::Value {
    let mut v: Vec<&Triple> = ts.iter().collect();
    v.sort_by(|a, b| a.name.cmp(&b.name));
    serde_json::Value::Array(v.into_iter().map(canonical_triple).collect())
}

/// Canonical form hashed by [`element_digest`]. Triple order is significant,
/// metadata order is not, numbers use their shortest round-trip rendering.
pub fn canonical_form(element: &Element) -> String {
    let attr_meta: serde_json::Map<String, serde_json::Value> = element
        .attribute_metadata()
        .map(|m| {
            m.iter()
                .map(|(k, v)| (k.clone(), canonical_sorted(v)))
                .collect()
        })
        .unwrap_or_default();
    let doc = serde_json::json!({
        "id": element.element_id().to_string(),
        "triples": element.triples().iter().map(canonical_triple).collect::<Vec<_>>(),
        "metadata": canonical_sorted(element.metadata()),
        "entity": element.entity().map(|(i, t)| vec![i, t]),
        "attributeMetadata": attr_meta,
    });
    doc.to_string()
}

/// SHA-256 hex digest of the element's canonical form.
pub fn element_digest(element: &Element) -> String {
    hex::encode(Sha256::digest(canonical_form(element).as_bytes()))
}
