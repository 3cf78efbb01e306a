//! XML and JSON wire representations.
//!
//! The canonical XML writer emits no insignificant whitespace; readers accept
//! pretty-printed input. Every element encoding decodes back to a
//! digest-equal element in either format.

mod dom;
mod element;
mod om;
mod openapi;

use std::fmt;

use crate::model::ModelError;

pub use dom::canonicalize as canonical_xml;
pub use element::{decode_element, encode_element};
pub use om::{parse_om_observation, parse_om_observation_with_id};
pub use openapi::{
    decode_do_request, decode_do_request_json, decode_do_response, decode_do_response_json,
    encode_do_request, encode_do_request_json, encode_do_response, encode_do_response_json,
    DoRequest, DoResponse,
};

/// Namespace of the Open API documents and of our element XML.
pub const OPENM2M_NS: &str = "http://eurescom.eu/p1957/openm2m";

pub const XML_DECLARATION: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>"#;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Xml,
    Json,
}

impl Format {
    pub fn media_type(self) -> &'static str {
        match self {
            Format::Xml => "application/xml",
            Format::Json => "application/json",
        }
    }

    /// Picks a format from a Content-Type or Accept header value.
    pub fn from_media_type(value: &str) -> Option<Format> {
        let v = value.to_ascii_lowercase();
        if v.contains("json") {
            Some(Format::Json)
        } else if v.contains("xml") {
            Some(Format::Xml)
        } else {
            None
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Xml => "xml",
            Format::Json => "json",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CodecError {
    #[error("malformed XML: {0}")]
    XmlMalformed(String),
    #[error("unexpected namespace `{0}`")]
    WrongNamespace(String),
    #[error("missing field `{0}`")]
    MissingField(&'static str),
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("malformed {format} document: {reason}")]
    Malformed { format: Format, reason: String },
    #[error("unknown type tag `{0}`")]
    UnknownTypeTag(String),
    #[error("malformed O&M observation: {0}")]
    OmMalformed(String),
    #[error("observation has no value")]
    MissingObservationValue,
    #[error(transparent)]
    Model(#[from] ModelError),
}
