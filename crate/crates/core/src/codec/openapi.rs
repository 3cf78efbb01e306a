//! `appint-do-request` / `appint-do-response` documents of the `/a/do` exchange.

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::dom::{self, escape_text, Node};
use super::{CodecError, OPENM2M_NS, XML_DECLARATION};
use crate::env::format_timestamp;
use crate::txn::TxnId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DoRequest {
    pub requestor: Uuid,
    pub commands: Vec<String>,
    #[serde(default)]
    pub responders: Vec<Uuid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transaction_id: Option<TxnId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DoResponse {
    pub requestor: Uuid,
    #[serde(with = "millis")]
    pub timestamp: DateTime<FixedOffset>,
    #[serde(default)]
    pub responders: Vec<Uuid>,
    pub result: u16,
}

mod millis {
    use chrono::{DateTime, FixedOffset};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<FixedOffset>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&crate::env::format_timestamp(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<FixedOffset>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s).map_err(serde::de::Error::custom)
    }
}

fn open_root(name: &str, out: &mut String) {
    out.push_str(XML_DECLARATION);
    out.push('<');
    out.push_str(name);
    out.push_str(" xmlns=\"");
    out.push_str(OPENM2M_NS);
    out.push_str("\">");
}

fn leaf(name: &str, text: &str, out: &mut String) {
    out.push('<');
    out.push_str(name);
    out.push('>');
    escape_text(text, out);
    out.push_str("</");
    out.push_str(name);
    out.push('>');
}

pub fn encode_do_request(req: &DoRequest) -> Vec<u8> {
    let mut out = String::new();
    open_root("appint-do-request", &mut out);
    leaf("requestor", &req.requestor.to_string(), &mut out);
    out.push_str("<commands>");
    for c in &req.commands {
        leaf("command", c, &mut out);
    }
    out.push_str("</commands>");
    for r in &req.responders {
        leaf("responders", &r.to_string(), &mut out);
    }
    if let Some(t) = &req.transaction_id {
        leaf("transaction-id", t.as_str(), &mut out);
    }
    out.push_str("</appint-do-request>");
    out.into_bytes()
}

/// Element order follows the published exchange: requestor, timestamp, responders, result.
pub fn encode_do_response(resp: &DoResponse) -> Vec<u8> {
    let mut out = String::new();
    open_root("appint-do-response", &mut out);
    leaf("requestor", &resp.requestor.to_string(), &mut out);
    leaf("timestamp", &format_timestamp(resp.timestamp), &mut out);
    for r in &resp.responders {
        leaf("responders", &r.to_string(), &mut out);
    }
    leaf("result", &resp.result.to_string(), &mut out);
    out.push_str("</appint-do-response>");
    out.into_bytes()
}

fn root(bytes: &[u8], expected: &str) -> Result<Node, CodecError> {
    let root = dom::parse(bytes).map_err(CodecError::XmlMalformed)?;
    if root.ns.as_deref() != Some(OPENM2M_NS) {
        return Err(CodecError::WrongNamespace(root.ns.unwrap_or_default()));
    }
    if root.name != expected {
        return Err(CodecError::XmlMalformed(format!(
            "expected <{expected}>, found <{}>",
            root.name
        )));
    }
    Ok(root)
}

fn uuid_field(field: &'static str, s: &str) -> Result<Uuid, CodecError> {
    s.trim()
        .parse()
        .map_err(|e: uuid::Error| CodecError::InvalidField { field, reason: e.to_string() })
}

fn required<'a>(root: &'a Node, name: &'static str) -> Result<&'a str, CodecError> {
    root.child(name)
        .map(Node::trimmed_text)
        .filter(|s| !s.is_empty())
        .ok_or(CodecError::MissingField(name))
}

fn responders(root: &Node) -> Result<Vec<Uuid>, CodecError> {
    root.children_named("responders")
        .flat_map(|n| n.trimmed_text().split_whitespace())
        .map(|s| uuid_field("responders", s))
        .collect()
}

pub fn decode_do_request(bytes: &[u8]) -> Result<DoRequest, CodecError> {
    let root = root(bytes, "appint-do-request")?;
    let requestor = uuid_field("requestor", required(&root, "requestor")?)?;
    let commands: Vec<String> = root
        .child("commands")
        .map(|c| {
            c.children_named("command")
                .map(|n| n.trimmed_text().to_owned())
                .collect()
        })
        .unwrap_or_default();
    if commands.is_empty() {
        return Err(CodecError::MissingField("commands"));
    }
    let transaction_id = match root.child("transaction-id") {
        Some(n) => Some(n.trimmed_text().parse::<TxnId>().map_err(|e| {
            CodecError::InvalidField { field: "transaction-id", reason: e.to_string() }
        })?),
        None => None,
    };
    Ok(DoRequest { requestor, commands, responders: responders(&root)?, transaction_id })
}

pub fn decode_do_response(bytes: &[u8]) -> Result<DoResponse, CodecError> {
    let root = root(bytes, "appint-do-response")?;
    let requestor = uuid_field("requestor", required(&root, "requestor")?)?;
    let timestamp = DateTime::parse_from_rfc3339(required(&root, "timestamp")?)
        .map_err(|e| CodecError::InvalidField { field: "timestamp", reason: e.to_string() })?;
    let result = required(&root, "result")?
        .parse()
        .map_err(|e: std::num::ParseIntError| CodecError::InvalidField {
            field: "result",
            reason: e.to_string(),
        })?;
    Ok(DoResponse { requestor, timestamp, responders: responders(&root)?, result })
}

fn json_err(e: serde_json::Error) -> CodecError {
    CodecError::Malformed { format: super::Format::Json, reason: e.to_string() }
}

pub fn decode_do_request_json(bytes: &[u8]) -> Result<DoRequest, CodecError> {
    let req: DoRequest = serde_json::from_slice(bytes).map_err(json_err)?;
    if req.commands.is_empty() {
        return Err(CodecError::MissingField("commands"));
    }
    Ok(req)
}

pub fn encode_do_request_json(req: &DoRequest) -> Vec<u8> {
    serde_json::to_vec(req).expect("request serializes")
}

pub fn decode_do_response_json(bytes: &[u8]) -> Result<DoResponse, CodecError> {
    serde_json::from_slice(bytes).map_err(json_err)
}

pub fn encode_do_response_json(resp: &DoResponse) -> Vec<u8> {
    serde_json::to_vec(resp).expect("response serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    const REQUEST: &str = include_str!("../../tests/fixtures/do_request.xml");
    const RESPONSE: &str = include_str!("../../tests/fixtures/do_response.xml");

    #[test]
    fn decodes_published_request() {
        let req = decode_do_request(REQUEST.as_bytes()).unwrap();
        assert_eq!(req.requestor.to_string(), "9378f697-773e-4c8b-8c89-27d45ecc70c7");
        assert_eq!(req.commands, ["command1", "command2"]);
        assert_eq!(req.responders.len(), 1);
        assert_eq!(req.responders[0].to_string(), "9870f7b6-bc47-47df-b670-2227ac5aaa2d");
        assert_eq!(
            req.transaction_id.as_ref().map(TxnId::as_str),
            Some("AEDF7D2C67BB4C7DB7615856868057C3")
        );
    }

    #[test]
    fn empty_commands_is_missing_field() {
        let doc = REQUEST.replace(
            "<commands>\n<command>command1</command>\n<command>command2</command>\n</commands>",
            "<commands/>",
        );
        assert_ne!(doc, REQUEST);
        assert_eq!(
            decode_do_request(doc.as_bytes()).unwrap_err(),
            CodecError::MissingField("commands")
        );
    }

    #[test]
    fn wrong_namespace_and_missing_requestor() {
        let doc = REQUEST.replace(OPENM2M_NS, "http://example.org/other");
        assert!(matches!(
            decode_do_request(doc.as_bytes()),
            Err(CodecError::WrongNamespace(_))
        ));
        let doc = REQUEST.replace(
            "<requestor>9378f697-773e-4c8b-8c89-27d45ecc70c7</requestor>",
            "",
        );
        assert_eq!(
            decode_do_request(doc.as_bytes()).unwrap_err(),
            CodecError::MissingField("requestor")
        );
        assert!(matches!(
            decode_do_request(b"<appint-do-request"),
            Err(CodecError::XmlMalformed(_))
        ));
    }

    #[test]
    fn bad_transaction_id() {
        let doc = REQUEST.replace("AEDF7D2C67BB4C7DB7615856868057C3", "aedf7d2c67bb4c7db7615856868057c3");
        assert!(matches!(
            decode_do_request(doc.as_bytes()),
            Err(CodecError::InvalidField { field: "transaction-id", .. })
        ));
    }

    #[test]
    fn encodes_published_response() {
        let resp = DoResponse {
            requestor: "9378f697-773e-4c8b-8c89-27d45ecc70c7".parse().unwrap(),
            timestamp: DateTime::parse_from_rfc3339("2010-04-30T14:12:34.796+02:00").unwrap(),
            responders: vec!["9870f7b6-bc47-47df-b670-2227ac5aaa2d".parse().unwrap()],
            result: 200,
        };
        let bytes = encode_do_response(&resp);
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.starts_with(XML_DECLARATION));
        assert_eq!(
            dom::canonicalize(&bytes).unwrap(),
            dom::canonicalize(RESPONSE.as_bytes()).unwrap()
        );
        assert_eq!(decode_do_response(RESPONSE.as_bytes()).unwrap(), resp);

        let failed = DoResponse { result: 500, ..resp };
        let text = String::from_utf8(encode_do_response(&failed)).unwrap();
        assert!(text.contains("<result>500</result>"));
        assert!(text.ends_with("<result>500</result></appint-do-response>"));
    }

    #[test]
    fn published_request_reencodes() {
        let req = decode_do_request(REQUEST.as_bytes()).unwrap();
        assert_eq!(
            dom::canonicalize(&encode_do_request(&req)).unwrap(),
            dom::canonicalize(REQUEST.as_bytes()).unwrap()
        );
    }

    #[test]
    fn json_forms() {
        let req = decode_do_request(REQUEST.as_bytes()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&encode_do_request_json(&req)).unwrap();
        assert_eq!(v["transactionId"], "AEDF7D2C67BB4C7DB7615856868057C3");
        assert_eq!(decode_do_request_json(&encode_do_request_json(&req)).unwrap(), req);
        assert_eq!(
            decode_do_request_json(br#"{"requestor":"9378f697-773e-4c8b-8c89-27d45ecc70c7","commands":[]}"#)
                .unwrap_err(),
            CodecError::MissingField("commands")
        );
        let resp = decode_do_response(RESPONSE.as_bytes()).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&encode_do_response_json(&resp)).unwrap();
        assert_eq!(v["timestamp"], "2010-04-30T14:12:34.796+02:00");
        assert_eq!(v["result"], 200);
    }
}
