//! Minimal namespace-resolved XML tree, enough for the documents we accept.

use std::fmt::Write as _;

use quick_xml::events::Event;
use quick_xml::name::ResolveResult;
use quick_xml::NsReader;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Attr {
    pub ns: Option<String>,
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub(crate) struct Node {
    pub ns: Option<String>,
    pub name: String,
    pub attrs: Vec<Attr>,
    pub children: Vec<Node>,
    /// Concatenated direct text content, untrimmed.
    pub text: String,
}

impl Node {
    pub fn child(&self, local: &str) -> Option<&Node> {
        self.children.iter().find(|c| c.name == local)
    }

    pub fn children_named<'a>(&'a self, local: &'a str) -> impl Iterator<Item = &'a Node> + 'a {
        self.children.iter().filter(move |c| c.name == local)
    }

    pub fn descendant(&self, local: &str) -> Option<&Node> {
        for c in &self.children {
            if c.name == local {
                return Some(c);
            }
            if let Some(d) = c.descendant(local) {
                return Some(d);
            }
        }
        None
    }

    /// Attribute by local name, ignoring its namespace.
    pub fn attr(&self, local: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|a| a.name == local)
            .map(|a| a.value.as_str())
    }

    pub fn trimmed_text(&self) -> &str {
        self.text.trim()
    }
}

fn resolved(r: ResolveResult<'_>) -> Option<String> {
    match r {
        ResolveResult::Bound(ns) => Some(String::from_utf8_lossy(ns.as_ref()).into_owned()),
        _ => None,
    }
}

pub(crate) fn parse(bytes: &[u8]) -> Result<Node, String> {
    let mut reader = NsReader::from_reader(bytes);
    reader.config_mut().expand_empty_elements = true;
    let mut buf = Vec::new();
    let mut stack: Vec<Node> = Vec::new();
    let mut root: Option<Node> = None;
    loop {
        let pos = reader.buffer_position();
        let (ns, ev) = reader
            .read_resolved_event_into(&mut buf)
            .map_err(|e| format!("after byte {pos}: {e}"))?;
        match ev {
            Event::Start(start) => {
                if root.is_some() {
                    return Err("content after the document element".into());
                }
                let mut node = Node {
                    ns: resolved(ns),
                    name: String::from_utf8_lossy(start.local_name().as_ref()).into_owned(),
                    ..Node::default()
                };
                for a in start.attributes() {
                    let a = a.map_err(|e| e.to_string())?;
                    let key = a.key;
                    if key.as_ref() == b"xmlns" || key.as_ref().starts_with(b"xmlns:") {
                        continue;
                    }
                    let (ans, local) = reader.resolve_attribute(key);
                    let value = a.unescape_value().map_err(|e| e.to_string())?.into_owned();
                    node.attrs.push(Attr {
                        ns: resolved(ans),
                        name: String::from_utf8_lossy(local.as_ref()).into_owned(),
                        value,
                    });
                }
                stack.push(node);
            }
            Event::End(_) => {
                let node = stack.pop().ok_or("unbalanced end tag")?;
                match stack.last_mut() {
                    Some(parent) => parent.children.push(node),
                    None => root = Some(node),
                }
            }
            Event::Text(t) => {
                let s = t.unescape().map_err(|e| e.to_string())?;
                match stack.last_mut() {
                    Some(n) => n.text.push_str(&s),
                    None if s.trim().is_empty() => {}
                    None => return Err("text outside the document element".into()),
                }
            }
            Event::CData(c) => {
                let s = String::from_utf8(c.into_inner().into_owned()).map_err(|e| e.to_string())?;
                match stack.last_mut() {
                    Some(n) => n.text.push_str(&s),
                    None => return Err("CDATA outside the document element".into()),
                }
            }
            Event::Eof => break,
            Event::Empty(_) => unreachable!("empty elements are expanded"),
            Event::Decl(_) | Event::PI(_) | Event::Comment(_) | Event::DocType(_) => {}
        }
        buf.clear();
    }
    if !stack.is_empty() {
        return Err("unexpected end of document".into());
    }
    root.ok_or_else(|| "no document element".into())
}

/// Whitespace-insensitive canonical rendering: namespaces spelled out, prefixes
/// dropped, attributes sorted, whitespace-only text removed and text trimmed.
pub fn canonicalize(bytes: &[u8]) -> Result<String, String> {
    fn render(n: &Node, out: &mut String) {
        let _ = write!(out, "<{{{}}}{}", n.ns.as_deref().unwrap_or(""), n.name);
        let mut attrs: Vec<&Attr> = n.attrs.iter().collect();
        attrs.sort_by(|a, b| (&a.ns, &a.name).cmp(&(&b.ns, &b.name)));
        for a in attrs {
            let _ = write!(
                out,
                " {{{}}}{}={:?}",
                a.ns.as_deref().unwrap_or(""),
                a.name,
                a.value
            );
        }
        out.push('>');
        let t = n.text.trim();
        if !t.is_empty() {
            let _ = write!(out, "{t:?}");
        }
        for c in &n.children {
            render(c, out);
        }
        out.push_str("</>");
    }
    let root = parse(bytes)?;
    let mut out = String::new();
    render(&root, &mut out);
    Ok(out)
}

pub(crate) fn escape_text(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

pub(crate) fn escape_attr(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\t' => out.push_str("&#9;"),
            '\n' => out.push_str("&#10;"),
            '\r' => out.push_str("&#13;"),
            c => out.push(c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_default_and_prefixed_namespaces() {
        let doc = br#"<a xmlns="urn:x" xmlns:p="urn:p"><p:b p:k="v">hi</p:b></a>"#;
        let n = parse(doc).unwrap();
        assert_eq!(n.ns.as_deref(), Some("urn:x"));
        let b = n.child("b").unwrap();
        assert_eq!(b.ns.as_deref(), Some("urn:p"));
        assert_eq!(b.attr("k"), Some("v"));
        assert_eq!(b.text, "hi");
    }

    #[test]
    fn rejects_broken_documents() {
        assert!(parse(b"<a><b></a>").is_err());
        assert!(parse(b"<a>").is_err());
        assert!(parse(b"").is_err());
        assert!(parse(b"<a/><b/>").is_err());
    }

    #[test]
    fn canonical_form_ignores_layout() {
        let a = canonicalize(b"<a xmlns=\"urn:x\">\n  <b>1</b>\n</a>").unwrap();
        let b = canonicalize(b"<?xml version=\"1.0\"?><q:a xmlns:q=\"urn:x\"><q:b> 1 </q:b></q:a>").unwrap();
        assert_eq!(a, b);
        let c = canonicalize(b"<a xmlns=\"urn:x\"><b>2</b></a>").unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn attribute_escapes_round_trip() {
        let mut s = String::from("<a v=\"");
        escape_attr("x\t\"<&>\n\ry", &mut s);
        s.push_str("\"/>");
        assert_eq!(parse(s.as_bytes()).unwrap().attr("v"), Some("x\t\"<&>\n\ry"));
    }
}
