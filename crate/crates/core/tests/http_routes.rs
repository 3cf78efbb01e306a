use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use openm2m::codec::{canonical_xml, decode_do_response, decode_do_response_json};
use openm2m::env::{ManualClock, SeededIds};
use openm2m::gateway::http::router;
use openm2m::{Gateway, GatewayConfig, Runtime};
use serde_json::{json, Value};
use tower::ServiceExt;

const REQUEST: &str = include_str!("fixtures/do_request.xml");
const RESPONSE: &str = include_str!("fixtures/do_response.xml");
const OM: &str = include_str!("fixtures/om_observation.xml");
const REQUESTOR: &str = "9378f697-773e-4c8b-8c89-27d45ecc70c7";
const RESPONDER: &str = "9870f7b6-bc47-47df-b670-2227ac5aaa2d";
const TXN: &str = "AEDF7D2C67BB4C7DB7615856868057C3";

fn app() -> (Arc<Gateway>, Router) {
    let clock = Arc::new(ManualClock::new("2010-04-30T12:12:34.796Z".parse().unwrap()));
    let config = GatewayConfig { utc_offset_minutes: 120, ..GatewayConfig::default() };
    let rt = Runtime { clock, ids: Arc::new(SeededIds::new(9)), local_delivery: true };
    let gw = Arc::new(Gateway::in_memory(config, rt));
    (gw.clone(), router(gw))
}

async fn call(app: &Router, method: Method, uri: &str, ctype: Option<&str>, accept: Option<&str>, body: &str) -> (StatusCode, Option<String>, Vec<u8>) {
    let mut b = Request::builder().method(method).uri(uri);
    if let Some(c) = ctype {
        b = b.header(header::CONTENT_TYPE, c);
    }
    if let Some(a) = accept {
        b = b.header(header::ACCEPT, a);
    }
    let resp = app.clone().oneshot(b.body(Body::from(body.to_owned())).unwrap()).await.unwrap();
    let status = resp.status();
    let ct = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_owned());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ct, bytes)
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let text = if body.is_null() { String::new() } else { body.to_string() };
    let (s, _, bytes) = call(app, method, uri, Some("application/json"), None, &text).await;
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (s, v)
}

async fn register_pair(app: &Router) {
    for id in [REQUESTOR, RESPONDER] {
        let (s, v) = json_call(app, Method::POST, "/objects", json!({ "objectId": id })).await;
        assert_eq!(s, StatusCode::CREATED);
        assert_eq!(v["online"], true);
    }
    let (s, v) = json_call(app, Method::POST, "/transactions", json!({ "txnId": TXN })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["txnId"], TXN);
}

#[tokio::test]
async fn do_exchange_xml_reproduces_listing() {
    let (_, app) = app();
    register_pair(&app).await;
    let (s, ct, body) = call(&app, Method::POST, "/a/do", Some("application/xml"), None, REQUEST).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("application/xml"));
    assert_eq!(canonical_xml(&body).unwrap(), canonical_xml(RESPONSE.as_bytes()).unwrap());
}

#[tokio::test]
async fn do_exchange_json_matches_xml_fields() {
    let (_, app) = app();
    register_pair(&app).await;
    let (_, _, xml) = call(&app, Method::POST, "/a/do", Some("application/xml"), None, REQUEST).await;
    let req = json!({
        "requestor": REQUESTOR,
        "commands": ["command1", "command2"],
        "responders": [RESPONDER],
        "transactionId": TXN,
    });
    let (s, ct, body) =
        call(&app, Method::POST, "/a/do", Some("application/json"), Some("application/json"), &req.to_string()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("application/json"));
    assert_eq!(decode_do_response_json(&body).unwrap(), decode_do_response(&xml).unwrap());

    // XML in, JSON out
    let (_, ct, body) = call(&app, Method::POST, "/a/do", Some("application/xml"), Some("application/json"), REQUEST).await;
    assert_eq!(ct.as_deref(), Some("application/json"));
    assert_eq!(decode_do_response_json(&body).unwrap().result, 200);
}

#[tokio::test]
async fn do_exchange_errors() {
    let (_, app) = app();
    let (s, _, body) = call(&app, Method::POST, "/a/do", Some("application/xml"), None, REQUEST).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(decode_do_response(&body).unwrap().result, 404);
    let (s, _, _) = call(&app, Method::POST, "/a/do", Some("application/xml"), None, "<not-xml").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _, _) = call(&app, Method::GET, "/unknown", None, None, "").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn transactional_commands_follow_commit() {
    let (_, app) = app();
    register_pair(&app).await;
    call(&app, Method::POST, "/a/do", Some("application/xml"), None, REQUEST).await;
    let pending = format!("/objects/{RESPONDER}/pending");
    let (_, v) = json_call(&app, Method::GET, &pending, Value::Null).await;
    assert_eq!(v, json!([]));
    let (s, v) = json_call(&app, Method::POST, &format!("/transactions/{TXN}/commit"), Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["outcome"], "committed");
    let (_, v) = json_call(&app, Method::GET, &pending, Value::Null).await;
    let cmds: Vec<_> = v
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m["payload"]["triples"][0]["value"].clone())
        .collect();
    assert_eq!(cmds, [json!("command1"), json!("command2")]);

    let msg = v[0]["msgId"].as_str().unwrap().to_owned();
    let (s, r) = json_call(&app, Method::POST, &format!("/messages/{msg}/ack"), json!({ "recipient": RESPONDER })).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["perRecipient"][RESPONDER], "acked");
    let (_, v) = json_call(&app, Method::GET, &pending, Value::Null).await;
    assert_eq!(v.as_array().unwrap().len(), 1);

    let (s, _) = json_call(&app, Method::POST, &format!("/transactions/{TXN}/abort"), Value::Null).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = json_call(&app, Method::POST, "/transactions/ZZ/commit", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn observation_feed_and_digest() {
    let (gw, app) = app();
    let (s, _, body) = call(&app, Method::POST, "/observations", Some("application/xml"), None, OM).await;
    assert_eq!(s, StatusCode::CREATED);
    let stored: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(stored["entityId"], "obsTest1");
    let id = stored["elementId"].as_str().unwrap().to_owned();

    let (s, v) = json_call(&app, Method::GET, "/events?since=0", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    let events = v.as_array().unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0]["kind"], "context");
    let triples = events[0]["element"]["triples"].as_array().unwrap();
    let value = triples.iter().find(|t| t["name"] == "value").unwrap();
    assert_eq!(value["value"], json!(22.3));
    let seq = events[0]["seq"].as_u64().unwrap();
    let (_, v) = json_call(&app, Method::GET, &format!("/events?since={seq}"), Value::Null).await;
    assert_eq!(v, json!([]));

    let (_, v) = json_call(&app, Method::GET, &format!("/elements/{id}/digest"), Value::Null).await;
    let el = gw.element(id.parse().unwrap()).unwrap();
    assert_eq!(v["digest"], el.digest());

    let (s, ct, body) = call(&app, Method::GET, &format!("/elements/{id}"), None, Some("application/xml"), "").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("application/xml"));
    assert!(String::from_utf8(body).unwrap().contains("22.3"));

    let (s, _) = json_call(&app, Method::GET, "/elements/00000000-0000-0000-0000-000000000000", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, Method::POST, "/observations", Some("application/xml"), None, "<x/>").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn groups_charges_and_subscriptions() {
    let (_, app) = app();
    let (s, v) = json_call(
        &app,
        Method::POST,
        "/groups",
        json!({ "definingAttributes": [{ "name": "uom", "type": "string", "value": "Cel" }] }),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let g = v["groupId"].as_str().unwrap().to_owned();
    let (s, _) = json_call(&app, Method::POST, "/groups", json!({})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, v) = json_call(
        &app,
        Method::POST,
        "/subscriptions",
        json!({
            "subscriber": "local:watcher",
            "target": "obsTest1",
            "predicate": { "kind": "band", "tripleName": "value", "low": 22.0, "high": 23.0 }
        }),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let sub = v["subId"].as_str().unwrap().to_owned();
    let (s, _) = json_call(
        &app,
        Method::POST,
        "/subscriptions",
        json!({
            "subscriber": "local:watcher",
            "target": "x",
            "predicate": { "kind": "band", "tripleName": "value", "low": 3.0, "high": 1.0 }
        }),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    call(&app, Method::POST, "/observations", Some("application/xml"), None, OM).await;
    let (_, v) = json_call(&app, Method::GET, &format!("/groups/{g}/members"), Value::Null).await;
    assert_eq!(v["members"], json!(["obsTest1"]));
    let (_, v) = json_call(&app, Method::GET, &format!("/notifications?subId={sub}"), Value::Null).await;
    assert_eq!(v, json!([]));

    let (s, _) = json_call(&app, Method::POST, "/charges", json!({ "accountId": "a", "units": "1.5", "resource": "r" })).await;
    assert_eq!(s, StatusCode::CREATED);
    json_call(&app, Method::POST, "/charges", json!({ "accountId": "a", "units": "2.5", "resource": "r" })).await;
    let (_, v) = json_call(&app, Method::GET, "/accounts/a/balance", Value::Null).await;
    assert_eq!(v["balance"], "4.0");
    let (s, _) = json_call(&app, Method::POST, "/charges", json!({ "accountId": "a", "units": "-1", "resource": "r" })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (_, v) = json_call(&app, Method::GET, "/accounts/nobody/balance", Value::Null).await;
    assert_eq!(v["balance"], "0");

    let (s, _) = json_call(&app, Method::DELETE, &format!("/subscriptions/{sub}"), Value::Null).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = json_call(&app, Method::DELETE, &format!("/subscriptions/{sub}"), Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, Method::DELETE, &format!("/groups/{g}"), Value::Null).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = json_call(&app, Method::GET, &format!("/groups/{g}/members"), Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn messaging_and_presence() {
    let (gw, app) = app();
    for id in ["a", "b", "c"] {
        json_call(&app, Method::POST, "/objects", json!({ "objectId": id })).await;
    }
    let (_, v) = json_call(&app, Method::POST, "/groups", json!({ "explicitMembers": ["b", "c"] })).await;
    let g = v["groupId"].clone();
    let msg = json!({
        "msgId": "6f1c1c2e-3c6b-4c1e-9a57-0c1d2e3f4a5b",
        "sender": "a",
        "mode": "group",
        "target": g,
        "payload": { "elementId": "7f1c1c2e-3c6b-4c1e-9a57-0c1d2e3f4a5b", "triples": [], "metadata": [] },
        "deliveryClass": "confirmed"
    });
    let (s, v) = json_call(&app, Method::POST, "/messages", msg.clone()).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["perRecipient"].as_object().unwrap().len(), 2);
    let (s, _) = json_call(&app, Method::POST, "/messages", msg).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    for r in ["b", "c"] {
        let (_, v) = json_call(&app, Method::GET, &format!("/objects/{r}/pending"), Value::Null).await;
        assert_eq!(v.as_array().unwrap().len(), 1);
    }
    let (s, _) = json_call(
        &app,
        Method::POST,
        "/messages",
        json!({
            "msgId": "8f1c1c2e-3c6b-4c1e-9a57-0c1d2e3f4a5b",
            "sender": "a",
            "mode": "single",
            "target": "ghost",
            "payload": { "elementId": "9f1c1c2e-3c6b-4c1e-9a57-0c1d2e3f4a5b", "triples": [], "metadata": [] },
            "deliveryClass": "unconfirmed"
        }),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _) = json_call(&app, Method::POST, "/objects/b/heartbeat", json!({ "status": "offline" })).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(!gw.object("b").unwrap().online);
    let (s, _) = json_call(&app, Method::POST, "/objects/b/heartbeat", Value::Null).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert!(gw.object("b").unwrap().online);
    let (s, _) = json_call(&app, Method::POST, "/objects/ghost/heartbeat", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, Method::DELETE, "/objects/c", Value::Null).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = json_call(&app, Method::DELETE, "/objects/c", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&app, Method::POST, "/objects", json!({ "nope": 1 })).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn served_over_loopback() {
    let (gw, _) = app();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(openm2m::gateway::http::serve(gw, listener, async {
        let _ = rx.await;
    }));
    let status = tokio::task::spawn_blocking(move || {
        ureq::get(&format!("http://{addr}/stats")).call().unwrap().status()
    })
    .await
    .unwrap();
    assert_eq!(status, 200);
    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
}
