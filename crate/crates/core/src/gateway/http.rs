//! REST surface of the gateway.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

use super::{Gateway, GatewayError, PresenceStatus};
use crate::broker::Message;
use crate::codec::{
    decode_do_request, decode_do_request_json, decode_element, encode_do_response,
    encode_do_response_json, encode_element, CodecError, Format,
};
use crate::model::Triple;
use crate::notify::{Predicate, Subscription};
use crate::txn::TxnId;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError(status, e.to_string())
    }
}

impl From<CodecError> for ApiError {
    fn from(e: CodecError) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.to_string())
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T, F>(gw: &Arc<Gateway>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&Gateway) -> Result<T, GatewayError> + Send + 'static,
{
    let gw = gw.clone();
    tokio::task::spawn_blocking(move || f(&gw))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("invalid JSON body: {e}")))
}

fn parse_txn(id: &str) -> ApiResult<TxnId> {
    id.parse().map_err(|e: crate::txn::TxnIdError| ApiError(StatusCode::NOT_FOUND, e.to_string()))
}

fn request_format(headers: &HeaderMap) -> Format {
    headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(Format::from_media_type)
        .unwrap_or(Format::Xml)
}

fn response_format(headers: &HeaderMap, fallback: Format) -> Format {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .and_then(Format::from_media_type)
        .unwrap_or(fallback)
}

fn typed(format: Format, status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, format.media_type())], body).into_response()
}

pub fn router(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/a/do", post(do_exchange))
        .route("/objects", post(register_object))
        .route("/objects/{id}", delete(remove_object))
        .route("/objects/{id}/heartbeat", post(heartbeat))
        .route("/objects/{id}/pending", get(pending))
        .route("/groups", post(create_group))
        .route("/groups/{id}", delete(delete_group))
        .route("/groups/{id}/members", get(group_members))
        .route("/messages", post(send_message))
        .route("/messages/{id}", get(message_report))
        .route("/messages/{id}/ack", post(ack_message))
        .route("/subscriptions", post(subscribe))
        .route("/subscriptions/{id}", delete(unsubscribe))
        .route("/notifications", get(notifications))
        .route("/transactions", post(begin_txn))
        .route("/transactions/{id}", get(txn_record))
        .route("/transactions/{id}/participants", post(enlist))
        .route("/transactions/{id}/commit", post(commit_txn))
        .route("/transactions/{id}/abort", post(abort_txn))
        .route("/charges", post(charge))
        .route("/accounts/{id}/balance", get(balance))
        .route("/observations", post(ingest_observation))
        .route("/elements", post(post_element))
        .route("/elements/{id}", get(get_element))
        .route("/elements/{id}/digest", get(element_digest))
        .route("/events", get(events))
        .route("/stats", get(stats))
        .fallback(|| async { ApiError(StatusCode::NOT_FOUND, "no such route".into()) })
        .with_state(gw)
}

/// Serves `router` on `listener`, running gateway timers every `tick_ms`,
/// until `shutdown` resolves.
pub async fn serve(
    gw: Arc<Gateway>,
    listener: tokio::net::TcpListener,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = {
        let gw = gw.clone();
        let period = Duration::from_millis(gw.config().tick_ms.max(1));
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                let gw = gw.clone();
                match tokio::task::spawn_blocking(move || gw.tick()).await {
                    Ok(Ok(())) => {}
                    Ok(Err(e)) => tracing::error!("gateway tick failed: {e}"),
                    Err(e) => tracing::error!("gateway tick panicked: {e}"),
                }
            }
        })
    };
    let result = axum::serve(listener, router(gw)).with_graceful_shutdown(shutdown).await;
    ticker.abort();
    result
}

async fn do_exchange(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> Response {
    let in_format = request_format(&headers);
    let out_format = response_format(&headers, in_format);
    let req = match in_format {
        Format::Xml => decode_do_request(&body),
        Format::Json => decode_do_request_json(&body),
    };
    let req = match req {
        Ok(r) => r,
        Err(e) => return ApiError::from(e).into_response(),
    };
    let resp = match blocking(&gw, move |g| Ok(g.handle_do(&req))).await {
        Ok(r) => r,
        Err(e) => return e.into_response(),
    };
    let status = StatusCode::from_u16(resp.result).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let bytes = match out_format {
        Format::Xml => encode_do_response(&resp),
        Format::Json => encode_do_response_json(&resp),
    };
    typed(out_format, status, bytes)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct RegisterBody {
    object_id: String,
    #[serde(default)]
    callback: Option<String>,
    #[serde(default)]
    heartbeat_deadline_ms: Option<u64>,
}

async fn register_object(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let b: RegisterBody = parse_json(&body)?;
    let id = b.object_id.clone();
    let created = blocking(&gw, move |g| {
        g.register_object(&b.object_id, b.callback, b.heartbeat_deadline_ms.map(Duration::from_millis))
    })
    .await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    let rec = gw.object(&id);
    Ok((status, Json(rec)).into_response())
}

async fn remove_object(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(&gw, move |g| g.remove_object(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct HeartbeatBody {
    #[serde(default)]
    status: Option<PresenceStatus>,
    #[serde(default)]
    heartbeat_deadline_ms: Option<u64>,
}

async fn heartbeat(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let b: HeartbeatBody = if body.is_empty() { HeartbeatBody::default() } else { parse_json(&body)? };
    blocking(&gw, move |g| {
        g.presence_update(
            &id,
            b.status.unwrap_or(PresenceStatus::Online),
            b.heartbeat_deadline_ms.map(Duration::from_millis),
        )
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn pending(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Json<Vec<Message>>> {
    Ok(Json(blocking(&gw, move |g| g.pending(&id)).await?))
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct GroupBody {
    #[serde(default)]
    defining_attributes: Vec<Triple>,
    #[serde(default)]
    explicit_members: BTreeSet<String>,
}

async fn create_group(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let b: GroupBody = parse_json(&body)?;
    let id = blocking(&gw, move |g| g.create_group(b.defining_attributes, b.explicit_members)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "groupId": id }))).into_response())
}

async fn delete_group(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<StatusCode> {
    blocking(&gw, move |g| g.delete_group(id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn group_members(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    let members = blocking(&gw, move |g| g.members(id)).await?;
    Ok(Json(json!({ "groupId": id, "members": members })).into_response())
}

async fn send_message(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let m: Message = parse_json(&body)?;
    let report = blocking(&gw, move |g| g.send_message(m)).await?;
    Ok((StatusCode::ACCEPTED, Json(report)).into_response())
}

async fn message_report(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    match gw.report(id) {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("unknown message {id}"))),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct AckBody {
    recipient: String,
}

async fn ack_message(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<Uuid>,
    body: Bytes,
) -> ApiResult<Response> {
    let b: AckBody = parse_json(&body)?;
    let report = blocking(&gw, move |g| g.ack(&b.recipient, id)).await?;
    Ok(Json(report).into_response())
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct SubscribeBody {
    #[serde(default)]
    sub_id: Option<Uuid>,
    subscriber: String,
    #[serde(default)]
    registrar: Option<String>,
    target: String,
    predicate: Predicate,
}

async fn subscribe(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let b: SubscribeBody = parse_json(&body)?;
    let sub = Subscription {
        sub_id: b.sub_id.unwrap_or_else(|| gw.store().ids().uuid()),
        subscriber: b.subscriber,
        registrar: b.registrar.unwrap_or_else(|| b.target.clone()),
        target: b.target,
        predicate: b.predicate,
    };
    let id = blocking(&gw, move |g| g.subscribe(sub)).await?;
    Ok((StatusCode::CREATED, Json(json!({ "subId": id }))).into_response())
}

async fn unsubscribe(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<StatusCode> {
    blocking(&gw, move |g| g.unsubscribe(id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct SubQuery {
    #[serde(rename = "subId")]
    sub_id: Option<Uuid>,
}

async fn notifications(State(gw): State<Arc<Gateway>>, Query(q): Query<SubQuery>) -> Response {
    let mut all = gw.notifications();
    if let Some(id) = q.sub_id {
        all.retain(|n| n.sub_id == id);
    }
    Json(all).into_response()
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct BeginBody {
    #[serde(default)]
    txn_id: Option<String>,
}

async fn begin_txn(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let b: BeginBody = if body.is_empty() { BeginBody::default() } else { parse_json(&body)? };
    let chosen = match b.txn_id {
        Some(s) => Some(s.parse::<TxnId>().map_err(|e| bad_request(e.to_string()))?),
        None => None,
    };
    let id = blocking(&gw, move |g| match chosen {
        Some(id) => g.begin_txn_with_id(id),
        None => g.begin_txn(),
    })
    .await?;
    Ok((StatusCode::CREATED, Json(json!({ "txnId": id }))).into_response())
}

async fn txn_record(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = parse_txn(&id)?;
    match gw.txns().record(&id) {
        Some(r) => Ok(Json(r).into_response()),
        None => Err(ApiError(StatusCode::NOT_FOUND, format!("unknown transaction {id}"))),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnlistBody {
    url: String,
}

async fn enlist(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<StatusCode> {
    let id = parse_txn(&id)?;
    let b: EnlistBody = parse_json(&body)?;
    blocking(&gw, move |g| g.enlist_http(&id, &b.url)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize, Default)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct CommitBody {
    #[serde(default)]
    prepare_timeout_ms: Option<u64>,
}

async fn commit_txn(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let id = parse_txn(&id)?;
    let b: CommitBody = if body.is_empty() { CommitBody::default() } else { parse_json(&body)? };
    let out = blocking(&gw, move |g| g.commit_txn(&id, b.prepare_timeout_ms.map(Duration::from_millis))).await?;
    Ok(Json(out).into_response())
}

async fn abort_txn(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    let id = parse_txn(&id)?;
    blocking(&gw, move |g| g.abort_txn(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ChargeBody {
    account_id: String,
    units: Decimal,
    resource: String,
}

async fn charge(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let b: ChargeBody = parse_json(&body)?;
    let rec = blocking(&gw, move |g| g.charge(&b.account_id, b.units, &b.resource)).await?;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Balance {
    account_id: String,
    #[serde(with = "rust_decimal::serde::str")]
    balance: Decimal,
}

async fn balance(State(gw): State<Arc<Gateway>>, Path(id): Path<String>) -> Json<Balance> {
    let balance = gw.balance(&id);
    Json(Balance { account_id: id, balance })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Stored {
    seq: u64,
    element_id: Uuid,
    #[serde(skip_serializing_if = "Option::is_none")]
    entity_id: Option<String>,
}

fn stored(ev: &crate::store::Event) -> Stored {
    let el = ev.element().expect("element event");
    Stored {
        seq: ev.seq,
        element_id: el.element_id(),
        entity_id: el.entity_id().map(str::to_owned),
    }
}

async fn ingest_observation(State(gw): State<Arc<Gateway>>, body: Bytes) -> ApiResult<Response> {
    let ev = blocking(&gw, move |g| g.ingest_observation(&body)).await?;
    Ok((StatusCode::CREATED, Json(stored(&ev))).into_response())
}

async fn post_element(State(gw): State<Arc<Gateway>>, headers: HeaderMap, body: Bytes) -> ApiResult<Response> {
    let format = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(Format::from_media_type)
        .unwrap_or(Format::Json);
    let el = decode_element(&body, format)?;
    let ev = blocking(&gw, move |g| g.append_element(el)).await?;
    Ok((StatusCode::CREATED, Json(stored(&ev))).into_response())
}

async fn get_element(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Path(id): Path<Uuid>,
) -> ApiResult<Response> {
    let el = gw
        .element(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown element {id}")))?;
    let format = response_format(&headers, Format::Json);
    Ok(typed(format, StatusCode::OK, encode_element(&el, format)))
}

async fn element_digest(State(gw): State<Arc<Gateway>>, Path(id): Path<Uuid>) -> ApiResult<Response> {
    let el = gw
        .element(id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown element {id}")))?;
    Ok(Json(json!({ "elementId": id, "digest": el.digest() })).into_response())
}

#[derive(Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn events(State(gw): State<Arc<Gateway>>, Query(q): Query<SinceQuery>) -> Response {
    let evs: Vec<_> = gw.element_events_since(q.since);
    Json(evs.iter().map(|e| e.as_ref()).collect::<Vec<_>>()).into_response()
}

async fn stats(State(gw): State<Arc<Gateway>>) -> Response {
    Json(gw.stats()).into_response()
}
