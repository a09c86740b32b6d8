use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};

use prefrank_core::ItemId;

use crate::{ServiceError, Session};

/// Header naming the snapshot round a response was computed from.
pub const ROUND_HEADER: &str = "x-snapshot-round";

pub fn router(session: Arc<Session>) -> Router {
    Router::new()
        .route("/next-pair", get(next_pair))
        .route("/comparison", post(comparison))
        .route("/ratings", get(ratings))
        .route("/status", get(status))
        .with_state(session)
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let code = match &self {
            ServiceError::Loading => StatusCode::SERVICE_UNAVAILABLE,
            ServiceError::AllPending | ServiceError::Duplicate(_) => StatusCode::CONFLICT,
            ServiceError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidOutcome(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (code, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Serialize)]
struct Render {
    x: f64,
    y: f64,
}

#[derive(Serialize)]
struct PairItem<'a> {
    id: ItemId,
    features: &'a [f64],
    #[serde(skip_serializing_if = "Option::is_none")]
    render: Option<Render>,
}

#[derive(Serialize)]
struct PairPayload<'a> {
    pair_id: u64,
    item_a: PairItem<'a>,
    item_b: PairItem<'a>,
    snapshot_round: u64,
}

fn with_round(mut resp: Response, round: u64) -> Response {
    resp.headers_mut()
        .insert(ROUND_HEADER, HeaderValue::from(round));
    resp
}

async fn next_pair(State(s): State<Arc<Session>>) -> Result<Response, ServiceError> {
    let issued = s.next_pair()?;
    let items = s.items().ok_or(ServiceError::Loading)?;
    let item = |id: ItemId| -> Result<PairItem<'_>, ServiceError> {
        let f = items.features(id)?;
        Ok(PairItem {
            id,
            features: f,
            render: (f.len() == 2).then(|| Render { x: f[0], y: f[1] }),
        })
    };
    let body = PairPayload {
        pair_id: issued.pair_id,
        item_a: item(issued.a)?,
        item_b: item(issued.b)?,
        snapshot_round: issued.round,
    };
    Ok(with_round(Json(body).into_response(), issued.round))
}

/// Body is parsed by hand so that malformed JSON (400) and an outcome outside
/// {1, 0.5, 0} (422) get distinct codes.
async fn comparison(State(s): State<Arc<Session>>, body: Bytes) -> Result<Response, ServiceError> {
    let v: Value = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let pair_id = v
        .get("pair_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| ServiceError::BadRequest("`pair_id` must be a non-negative integer".into()))?;
    let outcome = match v.get("outcome") {
        Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
        Some(other) => return Err(ServiceError::InvalidOutcome(other.as_str().and_then(|t| t.parse().ok()).unwrap_or(f64::NAN))),
        None => return Err(ServiceError::BadRequest("missing `outcome`".into())),
    };
    let s2 = Arc::clone(&s);
    let acc = tokio::task::spawn_blocking(move || s2.submit(pair_id, outcome))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok(Json(acc).into_response())
}

async fn ratings(State(s): State<Arc<Session>>) -> Result<Response, ServiceError> {
    s.items().ok_or(ServiceError::Loading)?;
    Ok(match s.snapshot() {
        None => StatusCode::NO_CONTENT.into_response(),
        Some(snap) => with_round(Json(&snap.ratings).into_response(), snap.round),
    })
}

async fn status(State(s): State<Arc<Session>>) -> Json<crate::Status> {
    Json(s.status())
}
