//! Live annotation service.
//!
//! Serves pairs chosen by a sampling strategy against the latest rating
//! snapshot, appends submitted outcomes to a log, and retrains the rater from
//! scratch every `R` accepted annotations on a single background worker.
//!
//! | method | path          | success                                            |
//! |--------|---------------|----------------------------------------------------|
//! | GET    | `/next-pair`  | `{pair_id, item_a, item_b, snapshot_round}`        |
//! | POST   | `/comparison` | `{accepted, annotations_total, retrain_triggered}` |
//! | GET    | `/ratings`    | `[{id, mean, epistemic, aleatoric, total}]` or 204 |
//! | GET    | `/status`     | counters, strategy, training flag                  |

mod api;
mod config;
mod round;
mod session;

use thiserror::Error;

pub use api::{router, ROUND_HEADER};
pub use config::ServiceConfig;
pub use round::{rating_table, replay, train_round, RatingRow, Snapshot};
pub use session::{
    Accepted, IssuedPair, Session, SessionHeader, Status, LOG_FILE, SESSION_FILE, SNAPSHOT_FILE,
};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("dataset is still loading")]
    Loading,
    #[error("dataset already loaded")]
    AlreadyLoaded,
    #[error("every candidate pair is pending")]
    AllPending,
    #[error("unknown or expired pair_id {0}")]
    UnknownPair(u64),
    #[error("pair_id {0} was already submitted")]
    Duplicate(u64),
    #[error("invalid outcome {0}; expected 1, 0.5 or 0")]
    InvalidOutcome(f64),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("invalid service config `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("round {round} needs {needed} comparisons, log has {got}")]
    ShortLog { round: u64, needed: usize, got: usize },
    #[error("session header {0} does not match this dataset and config")]
    HeaderMismatch(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("{0}")]
    Internal(String),
    #[error(transparent)]
    Data(#[from] prefrank_core::data::DataError),
    #[error(transparent)]
    Rater(#[from] prefrank_core::rater::RaterError),
    #[error(transparent)]
    Pairs(#[from] prefrank_core::pairs::PairsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serves `session` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    session: std::sync::Arc<Session>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(session))
        .with_graceful_shutdown(shutdown)
        .await
}
