#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use prefrank_core::synth::{DatasetKind, SyntheticDataset};
use prefrank_core::ItemId;
use prefrank_service::{Session, ServiceConfig, Status};
use serde::Deserialize;
use serde_json::Value;

pub struct Server {
    pub base: String,
    pub session: Arc<Session>,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
    }
}

pub fn config(round_size: usize, seed: u64) -> ServiceConfig {
    ServiceConfig {
        round_size,
        train_steps: 300,
        seed,
        ..Default::default()
    }
}

pub fn dataset(n: usize, seed: u64) -> SyntheticDataset {
    SyntheticDataset::generate(DatasetKind::Linear, n, 2, seed).unwrap()
}

/// Starts a server; `data = None` leaves the session loading.
pub async fn start(cfg: ServiceConfig, data: Option<&SyntheticDataset>, dir: Option<PathBuf>) -> Server {
    let session = Session::new(cfg, dir).unwrap();
    if let Some(ds) = data {
        session.load(ds.items.clone(), "synthetic").unwrap();
    }
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    let (tx, rx) = tokio::sync::oneshot::channel();
    let s = Arc::clone(&session);
    tokio::spawn(async move {
        prefrank_service::serve(listener, s, async {
            let _ = rx.await;
        })
        .await
        .unwrap();
    });
    Server {
        base: format!("http://{addr}"),
        session,
        stop: Some(tx),
    }
}

#[derive(Debug, Deserialize)]
pub struct PairItem {
    pub id: ItemId,
    pub features: Vec<f64>,
    pub render: Option<Value>,
}

#[derive(Debug, Deserialize)]
pub struct Pair {
    pub pair_id: u64,
    pub item_a: PairItem,
    pub item_b: PairItem,
    pub snapshot_round: u64,
}

pub async fn next_pair(c: &reqwest::Client, base: &str) -> Pair {
    let r = c.get(format!("{base}/next-pair")).send().await.unwrap();
    assert_eq!(r.status(), 200);
    r.json().await.unwrap()
}

pub async fn post(c: &reqwest::Client, base: &str, body: Value) -> (u16, Value) {
    let r = c
        .post(format!("{base}/comparison"))
        .header("content-type", "application/json")
        .body(body.to_string())
        .send()
        .await
        .unwrap();
    let code = r.status().as_u16();
    (code, r.json().await.unwrap_or(Value::Null))
}

pub async fn status(c: &reqwest::Client, base: &str) -> Status {
    let v: Value = c.get(format!("{base}/status")).send().await.unwrap().json().await.unwrap();
    serde_json::from_value(v).unwrap()
}

pub async fn wait_rounds(c: &reqwest::Client, base: &str, rounds: u64) -> Status {
    for _ in 0..6000 {
        let s = status(c, base).await;
        if s.rounds_completed >= rounds && !s.training {
            return s;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("timed out waiting for round {rounds}");
}

/// Noise-free oracle outcome for a served pair.
pub fn oracle_outcome(ds: &SyntheticDataset, p: &Pair) -> f64 {
    let wa = ds.truth.omega(p.item_a.id).unwrap();
    let wb = ds.truth.omega(p.item_b.id).unwrap();
    if wa > wb {
        1.0
    } else if wa < wb {
        0.0
    } else {
        0.5
    }
}

pub async fn annotate(c: &reqwest::Client, base: &str, ds: &SyntheticDataset, count: usize) {
    for _ in 0..count {
        let p = next_pair(c, base).await;
        let (code, _) = post(c, base, serde_json::json!({"pair_id": p.pair_id, "outcome": oracle_outcome(ds, &p)})).await;
        assert_eq!(code, 200);
    }
}
