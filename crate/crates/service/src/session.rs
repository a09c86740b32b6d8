//! Session state: the append-only comparison log, pending pairs, the current
//! snapshot and the retrain worker.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex, OnceLock, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use prefrank_core::data::{comparison_csv_line, read_comparisons, write_comparisons};
use prefrank_core::pairs::{sample_pairs_excluding, SamplerConfig, Strategy, UnorderedPair};
use prefrank_core::{seed, Comparison, ItemId, ItemTable, Outcome};

use crate::round::{train_round, Snapshot};
use crate::{ServiceConfig, ServiceError};

const TAG_NEXT: u64 = 0x0e47;

pub const SESSION_FILE: &str = "session.json";
pub const LOG_FILE: &str = "comparisons.csv";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

/// Header written next to the log so a restart can check it resumes the same
/// session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionHeader {
    pub dataset: String,
    pub items: usize,
    pub dim: usize,
    pub config: ServiceConfig,
}

#[derive(Clone, Copy, Debug)]
struct Pending {
    pair: (ItemId, ItemId),
    issued: Instant,
}

#[derive(Default)]
struct Ledger {
    log: Vec<Comparison>,
    pending: HashMap<u64, Pending>,
    submitted: HashSet<u64>,
    annotated: HashSet<UnorderedPair>,
    file: Option<File>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IssuedPair {
    pub pair_id: u64,
    pub a: ItemId,
    pub b: ItemId,
    /// Round of the snapshot the pair was chosen with (0 before any retrain).
    pub round: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: bool,
    pub annotations_total: usize,
    pub retrain_triggered: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Status {
    pub annotations_total: usize,
    pub rounds_completed: u64,
    pub strategy: Strategy,
    pub training: bool,
    /// Spearman between the two latest snapshots; null until there are two.
    pub last_spearman_vs_self: Option<f64>,
    pub round_size: usize,
    pub pending: usize,
    pub ready: bool,
    pub last_error: Option<String>,
}

pub struct Session {
    cfg: ServiceConfig,
    items: OnceLock<Arc<ItemTable>>,
    ledger: Mutex<Ledger>,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    dir: Option<PathBuf>,
    jobs: Mutex<Option<mpsc::Sender<u64>>>,
    next_pair_id: AtomicU64,
    requests: AtomicU64,
    annotations: AtomicUsize,
    rounds: AtomicU64,
    queued: AtomicUsize,
    agreement_bits: AtomicU64,
    has_agreement: AtomicBool,
    last_error: Mutex<Option<String>>,
}

impl Session {
    /// A session without items; [`Session::load`] makes it ready. `dir`
    /// receives the header, the log and the latest snapshot.
    pub fn new(cfg: ServiceConfig, dir: Option<PathBuf>) -> Result<Arc<Self>, ServiceError> {
        cfg.validate()?;
        Ok(Arc::new(Self {
            cfg,
            items: OnceLock::new(),
            ledger: Mutex::new(Ledger::default()),
            snapshot: RwLock::new(None),
            dir,
            jobs: Mutex::new(None),
            next_pair_id: AtomicU64::new(1),
            requests: AtomicU64::new(0),
            annotations: AtomicUsize::new(0),
            rounds: AtomicU64::new(0),
            queued: AtomicUsize::new(0),
            agreement_bits: AtomicU64::new(0),
            has_agreement: AtomicBool::new(false),
            last_error: Mutex::new(None),
        }))
    }

    /// Installs the dataset, resumes any saved log in `dir` and starts the
    /// retrain worker. Completed rounds of a resumed log are retrained in order.
    pub fn load(self: &Arc<Self>, items: ItemTable, dataset: &str) -> Result<(), ServiceError> {
        if items.len() < 2 {
            return Err(ServiceError::Config {
                field: "dataset",
                reason: "needs at least 2 items".into(),
            });
        }
        let header = SessionHeader {
            dataset: dataset.to_string(),
            items: items.len(),
            dim: items.dim(),
            config: self.cfg.clone(),
        };
        let mut ledger = self.ledger.lock().unwrap();
        if let Some(dir) = &self.dir {
            ledger.log = open_dir(dir, &header, &items)?;
            ledger.file = Some(OpenOptions::new().append(true).open(dir.join(LOG_FILE))?);
        }
        ledger.annotated = ledger
            .log
            .iter()
            .map(|c| UnorderedPair::new(c.a(), c.b()))
            .collect();
        let total = ledger.log.len();
        self.annotations.store(total, Ordering::SeqCst);
        let items = Arc::new(items);
        if self.items.set(items.clone()).is_err() {
            return Err(ServiceError::AlreadyLoaded);
        }
        let (tx, rx) = mpsc::channel::<u64>();
        let worker = Arc::clone(self);
        std::thread::Builder::new()
            .name("retrain".into())
            .spawn(move || worker.run_worker(&items, rx))?;
        let rounds = (total / self.cfg.round_size) as u64;
        for k in 1..=rounds {
            self.queued.fetch_add(1, Ordering::SeqCst);
            tx.send(k).expect("worker alive");
        }
        *self.jobs.lock().unwrap() = Some(tx);
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    pub fn items(&self) -> Option<&Arc<ItemTable>> {
        self.items.get()
    }

    fn ready_items(&self) -> Result<&Arc<ItemTable>, ServiceError> {
        self.items.get().ok_or(ServiceError::Loading)
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap().clone()
    }

    pub fn log(&self) -> Vec<Comparison> {
        self.ledger.lock().unwrap().log.clone()
    }

    fn run_worker(&self, items: &ItemTable, rx: mpsc::Receiver<u64>) {
        for round in rx {
            let log = self.log();
            let prev = self.snapshot();
            match train_round(&self.cfg, items, &log, prev.as_deref(), round) {
                Ok(snap) => self.install(snap, prev.as_deref()),
                Err(e) => *self.last_error.lock().unwrap() = Some(format!("round {round}: {e}")),
            }
            self.queued.fetch_sub(1, Ordering::SeqCst);
        }
    }

    fn install(&self, snap: Snapshot, prev: Option<&Snapshot>) {
        if let Some(dir) = &self.dir {
            if let Err(e) = write_atomic(&dir.join(SNAPSHOT_FILE), snap.to_json().as_bytes()) {
                *self.last_error.lock().unwrap() = Some(format!("writing snapshot: {e}"));
            }
        }
        if let Some(rho) = prev.and_then(|p| snap.agreement(p)) {
            self.agreement_bits.store(rho.to_bits(), Ordering::SeqCst);
            self.has_agreement.store(true, Ordering::SeqCst);
        }
        let round = snap.round;
        let mut slot = self.snapshot.write().unwrap();
        if slot.as_ref().is_none_or(|s| s.round < round) {
            *slot = Some(Arc::new(snap));
            self.rounds.store(round, Ordering::SeqCst);
        }
    }

    /// Chooses a pair that is neither pending nor (when avoidable) already
    /// annotated, and marks it pending.
    pub fn next_pair(&self) -> Result<IssuedPair, ServiceError> {
        let items = self.ready_items()?;
        let snap = self.snapshot();
        let ids = items.ids();
        let means = snap.as_ref().map(|s| s.means());
        let req = self.requests.fetch_add(1, Ordering::SeqCst);
        let mut rng = seed::rng_for(seed::derive(self.cfg.seed, TAG_NEXT), req);
        // pseudo pairs are labeled at retrain time; only the query is served
        let sampler = SamplerConfig {
            strategy: match self.cfg.sampler.strategy {
                Strategy::HardPseudo => Strategy::Hard,
                s => s,
            },
            ..self.cfg.sampler.clone()
        };

        let mut ledger = self.ledger.lock().unwrap();
        self.expire(&mut ledger);
        let pending: HashSet<UnorderedPair> = ledger
            .pending
            .values()
            .map(|p| UnorderedPair::new(p.pair.0, p.pair.1))
            .collect();
        let mut exclude: HashSet<UnorderedPair> = pending.union(&ledger.annotated).copied().collect();
        let mut pick = None;
        for _ in 0..2 {
            let out = sample_pairs_excluding(&sampler, &ids, means.as_deref(), 1, &exclude, &mut rng)?;
            pick = out
                .query
                .first()
                .copied()
                .filter(|&(a, b)| !exclude.contains(&UnorderedPair::new(a, b)));
            if pick.is_some() {
                break;
            }
            // every fresh pair is in use: allow repeats of annotated pairs
            exclude = pending.clone();
        }
        let (a, b) = pick.ok_or(ServiceError::AllPending)?;
        let pair_id = self.next_pair_id.fetch_add(1, Ordering::SeqCst);
        ledger.pending.insert(
            pair_id,
            Pending {
                pair: (a, b),
                issued: Instant::now(),
            },
        );
        Ok(IssuedPair {
            pair_id,
            a,
            b,
            round: snap.map_or(0, |s| s.round),
        })
    }

    /// Appends the outcome of a pending pair to the log, and queues a retrain
    /// on every `R`-th acceptance.
    pub fn submit(&self, pair_id: u64, outcome: f64) -> Result<Accepted, ServiceError> {
        self.ready_items()?;
        let outcome = Outcome::from_score(outcome).ok_or(ServiceError::InvalidOutcome(outcome))?;
        let mut ledger = self.ledger.lock().unwrap();
        self.expire(&mut ledger);
        if ledger.submitted.contains(&pair_id) {
            return Err(ServiceError::Duplicate(pair_id));
        }
        let p = ledger
            .pending
            .get(&pair_id)
            .copied()
            .ok_or(ServiceError::UnknownPair(pair_id))?;
        let c = Comparison::new(p.pair.0, p.pair.1, outcome)?;
        if let Some(f) = ledger.file.as_mut() {
            f.write_all(comparison_csv_line(&c).as_bytes())?;
            f.flush()?;
        }
        ledger.pending.remove(&pair_id);
        ledger.submitted.insert(pair_id);
        ledger.annotated.insert(UnorderedPair::new(c.a(), c.b()));
        ledger.log.push(c);
        let total = ledger.log.len();
        self.annotations.store(total, Ordering::SeqCst);
        let retrain = total.is_multiple_of(self.cfg.round_size);
        if retrain {
            self.queued.fetch_add(1, Ordering::SeqCst);
            let round = (total / self.cfg.round_size) as u64;
            if let Some(tx) = self.jobs.lock().unwrap().as_ref() {
                tx.send(round).expect("worker alive");
            }
        }
        Ok(Accepted {
            accepted: true,
            annotations_total: total,
            retrain_triggered: retrain,
        })
    }

    fn expire(&self, ledger: &mut Ledger) {
        let ttl = Duration::from_secs(self.cfg.pending_ttl_secs);
        ledger.pending.retain(|_, p| p.issued.elapsed() < ttl);
    }

    /// Counters only; no lock on the log or the snapshot.
    pub fn status(&self) -> Status {
        Status {
            annotations_total: self.annotations.load(Ordering::SeqCst),
            rounds_completed: self.rounds.load(Ordering::SeqCst),
            strategy: self.cfg.sampler.strategy,
            training: self.queued.load(Ordering::SeqCst) > 0,
            last_spearman_vs_self: self
                .has_agreement
                .load(Ordering::SeqCst)
                .then(|| f64::from_bits(self.agreement_bits.load(Ordering::SeqCst))),
            round_size: self.cfg.round_size,
            pending: self.ledger.try_lock().map_or(0, |l| l.pending.len()),
            ready: self.items.get().is_some(),
            last_error: self.last_error.try_lock().ok().and_then(|e| e.clone()),
        }
    }
}

/// Prepares `dir`: writes the header and an empty log for a new session, or
/// checks the header and reads the log of an existing one.
fn open_dir(dir: &Path, header: &SessionHeader, items: &ItemTable) -> Result<Vec<Comparison>, ServiceError> {
    fs::create_dir_all(dir)?;
    let head_path = dir.join(SESSION_FILE);
    let log_path = dir.join(LOG_FILE);
    if head_path.exists() {
        let saved: SessionHeader = serde_json::from_str(&fs::read_to_string(&head_path)?)
            .map_err(|e| ServiceError::Snapshot(format!("{}: {e}", head_path.display())))?;
        if &saved != header {
            return Err(ServiceError::HeaderMismatch(head_path.display().to_string()));
        }
        let log = read_comparisons(File::open(&log_path)?)?;
        for c in &log {
            items.features(c.a())?;
            items.features(c.b())?;
        }
        return Ok(log);
    }
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    write_atomic(&head_path, json.as_bytes())?;
    write_comparisons(File::create(&log_path)?, &[])?;
    Ok(Vec::new())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}
