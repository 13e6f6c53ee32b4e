use std::collections::HashMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{bounded, Receiver, Sender};
use log::warn;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::encoder::{check_dim, encode_each, Encoder};
use crate::error::{PipelineError, Result};
use crate::freshness::{freshness_report, FreshnessReport, Window};
use crate::table::{IndexTable, VersionedRep};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub queue_capacity: usize,
    pub workers: usize,
    /// Most events a worker pulls off the queue for one encoder call.
    pub batch_size: usize,
    /// Simulated encode time per batch, spent on the pipeline clock.
    pub encode_cost_us: u64,
    /// Older versions kept per item.
    pub history: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 1024,
            workers: 2,
            batch_size: 32,
            encode_cost_us: 0,
            history: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEvent {
    pub item_id: u64,
    pub modal_feature: Vec<f32>,
    #[serde(default)]
    pub t_introduced_us: u64,
}

/// One encoded event. `applied` is false when a newer version of the item
/// was already in the table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commit {
    pub item_id: u64,
    pub version: u64,
    pub t_introduced_us: u64,
    pub t_ready_us: u64,
    pub applied: bool,
}

/// An event that never reached the table. Events rejected at ingest carry no
/// version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub item_id: u64,
    pub version: Option<u64>,
    pub error: String,
}

struct Job {
    event: ItemEvent,
    version: u64,
}

struct Shared {
    cfg: PipelineConfig,
    encoder: Arc<dyn Encoder>,
    clock: Arc<dyn Clock>,
    table: IndexTable,
    versions: Mutex<HashMap<u64, u64>>,
    commits: Mutex<Vec<Commit>>,
    dead: Mutex<Vec<DeadLetter>>,
    pending: Mutex<usize>,
    idle: Condvar,
}

/// Threaded ingest → encode → commit engine.
///
/// Producers call [`Pipeline::ingest`], which blocks while the queue is full.
/// Versions are assigned per item at ingest, so they follow ingest order even
/// when two workers finish out of order; the table keeps the highest one.
pub struct Pipeline {
    shared: Arc<Shared>,
    tx: RwLock<Option<Sender<Job>>>,
    rx: Receiver<Job>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl Pipeline {
    /// Builds a pipeline without starting its workers.
    pub fn new(encoder: Arc<dyn Encoder>, clock: Arc<dyn Clock>, cfg: PipelineConfig) -> Self {
        let (tx, rx) = bounded(cfg.queue_capacity);
        Self {
            shared: Arc::new(Shared {
                table: IndexTable::new(cfg.history),
                cfg,
                encoder,
                clock,
                versions: Mutex::new(HashMap::new()),
                commits: Mutex::new(Vec::new()),
                dead: Mutex::new(Vec::new()),
                pending: Mutex::new(0),
                idle: Condvar::new(),
            }),
            tx: RwLock::new(Some(tx)),
            rx,
            workers: Mutex::new(Vec::new()),
        }
    }

    pub fn start(encoder: Arc<dyn Encoder>, clock: Arc<dyn Clock>, cfg: PipelineConfig) -> Self {
        let p = Self::new(encoder, clock, cfg);
        p.spawn_workers();
        p
    }

    /// Starts the configured number of workers (at least one).
    pub fn spawn_workers(&self) {
        let mut workers = self.workers.lock();
        for _ in 0..self.shared.cfg.workers.max(1) {
            let shared = self.shared.clone();
            let rx = self.rx.clone();
            workers.push(std::thread::spawn(move || worker(shared, rx)));
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.shared.cfg
    }

    pub fn clock(&self) -> &dyn Clock {
        self.shared.clock.as_ref()
    }

    /// Queues a new version of `item_id` and returns its version number.
    /// Blocks while the queue is full.
    pub fn ingest(&self, item_id: u64, modal_feature: Vec<f32>) -> Result<u64> {
        let shared = &self.shared;
        if let Err(e) = check_dim(shared.encoder.as_ref(), modal_feature.len()) {
            shared.dead.lock().push(DeadLetter {
                item_id,
                version: None,
                error: e.to_string(),
            });
            return Err(e);
        }
        let tx = self.tx.read().clone().ok_or(PipelineError::Closed)?;
        let version = {
            let mut v = shared.versions.lock();
            let next = v.entry(item_id).or_insert(0);
            *next += 1;
            *next
        };
        *shared.pending.lock() += 1;
        let job = Job {
            event: ItemEvent {
                item_id,
                modal_feature,
                t_introduced_us: shared.clock.now_us(),
            },
            version,
        };
        if tx.send(job).is_err() {
            finish(shared, 1);
            return Err(PipelineError::Closed);
        }
        Ok(version)
    }

    pub fn get(&self, item_id: u64) -> Option<Arc<VersionedRep>> {
        self.shared.table.get(item_id)
    }

    pub fn table(&self) -> &IndexTable {
        &self.shared.table
    }

    /// Events queued or being encoded.
    pub fn pending(&self) -> usize {
        *self.shared.pending.lock()
    }

    /// Blocks until every ingested event is committed or dead-lettered.
    pub fn wait_idle(&self) {
        let mut pending = self.shared.pending.lock();
        while *pending > 0 {
            self.shared.idle.wait(&mut pending);
        }
    }

    /// Stops accepting events; queued ones are still processed.
    pub fn close(&self) {
        self.tx.write().take();
    }

    /// Closes the queue, lets the workers finish it and joins them.
    pub fn drain(&self) {
        self.close();
        if self.workers.lock().is_empty() && !self.rx.is_empty() {
            self.spawn_workers();
        }
        for h in self.workers.lock().drain(..) {
            if h.join().is_err() {
                warn!("pipeline worker panicked");
            }
        }
    }

    pub fn commits(&self) -> Vec<Commit> {
        self.shared.commits.lock().clone()
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter> {
        self.shared.dead.lock().clone()
    }

    pub fn freshness(&self, window: Option<Window>) -> FreshnessReport {
        freshness_report(&self.shared.commits.lock(), window)
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        self.drain();
    }
}

fn finish(shared: &Shared, n: usize) {
    let mut pending = shared.pending.lock();
    *pending -= n;
    if *pending == 0 {
        shared.idle.notify_all();
    }
}

fn worker(shared: Arc<Shared>, rx: Receiver<Job>) {
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        while batch.len() < shared.cfg.batch_size.max(1) {
            match rx.try_recv() {
                Ok(j) => batch.push(j),
                Err(_) => break,
            }
        }
        let rows: Vec<&[f32]> = batch.iter().map(|j| j.event.modal_feature.as_slice()).collect();
        let reps = encode_each(shared.encoder.as_ref(), &rows);
        shared.clock.sleep_us(shared.cfg.encode_cost_us);
        for (job, rep) in batch.iter().zip(reps) {
            match rep {
                Ok(rep) => {
                    let t_ready_us = shared.clock.now_us();
                    let applied = shared.table.commit(VersionedRep {
                        item_id: job.event.item_id,
                        version: job.version,
                        rep,
                        t_introduced_us: job.event.t_introduced_us,
                        t_ready_us,
                    });
                    shared.commits.lock().push(Commit {
                        item_id: job.event.item_id,
                        version: job.version,
                        t_introduced_us: job.event.t_introduced_us,
                        t_ready_us,
                        applied,
                    });
                }
                Err(error) => {
                    warn!("dead-lettered item {} v{}: {error}", job.event.item_id, job.version);
                    shared.dead.lock().push(DeadLetter {
                        item_id: job.event.item_id,
                        version: Some(job.version),
                        error,
                    });
                }
            }
        }
        finish(&shared, batch.len());
    }
}
