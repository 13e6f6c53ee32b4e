//! Deterministic replay of an event log on virtual time.
//!
//! Workers are modelled as servers that each take the oldest waiting events
//! (up to `batch_size`) as soon as they are free, spend `encode_cost_us` and
//! commit at the end. The encoder really runs; only time is simulated.

use std::io::BufRead;

use serde::Serialize;

use crate::encoder::{check_dim, encode_each, Encoder};
use crate::error::{PipelineError, Result};
use crate::freshness::{freshness_report, FreshnessReport};
use crate::pipeline::{Commit, DeadLetter, ItemEvent, PipelineConfig};
use crate::table::{IndexTable, VersionedRep};

pub struct SimOutcome {
    pub table: IndexTable,
    pub commits: Vec<Commit>,
    pub dead_letters: Vec<DeadLetter>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub events: usize,
    pub commits: usize,
    pub superseded: usize,
    pub dead_letters: usize,
    pub items: usize,
    pub freshness: FreshnessReport,
}

impl SimOutcome {
    pub fn report(&self, events: usize) -> SimReport {
        SimReport {
            events,
            commits: self.commits.len(),
            superseded: self.commits.iter().filter(|c| !c.applied).count(),
            dead_letters: self.dead_letters.len(),
            items: self.table.len(),
            freshness: freshness_report(&self.commits, None),
        }
    }
}

pub fn simulate(events: &[ItemEvent], encoder: &dyn Encoder, cfg: &PipelineConfig) -> SimOutcome {
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.sort_by_key(|&i| events[i].t_introduced_us);

    let mut dead_letters = Vec::new();
    let mut versions = std::collections::HashMap::new();
    let mut queue = Vec::new();
    for i in order {
        let e = &events[i];
        if let Err(err) = check_dim(encoder, e.modal_feature.len()) {
            dead_letters.push(DeadLetter {
                item_id: e.item_id,
                version: None,
                error: err.to_string(),
            });
            continue;
        }
        let v = versions.entry(e.item_id).or_insert(0u64);
        *v += 1;
        queue.push((e, *v));
    }

    let mut free_at = vec![0u64; cfg.workers.max(1)];
    let mut done = Vec::new();
    let mut next = 0;
    while next < queue.len() {
        let w = (0..free_at.len()).min_by_key(|&w| (free_at[w], w)).expect("one worker");
        let start = free_at[w].max(queue[next].0.t_introduced_us);
        let mut end = next + 1;
        while end < queue.len() && end - next < cfg.batch_size.max(1) && queue[end].0.t_introduced_us <= start {
            end += 1;
        }
        let batch = &queue[next..end];
        let rows: Vec<&[f32]> = batch.iter().map(|(e, _)| e.modal_feature.as_slice()).collect();
        let t_ready = start + cfg.encode_cost_us;
        for (&(e, v), rep) in batch.iter().zip(encode_each(encoder, &rows)) {
            match rep {
                Ok(rep) => done.push((t_ready, done.len(), e, v, rep)),
                Err(error) => dead_letters.push(DeadLetter {
                    item_id: e.item_id,
                    version: Some(v),
                    error,
                }),
            }
        }
        free_at[w] = t_ready;
        next = end;
    }

    done.sort_by_key(|d| (d.0, d.1));
    let table = IndexTable::new(cfg.history);
    let commits = done
        .into_iter()
        .map(|(t_ready, _, e, version, rep)| {
            let applied = table.commit(VersionedRep {
                item_id: e.item_id,
                version,
                rep,
                t_introduced_us: e.t_introduced_us,
                t_ready_us: t_ready,
            });
            Commit {
                item_id: e.item_id,
                version,
                t_introduced_us: e.t_introduced_us,
                t_ready_us: t_ready,
                applied,
            }
        })
        .collect();
    SimOutcome {
        table,
        commits,
        dead_letters,
    }
}

/// Reads one [`ItemEvent`] per line; blank lines are skipped.
pub fn read_events(reader: impl BufRead) -> Result<Vec<ItemEvent>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e = serde_json::from_str(&line)
            .map_err(|e| PipelineError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}
