use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionedRep {
    pub item_id: u64,
    pub version: u64,
    pub rep: Vec<f32>,
    pub t_introduced_us: u64,
    pub t_ready_us: u64,
}

struct Slot {
    latest: Arc<VersionedRep>,
    history: VecDeque<Arc<VersionedRep>>,
}

/// Latest representation per item plus a short history of older versions.
///
/// Entries are immutable `Arc`s swapped under a write lock, so a reader holds
/// either the old or the new vector, never a mix.
pub struct IndexTable {
    slots: RwLock<HashMap<u64, Slot>>,
    history: usize,
}

impl IndexTable {
    pub fn new(history: usize) -> Self {
        Self {
            slots: RwLock::new(HashMap::new()),
            history,
        }
    }

    /// Installs `rep` if its version is newer than the current one. Returns
    /// whether it became the latest.
    pub fn commit(&self, rep: VersionedRep) -> bool {
        let rep = Arc::new(rep);
        let mut slots = self.slots.write();
        match slots.get_mut(&rep.item_id) {
            None => {
                slots.insert(
                    rep.item_id,
                    Slot {
                        latest: rep,
                        history: VecDeque::new(),
                    },
                );
                true
            }
            Some(slot) if rep.version > slot.latest.version => {
                let old = std::mem::replace(&mut slot.latest, rep);
                if self.history > 0 {
                    if slot.history.len() == self.history {
                        slot.history.pop_front();
                    }
                    slot.history.push_back(old);
                }
                true
            }
            Some(_) => false,
        }
    }

    pub fn get(&self, item_id: u64) -> Option<Arc<VersionedRep>> {
        self.slots.read().get(&item_id).map(|s| s.latest.clone())
    }

    /// Older versions, oldest first, excluding the latest.
    pub fn history(&self, item_id: u64) -> Vec<Arc<VersionedRep>> {
        self.slots
            .read()
            .get(&item_id)
            .map(|s| s.history.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.slots.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
