//! Reservoir-sampled memory and half/half batch composition for the
//! replay-equipped variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{ClassId, SampleId};

/// One stored training item.
pub type MemoryItem = (SampleId, ClassId);

/// Capacity-bounded store where every streamed item ends up kept with equal
/// probability `capacity / seen`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<MemoryItem>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            seen: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn items(&self) -> &[MemoryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total stream items observed, stored or not.
    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Classic reservoir step: append while below capacity, otherwise replace
    /// a uniformly chosen slot with probability `capacity / (seen + 1)`.
    /// Zero-capacity buffers still count what streamed past.
    pub fn update(&mut self, item: MemoryItem, rng: &mut impl Rng) {
        if self.capacity > 0 {
            if self.items.len() < self.capacity {
                self.items.push(item);
            } else {
                let slot = rng.random_range(0..=self.seen);
                if (slot as usize) < self.capacity {
                    self.items[slot as usize] = item;
                }
            }
        }
        self.seen += 1;
    }

    /// Streamed batch plus up to `stream.len()` memory items sampled without
    /// replacement, so a full buffer doubles the training batch.
    pub fn compose_batch(&self, stream: &[MemoryItem], rng: &mut impl Rng) -> Vec<MemoryItem> {
        let take = stream.len().min(self.items.len());
        let mut batch = stream.to_vec();
        if take > 0 {
            let picked = rand::seq::index::sample(rng, self.items.len(), take);
            batch.extend(picked.iter().map(|i| self.items[i]));
        }
        batch
    }
}
