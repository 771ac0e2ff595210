use rustc_hash::FxHashMap;

use crate::types::{blocks_needed, RequestId};

/// Block-count view of a paged KV cache. Physical placement is not modelled;
/// only how many blocks each sequence holds.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryManager {
    total_blocks: u64,
    block_size: u64,
    free_blocks: u64,
    held: FxHashMap<RequestId, u64>,
}

impl MemoryManager {
    pub fn new(total_blocks: u64, block_size: u64) -> Self {
        Self {
            total_blocks,
            block_size,
            free_blocks: total_blocks,
            held: FxHashMap::default(),
        }
    }

    pub fn total_blocks(&self) -> u64 {
        self.total_blocks
    }

    pub fn block_size(&self) -> u64 {
        self.block_size
    }

    pub fn free_blocks(&self) -> u64 {
        self.free_blocks
    }

    pub fn held(&self, id: RequestId) -> u64 {
        self.held.get(&id).copied().unwrap_or(0)
    }

    pub fn held_total(&self) -> u64 {
        self.held.values().sum()
    }

    pub fn holders(&self) -> impl Iterator<Item = (RequestId, u64)> + '_ {
        self.held.iter().map(|(&id, &n)| (id, n))
    }

    /// Extra blocks `id` needs to hold `tokens` tokens.
    pub fn growth(&self, id: RequestId, tokens: u64) -> u64 {
        blocks_needed(tokens, self.block_size).saturating_sub(self.held(id))
    }

    /// Grows the allocation of `id` to cover `tokens`. Returns false and
    /// leaves state untouched when free blocks are insufficient.
    pub fn grow_to(&mut self, id: RequestId, tokens: u64) -> bool {
        let extra = self.growth(id, tokens);
        if extra > self.free_blocks {
            return false;
        }
        if extra > 0 {
            self.free_blocks -= extra;
            *self.held.entry(id).or_insert(0) += extra;
        }
        true
    }

    /// Adds `extra` blocks to `id` when the caller already knows the
    /// shortfall. Returns false and leaves state untouched when free blocks
    /// are insufficient.
    pub(crate) fn grow_by(&mut self, id: RequestId, extra: u64) -> bool {
        if extra > self.free_blocks {
            return false;
        }
        if extra > 0 {
            self.free_blocks -= extra;
            *self.held.entry(id).or_insert(0) += extra;
        }
        true
    }

    /// Sets an allocation directly; used when rebuilding state from a
    /// snapshot.
    pub(crate) fn assign(&mut self, id: RequestId, blocks: u64) -> bool {
        if blocks > self.free_blocks {
            return false;
        }
        self.free_blocks -= blocks;
        if blocks > 0 {
            *self.held.entry(id).or_insert(0) += blocks;
        }
        true
    }

    pub(crate) fn set_free(&mut self, free: u64) {
        self.free_blocks = free;
    }

    pub fn release(&mut self, id: RequestId) -> u64 {
        let n = self.held.remove(&id).unwrap_or(0);
        self.free_blocks += n;
        n
    }

    pub fn is_conserved(&self) -> bool {
        self.free_blocks + self.held_total() == self.total_blocks
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grow_allocates_on_block_boundaries() {
        let mut m = MemoryManager::new(10, 16);
        let r = RequestId(1);
        assert!(m.grow_to(r, 16));
        assert_eq!(m.held(r), 1);
        assert!(m.grow_to(r, 17));
        assert_eq!(m.held(r), 2);
        assert!(m.grow_to(r, 32));
        assert_eq!(m.free_blocks(), 8);
        assert!(m.is_conserved());
    }

    #[test]
    fn failed_grow_changes_nothing() {
        let mut m = MemoryManager::new(2, 16);
        assert!(!m.grow_to(RequestId(1), 33));
        assert_eq!(m.free_blocks(), 2);
        assert_eq!(m.held(RequestId(1)), 0);
    }

    #[test]
    fn release_returns_blocks() {
        let mut m = MemoryManager::new(10, 4);
        m.grow_to(RequestId(1), 9);
        assert_eq!(m.release(RequestId(1)), 3);
        assert_eq!(m.free_blocks(), 10);
        assert_eq!(m.release(RequestId(1)), 0);
    }
}
