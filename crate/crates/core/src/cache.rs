// SPDX-License-Identifier: Apache-2.0

//! Block-granular prefix cache.
//!
//! Token sequences are cut into fixed-size blocks and each block is keyed
//! by a hash chained on its parent's key, so a key identifies the whole
//! prefix that ends at that block. Resident blocks form a prefix-closed
//! trie. Eviction only removes leaves, least recently used first; when an
//! insertion runs out of room the remaining suffix blocks are dropped
//! rather than stored.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};

pub type BlockHash = u64;

pub const DEFAULT_BLOCK_TOKENS: u64 = 16;

const ROOT: BlockHash = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub block_tokens: u64,
    pub capacity_tokens: u64,
}

impl CacheConfig {
    pub fn new(block_tokens: u64, capacity_tokens: u64) -> Result<Self> {
        if block_tokens == 0 {
            return Err(Error::config("block_tokens must be >= 1"));
        }
        Ok(CacheConfig {
            block_tokens,
            capacity_tokens,
        })
    }

    pub fn with_capacity(capacity_tokens: u64) -> Self {
        CacheConfig {
            block_tokens: DEFAULT_BLOCK_TOKENS,
            capacity_tokens,
        }
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.capacity_tokens / self.block_tokens
    }
}

/// Chained hashes of every complete block of `tokens`. A trailing partial
/// block is ignored.
pub fn block_hashes(tokens: &[u32], block_tokens: u64) -> Vec<BlockHash> {
    let mut parent = ROOT;
    tokens
        .chunks_exact(block_tokens as usize)
        .map(|block| {
            parent = hash_block(parent, block);
            parent
        })
        .collect()
}

fn hash_block(parent: BlockHash, block: &[u32]) -> BlockHash {
    // FNV-1a over the parent key and token bytes, then a splitmix64 finish.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ parent;
    for &t in block {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Stamp(f64);

impl Eq for Stamp {}

impl PartialOrd for Stamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Stamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Leaf ordering: least recently used first, then oldest insertion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct LeafKey {
    last_use: Stamp,
    seq: u64,
    hash: BlockHash,
}

#[derive(Debug, Clone)]
struct Node {
    parent: Option<BlockHash>,
    children: u32,
    last_use: Stamp,
    seq: u64,
}

impl Node {
    fn leaf_key(&self, hash: BlockHash) -> LeafKey {
        LeafKey {
            last_use: self.last_use,
            seq: self.seq,
            hash,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrefixCache {
    config: CacheConfig,
    nodes: HashMap<BlockHash, Node>,
    leaves: BTreeSet<LeafKey>,
    used_tokens: u64,
    next_seq: u64,
}

impl PrefixCache {
    pub fn new(config: CacheConfig) -> Self {
        PrefixCache {
            config,
            nodes: HashMap::new(),
            leaves: BTreeSet::new(),
            used_tokens: 0,
            next_seq: 0,
        }
    }

    pub fn config(&self) -> CacheConfig {
        self.config
    }

    pub fn used_tokens(&self) -> u64 {
        self.used_tokens
    }

    pub fn resident_blocks(&self) -> usize {
        self.nodes.len()
    }

    pub fn hashes(&self, tokens: &[u32]) -> Vec<BlockHash> {
        block_hashes(tokens, self.config.block_tokens)
    }

    /// Cached prefix length of `tokens`, block aligned. Read-only.
    pub fn match_tokens(&self, tokens: &[u32]) -> u64 {
        self.match_chain(&self.hashes(tokens))
    }

    /// Same as [`match_tokens`](Self::match_tokens) on a precomputed chain.
    pub fn match_chain(&self, chain: &[BlockHash]) -> u64 {
        self.resident_prefix_blocks(chain) as u64 * self.config.block_tokens
    }

    // Residency along a chain is monotone (prefix closure), so bisect.
    fn resident_prefix_blocks(&self, chain: &[BlockHash]) -> usize {
        chain.partition_point(|h| self.nodes.contains_key(h))
    }

    pub fn insert(&mut self, tokens: &[u32], now: f64) -> u64 {
        let chain = self.hashes(tokens);
        self.insert_chain(&chain, now)
    }

    /// Touch the resident part of `chain`, then admit new blocks while
    /// room can be made by evicting leaves off the insertion path. Blocks
    /// that do not fit are discarded. Returns the resident prefix length.
    pub fn insert_chain(&mut self, chain: &[BlockHash], now: f64) -> u64 {
        let bt = self.config.block_tokens;
        let cap = self.config.capacity_blocks() * bt;
        let mut resident = 0usize;
        for (i, &hash) in chain.iter().enumerate() {
            let parent = i.checked_sub(1).map(|j| chain[j]);
            if self.nodes.contains_key(&hash) {
                self.touch(hash, now);
                resident = i + 1;
                continue;
            }
            if self.used_tokens + bt > cap {
                // Only the parent can be a leaf on the insertion path.
                if cap < bt || !self.evict_one(|h| Some(h) == parent) {
                    break;
                }
            }
            self.admit(hash, parent, now);
            resident = i + 1;
        }
        resident as u64 * bt
    }

    /// Evict LRU leaves outside `protect` until at least `needed_tokens`
    /// of headroom exist. Nothing is evicted when the target is
    /// unreachable.
    pub fn evict_to(&mut self, needed_tokens: u64, protect: &[BlockHash]) -> Result<u64> {
        let bt = self.config.block_tokens;
        let cap = self.config.capacity_blocks() * bt;
        let headroom = cap - self.used_tokens;
        if headroom >= needed_tokens {
            return Ok(0);
        }
        let protected: HashSet<BlockHash> = protect.iter().copied().collect();
        let pinned = self.protected_closure(&protected);
        let evictable = (self.nodes.len() - pinned) as u64 * bt;
        if needed_tokens > cap || headroom + evictable < needed_tokens {
            return Err(Error::Shortfall {
                needed: needed_tokens,
                available: headroom + evictable,
            });
        }
        let mut freed = 0;
        while cap - self.used_tokens < needed_tokens {
            let evicted = self.evict_one(|h| protected.contains(&h));
            debug_assert!(evicted);
            freed += bt;
        }
        Ok(freed)
    }

    /// Resident nodes that are protected or ancestors of protected nodes.
    fn protected_closure(&self, protected: &HashSet<BlockHash>) -> usize {
        let mut seen = HashSet::new();
        for &h in protected {
            let mut cur = Some(h);
            while let Some(c) = cur {
                let Some(node) = self.nodes.get(&c) else { break };
                if !seen.insert(c) {
                    break;
                }
                cur = node.parent;
            }
        }
        seen.len()
    }

    fn touch(&mut self, hash: BlockHash, now: f64) {
        let node = self.nodes.get_mut(&hash).expect("resident");
        let old = node.leaf_key(hash);
        node.last_use = Stamp(now);
        if node.children == 0 {
            self.leaves.remove(&old);
            self.leaves.insert(node.leaf_key(hash));
        }
    }

    fn admit(&mut self, hash: BlockHash, parent: Option<BlockHash>, now: f64) {
        if let Some(p) = parent {
            let pn = self.nodes.get_mut(&p).expect("parent resident");
            if pn.children == 0 {
                self.leaves.remove(&pn.leaf_key(p));
            }
            pn.children += 1;
        }
        let node = Node {
            parent,
            children: 0,
            last_use: Stamp(now),
            seq: self.next_seq,
        };
        self.next_seq += 1;
        self.leaves.insert(node.leaf_key(hash));
        self.nodes.insert(hash, node);
        self.used_tokens += self.config.block_tokens;
    }

    /// Remove the least recently used leaf for which `skip` is false.
    fn evict_one(&mut self, skip: impl Fn(BlockHash) -> bool) -> bool {
        let Some(key) = self.leaves.iter().find(|k| !skip(k.hash)).copied() else {
            return false;
        };
        self.leaves.remove(&key);
        let node = self.nodes.remove(&key.hash).expect("leaf resident");
        if let Some(p) = node.parent {
            let pn = self.nodes.get_mut(&p).expect("parent resident");
            pn.children -= 1;
            if pn.children == 0 {
                self.leaves.insert(pn.leaf_key(p));
            }
        }
        self.used_tokens -= self.config.block_tokens;
        true
    }

    /// Verify the structural invariants; used by tests.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let bt = self.config.block_tokens;
        if self.used_tokens != self.nodes.len() as u64 * bt {
            return Err("used_tokens != blocks * block_tokens".into());
        }
        if self.used_tokens > self.config.capacity_tokens {
            return Err("over capacity".into());
        }
        let mut children: HashMap<BlockHash, u32> = HashMap::new();
        for node in self.nodes.values() {
            if let Some(p) = node.parent {
                if !self.nodes.contains_key(&p) {
                    return Err("prefix closure violated".into());
                }
                *children.entry(p).or_default() += 1;
            }
        }
        for (h, node) in &self.nodes {
            let expect = children.get(h).copied().unwrap_or(0);
            if node.children != expect {
                return Err("child count out of sync".into());
            }
            if (node.children == 0) != self.leaves.contains(&node.leaf_key(*h)) {
                return Err("leaf index out of sync".into());
            }
        }
        if self.leaves.len() != self.nodes.values().filter(|n| n.children == 0).count() {
            return Err("stale leaf entries".into());
        }
        Ok(())
    }
}
