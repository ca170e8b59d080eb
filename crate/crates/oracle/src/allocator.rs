//! Randomized operation sequences against the page allocator, checked
//! against an explicit model of which slots are live.
//!
//! Every sequence drives two ledgers in lockstep: the one under test
//! (most-occupied-first packing) and a roomier shadow that packs lowest
//! index first. The shadow only exists to check that packing never maps
//! more pages than the naive order would.

use gpushare::pagealloc::{PageAllocError, PagePlacement, PhysicalLedger, PoolId, TokenSlotHandle};
use gpushare::rng::indexed_substream;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

pub const PAGE_BYTES: u64 = 2 * 1024 * 1024;
const CAPACITY_PAGES: u64 = 256;
const TOKEN_SIZES: [u64; 4] = [16 * 1024, 32 * 1024, 128 * 1024, 512 * 1024];

#[derive(Debug, Clone)]
struct Request {
    pool: usize,
    handles: Vec<TokenSlotHandle>,
    shadow: Vec<TokenSlotHandle>,
}

#[derive(Debug, Clone)]
struct Pool {
    id: PoolId,
    shadow: PoolId,
    tpp: u64,
}

struct Fuzz {
    main: PhysicalLedger,
    shadow: PhysicalLedger,
    pools: Vec<Option<Pool>>,
    requests: Vec<Request>,
    freed: Vec<(PoolId, Vec<TokenSlotHandle>)>,
    weights: Vec<String>,
    next_name: u64,
}

/// How the packing policy compared with lowest-index placement over one
/// sequence, checked after every operation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PackingStats {
    pub checks: u64,
    /// Checks where some pool mapped more pages than under the naive order.
    pub worse: u64,
    pub first_worse: Option<(usize, String)>,
    /// Pool-pages summed over all checks, for both policies.
    pub mapped_sum: u64,
    pub naive_sum: u64,
}

/// Run `ops` random operations from stream `index` of `seed`. Returns the
/// first hard invariant violation as `(operation index, description)`.
pub fn fuzz_sequence(seed: u64, index: u64, ops: usize) -> Result<PackingStats, (usize, String)> {
    let mut rng = indexed_substream(seed, "fuzz-allocator", index);
    let mut f = Fuzz {
        main: PhysicalLedger::new(0, CAPACITY_PAGES * PAGE_BYTES, PAGE_BYTES),
        shadow: PhysicalLedger::new(0, 8 * CAPACITY_PAGES * PAGE_BYTES, PAGE_BYTES),
        pools: Vec::new(),
        requests: Vec::new(),
        freed: Vec::new(),
        weights: Vec::new(),
        next_name: 0,
    };
    let mut stats = PackingStats::default();
    for op in 0..ops {
        f.step(&mut rng).map_err(|e| (op, e))?;
        f.check().map_err(|e| (op, e))?;
        f.compare_packing(op, &mut stats);
    }
    Ok(stats)
}

impl Fuzz {
    fn live_pools(&self) -> Vec<usize> {
        (0..self.pools.len()).filter(|&i| self.pools[i].is_some()).collect()
    }

    fn step<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        match rng.random_range(0..100) {
            0..=7 => self.create_pool(rng),
            8..=47 => self.alloc(rng),
            48..=79 => self.free(rng),
            80..=83 => self.free_pool(rng),
            84..=88 => {
                self.main.refill_buffer(rng.random_range(0..24));
                Ok(())
            }
            89..=91 => {
                self.main.trim_buffer(rng.random_range(0..8));
                Ok(())
            }
            92..=95 => self.weights_op(rng),
            _ => self.misuse(rng),
        }
    }

    fn create_pool<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        if self.live_pools().len() >= 4 {
            return Ok(());
        }
        let name = format!("m{}", self.next_name);
        self.next_name += 1;
        let token = TOKEN_SIZES[rng.random_range(0..TOKEN_SIZES.len())];
        let virt = rng.random_range(1..=96u32);
        let before = self.main.mapped_pages();
        let id = self.main.alloc_kvcache(&name, token, virt).map_err(|e| format!("create: {e}"))?;
        let shadow = self
            .shadow
            .alloc_kvcache_with(&name, token, virt * 4, PagePlacement::LowestIndex)
            .map_err(|e| format!("shadow create: {e}"))?;
        if self.main.mapped_pages() != before {
            return Err("creating a pool mapped pages".into());
        }
        self.pools.push(Some(Pool { id, shadow, tpp: PAGE_BYTES / token }));
        Ok(())
    }

    fn alloc<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        let live = self.live_pools();
        if live.is_empty() {
            return Ok(());
        }
        let p = live[rng.random_range(0..live.len())];
        let pool = self.pools[p].clone().expect("live");
        let tokens = rng.random_range(1..=300u64);
        let before: BTreeMap<PoolId, (u64, u64)> = self.pool_snapshot();
        let feasible = self.main.check_alloc(pool.id, tokens);
        match self.main.alloc_kv(pool.id, tokens) {
            Ok(a) => {
                if feasible.is_err() {
                    return Err("check_alloc refused an allocation that succeeded".into());
                }
                if a.handles.len() as u64 != tokens || a.handles.iter().any(|h| h.pool != pool.id) {
                    return Err("allocation returned wrong or foreign handles".into());
                }
                let after = self.pool_snapshot();
                for (id, v) in &before {
                    if *id != pool.id && after.get(id) != Some(v) {
                        return Err(format!("allocation in {:?} changed pool {:?}", pool.id, id));
                    }
                }
                let shadow = self.shadow.alloc_kv(pool.shadow, tokens).map_err(|e| format!("shadow alloc: {e}"))?;
                self.requests.push(Request { pool: p, handles: a.handles, shadow: shadow.handles });
            }
            Err(PageAllocError::AllocFailure { .. }) => {
                if feasible.is_ok() {
                    return Err("check_alloc accepted an allocation that failed".into());
                }
                if self.pool_snapshot() != before {
                    return Err("failed allocation changed state".into());
                }
            }
            Err(e) => return Err(format!("alloc: {e}")),
        }
        Ok(())
    }

    fn free<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        if self.requests.is_empty() {
            return Ok(());
        }
        let r = self.requests.swap_remove(rng.random_range(0..self.requests.len()));
        let pool = self.pools[r.pool].clone().expect("requests of freed pools are dropped");
        // free a random prefix first to exercise partial release
        let split = rng.random_range(0..=r.handles.len());
        let mapped_before = self.main.pool(pool.id).expect("live").mapped_pages();
        let mut unmapped = self.main.free_kv(pool.id, &r.handles[..split]).map_err(|e| format!("free: {e}"))?;
        unmapped += self.main.free_kv(pool.id, &r.handles[split..]).map_err(|e| format!("free: {e}"))?;
        let mapped_after = self.main.pool(pool.id).expect("live").mapped_pages();
        if mapped_before - mapped_after != unmapped {
            return Err("free_kv misreported unmapped pages".into());
        }
        self.shadow.free_kv(pool.shadow, &r.shadow).map_err(|e| format!("shadow free: {e}"))?;
        self.remember_freed(pool.id, r.handles);
        Ok(())
    }

    fn remember_freed(&mut self, pool: PoolId, handles: Vec<TokenSlotHandle>) {
        if self.freed.len() >= 32 {
            self.freed.remove(0);
        }
        self.freed.push((pool, handles));
    }

    fn free_pool<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        let live = self.live_pools();
        if live.is_empty() {
            return Ok(());
        }
        let p = live[rng.random_range(0..live.len())];
        let pool = self.pools[p].take().expect("live");
        let before = self.main.mapped_pages();
        let own = self.main.pool(pool.id).expect("live").mapped_pages();
        let released = self.main.free_kvcache(pool.id).map_err(|e| format!("free pool: {e}"))?;
        if released != own || self.main.mapped_pages() != before - own {
            return Err("freeing a pool did not release exactly its pages".into());
        }
        self.shadow.free_kvcache(pool.shadow).map_err(|e| format!("shadow free pool: {e}"))?;
        let (gone, keep): (Vec<_>, Vec<_>) = std::mem::take(&mut self.requests).into_iter().partition(|r| r.pool == p);
        self.requests = keep;
        for r in gone {
            self.remember_freed(pool.id, r.handles);
        }
        if !matches!(self.main.free_kvcache(pool.id), Err(PageAllocError::DoubleFree(_))) {
            return Err("double free of a pool was accepted".into());
        }
        Ok(())
    }

    fn weights_op<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        if !self.weights.is_empty() && rng.random_bool(0.5) {
            let owner = self.weights.swap_remove(rng.random_range(0..self.weights.len()));
            self.main.release_weights(&owner).map_err(|e| format!("release: {e}"))?;
            return Ok(());
        }
        let owner = format!("w{}", self.next_name);
        self.next_name += 1;
        let bytes = rng.random_range(1..=32) * PAGE_BYTES - rng.random_range(0..PAGE_BYTES);
        let room = self.main.free_pages() + self.main.buffer_pages();
        match self.main.reserve_weights(&owner, bytes) {
            Ok(_) => self.weights.push(owner),
            Err(PageAllocError::InsufficientMemory { .. }) if bytes.div_ceil(PAGE_BYTES) > room => {}
            Err(e) => return Err(format!("reserve: {e}")),
        }
        Ok(())
    }

    /// Freed handles and cross-pool handles must be rejected without
    /// touching any state.
    fn misuse<R: Rng>(&mut self, rng: &mut R) -> Result<(), String> {
        let before = self.pool_snapshot();
        if !self.freed.is_empty() {
            let (pool, handles) = &self.freed[rng.random_range(0..self.freed.len())];
            // a freed slot may since have been handed to another request
            let reused = |h: &TokenSlotHandle| self.requests.iter().any(|r| r.handles.contains(h));
            if let Some(h) = handles.iter().find(|h| !reused(h)) {
                if self.main.free_kv(*pool, &[*h]).is_ok() {
                    return Err(format!("stale handle {h:?} was accepted"));
                }
            }
        }
        let live = self.live_pools();
        if live.len() >= 2 {
            if let Some(r) = self.requests.iter().find(|r| r.pool == live[0]) {
                let other = self.pools[live[1]].as_ref().expect("live").id;
                if self.main.free_kv(other, &r.handles[..1]).is_ok() {
                    return Err("foreign handle was accepted".into());
                }
            }
        }
        if self.pool_snapshot() != before {
            return Err("rejected operation changed state".into());
        }
        Ok(())
    }

    fn pool_snapshot(&self) -> BTreeMap<PoolId, (u64, u64)> {
        self.main.live_pools().map(|p| (p.id(), (p.mapped_pages(), p.live_tokens()))).collect()
    }

    fn check(&self) -> Result<(), String> {
        self.main.check_invariants()?;
        self.shadow.check_invariants().map_err(|e| format!("shadow: {e}"))?;
        let m = &self.main;
        if m.mapped_pages() + m.weight_pages() + m.buffer_pages() > m.capacity_pages() {
            return Err("mapped + weights + buffer exceeds capacity".into());
        }
        let mut slots = BTreeSet::new();
        let mut pages: BTreeMap<PoolId, BTreeSet<u32>> = BTreeMap::new();
        let mut tokens: BTreeMap<PoolId, u64> = BTreeMap::new();
        for r in &self.requests {
            let id = self.pools[r.pool].as_ref().expect("live").id;
            for h in &r.handles {
                if !slots.insert((h.pool, h.page, h.slot)) {
                    return Err(format!("slot {h:?} held twice"));
                }
                pages.entry(id).or_default().insert(h.page);
            }
            *tokens.entry(id).or_default() += r.handles.len() as u64;
        }
        for pool in self.pools.iter().flatten() {
            let p = m.pool(pool.id).ok_or("live pool missing from ledger")?;
            let used = pages.get(&pool.id).map_or(0, BTreeSet::len) as u64;
            // on demand: every mapped page holds a live token and vice versa
            if p.mapped_pages() != used {
                return Err(format!("pool {:?} maps {} pages but live tokens use {}", pool.id, p.mapped_pages(), used));
            }
            let live = tokens.get(&pool.id).copied().unwrap_or(0);
            if p.live_tokens() != live {
                return Err(format!("pool {:?} reports {} live tokens, expected {}", pool.id, p.live_tokens(), live));
            }
            if p.mapped_pages() < live.div_ceil(pool.tpp) {
                return Err("fewer pages mapped than tokens need".into());
            }
            if self.shadow.pool(pool.shadow).is_none() {
                return Err("shadow pool missing".into());
            }
        }
        Ok(())
    }

    fn compare_packing(&self, op: usize, stats: &mut PackingStats) {
        stats.checks += 1;
        let mut worse = None;
        for pool in self.pools.iter().flatten() {
            let mapped = self.main.pool(pool.id).map_or(0, |p| p.mapped_pages());
            let naive = self.shadow.pool(pool.shadow).map_or(0, |p| p.mapped_pages());
            stats.mapped_sum += mapped;
            stats.naive_sum += naive;
            if mapped > naive && worse.is_none() {
                worse = Some(format!("pool {:?} maps {mapped} pages, lowest-index order {naive}", pool.id));
            }
        }
        if let Some(w) = worse {
            stats.worse += 1;
            stats.first_worse.get_or_insert((op, w));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_sequences_hold() {
        for i in 0..20 {
            let stats = fuzz_sequence(3, i, 500).unwrap();
            assert_eq!(stats.checks, 500);
        }
    }
}
