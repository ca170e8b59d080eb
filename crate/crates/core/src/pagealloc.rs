//! On-demand KV cache memory.
//!
//! Every model gets its own virtual KV space ([`KvPool`]) made of fixed-size
//! pages. A page is backed by physical GPU memory only while at least one of
//! its token slots is in use. All pools on a GPU draw physical pages from one
//! [`PhysicalLedger`], which also accounts for resident model weights and a
//! small buffer of pre-mapped pages that hides mapping latency.
//!
//! A ledger and its pools form one serialization domain: every mutation goes
//! through `&mut PhysicalLedger`, so two pools can never race for the last
//! free page.

use crate::time::SimTime;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

pub const DEFAULT_PAGE_BYTES: u64 = 2 * 1024 * 1024;
pub const DEFAULT_BUFFER_TARGET_PAGES: u64 = 8;
pub const DEFAULT_MAP_LATENCY_S: f64 = 0.0002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PoolId(pub u32);

/// One allocated token slot. Valid until passed to [`PhysicalLedger::free_kv`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSlotHandle {
    pub pool: PoolId,
    pub page: u32,
    pub slot: u32,
}

/// Which partially filled page receives new tokens first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PagePlacement {
    /// Highest occupancy first, lowest index on ties.
    #[default]
    MostOccupied,
    /// Lowest page index first. Only used as a comparison baseline.
    LowestIndex,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PageAllocError {
    #[error("model {model} already has a KV pool on gpu {gpu}")]
    DuplicatePool { model: String, gpu: usize },
    #[error("token size {token_bytes} B exceeds page size {page_bytes} B")]
    TokenTooLarge { token_bytes: u64, page_bytes: u64 },
    #[error("pool needs at least one virtual page")]
    EmptyPool,
    #[error("unknown pool {0:?}")]
    UnknownPool(PoolId),
    #[error("pool {0:?} was already freed")]
    DoubleFree(PoolId),
    #[error("handle {0:?} refers to a freed pool")]
    UseAfterFree(TokenSlotHandle),
    #[error("handle {0:?} is not live")]
    StaleHandle(TokenSlotHandle),
    #[error("handle {handle:?} does not belong to pool {pool:?}")]
    ForeignHandle { handle: TokenSlotHandle, pool: PoolId },
    /// Expected back-pressure signal; the caller decides whom to preempt.
    #[error("cannot allocate {tokens} tokens: short by {shortfall_pages} pages")]
    AllocFailure { tokens: u64, shortfall_pages: u64 },
    #[error("weights of {owner} need {needed} pages, {available} available")]
    InsufficientMemory { owner: String, needed: u64, available: u64 },
    #[error("weights for {0} are already resident")]
    DuplicateWeights(String),
    #[error("no resident weights for {0}")]
    UnknownWeights(String),
}

#[derive(Debug, Clone)]
struct MappedPage {
    live: Vec<u64>,
    occupied: u32,
}

impl MappedPage {
    fn new(slots: u32) -> Self {
        MappedPage { live: vec![0; (slots as usize).div_ceil(64)], occupied: 0 }
    }

    fn is_live(&self, slot: u32) -> bool {
        self.live[(slot / 64) as usize] >> (slot % 64) & 1 == 1
    }

    fn take_free_slot(&mut self, slots: u32) -> u32 {
        for (w, word) in self.live.iter_mut().enumerate() {
            if *word != u64::MAX {
                let bit = (!*word).trailing_zeros();
                let slot = w as u32 * 64 + bit;
                debug_assert!(slot < slots);
                *word |= 1 << bit;
                self.occupied += 1;
                return slot;
            }
        }
        unreachable!("page reported free slots but has none")
    }

    fn release(&mut self, slot: u32) {
        self.live[(slot / 64) as usize] &= !(1 << (slot % 64));
        self.occupied -= 1;
    }
}

#[derive(Debug, Clone)]
enum PageState {
    Unmapped,
    Mapped(MappedPage),
}

/// A model's virtual KV space.
#[derive(Debug, Clone)]
pub struct KvPool {
    id: PoolId,
    model_id: String,
    token_bytes: u64,
    tokens_per_page: u32,
    pages: Vec<PageState>,
    /// Mapped pages with at least one free slot, keyed so the first entry is
    /// the next page to fill under the pool's placement rule.
    partial: BTreeSet<(u32, u32)>,
    unmapped: BTreeSet<u32>,
    mapped: u64,
    free_mapped_slots: u64,
    live_tokens: u64,
    placement: PagePlacement,
    cap_pages: Option<u64>,
}

impl KvPool {
    pub fn id(&self) -> PoolId {
        self.id
    }
    pub fn model_id(&self) -> &str {
        &self.model_id
    }
    pub fn token_bytes(&self) -> u64 {
        self.token_bytes
    }
    pub fn tokens_per_page(&self) -> u32 {
        self.tokens_per_page
    }
    pub fn virtual_capacity_pages(&self) -> u32 {
        self.pages.len() as u32
    }
    pub fn mapped_pages(&self) -> u64 {
        self.mapped
    }
    pub fn live_tokens(&self) -> u64 {
        self.live_tokens
    }
    pub fn cap_pages(&self) -> Option<u64> {
        self.cap_pages
    }

    /// Occupancy of page `idx`, or `None` when it is unmapped.
    pub fn page_occupancy(&self, idx: u32) -> Option<u32> {
        match &self.pages[idx as usize] {
            PageState::Unmapped => None,
            PageState::Mapped(p) => Some(p.occupied),
        }
    }

    fn partial_key(&self, idx: u32, occupied: u32) -> (u32, u32) {
        match self.placement {
            PagePlacement::MostOccupied => (self.tokens_per_page - occupied, idx),
            PagePlacement::LowestIndex => (0, idx),
        }
    }

    /// New physical pages an allocation of `tokens` would have to map.
    pub fn pages_needed(&self, tokens: u64) -> u64 {
        tokens.saturating_sub(self.free_mapped_slots).div_ceil(u64::from(self.tokens_per_page))
    }

    /// Pages the pool may still map, from its virtual space and optional cap.
    fn mappable_pages(&self) -> u64 {
        let virt = self.unmapped.len() as u64;
        match self.cap_pages {
            Some(cap) => virt.min(cap.saturating_sub(self.mapped)),
            None => virt,
        }
    }
}

enum PoolSlot {
    Live(Box<KvPool>),
    Freed,
}

/// Result of a successful [`PhysicalLedger::alloc_kv`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Allocation {
    pub handles: Vec<TokenSlotHandle>,
    /// Pages taken from the pre-mapped buffer (no latency).
    pub buffer_hits: u64,
    /// Pages mapped on the allocation path (charged mapping latency).
    pub direct_maps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocEventKind {
    Map,
    Unmap,
    BufferHit,
    AllocFail,
}

impl AllocEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AllocEventKind::Map => "map",
            AllocEventKind::Unmap => "unmap",
            AllocEventKind::BufferHit => "buffer_hit",
            AllocEventKind::AllocFail => "alloc_fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocEvent {
    pub time: SimTime,
    pub gpu: usize,
    pub model: String,
    pub event: AllocEventKind,
    pub pages: u64,
}

/// Physical page accounting for one GPU.
pub struct PhysicalLedger {
    gpu: usize,
    page_bytes: u64,
    capacity_pages: u64,
    kv_mapped: u64,
    weights: BTreeMap<String, u64>,
    weight_pages: u64,
    buffer_pages: u64,
    map_latency: SimTime,
    pools: Vec<PoolSlot>,
    by_model: BTreeMap<String, PoolId>,
    now: SimTime,
    log: Option<Vec<AllocEvent>>,
}

impl std::fmt::Debug for PhysicalLedger {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PhysicalLedger")
            .field("gpu", &self.gpu)
            .field("capacity_pages", &self.capacity_pages)
            .field("kv_mapped", &self.kv_mapped)
            .field("weight_pages", &self.weight_pages)
            .field("buffer_pages", &self.buffer_pages)
            .finish()
    }
}

impl PhysicalLedger {
    pub fn new(gpu: usize, capacity_bytes: u64, page_bytes: u64) -> Self {
        assert!(page_bytes > 0, "page size must be positive");
        PhysicalLedger {
            gpu,
            page_bytes,
            capacity_pages: capacity_bytes / page_bytes,
            kv_mapped: 0,
            weights: BTreeMap::new(),
            weight_pages: 0,
            buffer_pages: 0,
            map_latency: SimTime::from_secs(DEFAULT_MAP_LATENCY_S),
            pools: Vec::new(),
            by_model: BTreeMap::new(),
            now: SimTime::ZERO,
            log: None,
        }
    }

    pub fn with_map_latency(mut self, secs: f64) -> Self {
        self.map_latency = SimTime::from_secs(secs);
        self
    }

    pub fn enable_event_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn take_event_log(&mut self) -> Vec<AllocEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Timestamp attached to subsequent log records.
    pub fn set_time(&mut self, now: SimTime) {
        self.now = now;
    }

    pub fn gpu(&self) -> usize {
        self.gpu
    }
    pub fn page_bytes(&self) -> u64 {
        self.page_bytes
    }
    pub fn capacity_pages(&self) -> u64 {
        self.capacity_pages
    }
    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_pages * self.page_bytes
    }
    /// Physical pages mapped into KV pools.
    pub fn mapped_pages(&self) -> u64 {
        self.kv_mapped
    }
    pub fn weight_pages(&self) -> u64 {
        self.weight_pages
    }
    pub fn buffer_pages(&self) -> u64 {
        self.buffer_pages
    }
    pub fn map_latency(&self) -> SimTime {
        self.map_latency
    }
    /// Pages neither mapped, holding weights, nor sitting in the buffer.
    pub fn free_pages(&self) -> u64 {
        self.capacity_pages - self.kv_mapped - self.weight_pages - self.buffer_pages
    }
    /// Pages a KV allocation can still obtain (free plus buffered).
    pub fn available_pages(&self) -> u64 {
        self.free_pages() + self.buffer_pages
    }

    pub fn pages_for_bytes(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.page_bytes)
    }

    fn record(&mut self, model: &str, event: AllocEventKind, pages: u64) {
        if pages == 0 {
            return;
        }
        let (time, gpu) = (self.now, self.gpu);
        if let Some(log) = self.log.as_mut() {
            log.push(AllocEvent { time, gpu, model: model.to_string(), event, pages });
        }
    }

    fn live(&self, id: PoolId) -> Result<&KvPool, PageAllocError> {
        match self.pools.get(id.0 as usize) {
            Some(PoolSlot::Live(p)) => Ok(p),
            Some(PoolSlot::Freed) => Err(PageAllocError::DoubleFree(id)),
            None => Err(PageAllocError::UnknownPool(id)),
        }
    }

    fn live_mut(&mut self, id: PoolId) -> Result<&mut KvPool, PageAllocError> {
        match self.pools.get_mut(id.0 as usize) {
            Some(PoolSlot::Live(p)) => Ok(p),
            Some(PoolSlot::Freed) => Err(PageAllocError::DoubleFree(id)),
            None => Err(PageAllocError::UnknownPool(id)),
        }
    }

    pub fn pool(&self, id: PoolId) -> Option<&KvPool> {
        self.live(id).ok()
    }

    pub fn pool_for_model(&self, model: &str) -> Option<PoolId> {
        self.by_model.get(model).copied()
    }

    pub fn live_pools(&self) -> impl Iterator<Item = &KvPool> {
        self.pools.iter().filter_map(|s| match s {
            PoolSlot::Live(p) => Some(p.as_ref()),
            PoolSlot::Freed => None,
        })
    }

    /// Reserve a virtual KV space. Consumes no physical pages.
    pub fn alloc_kvcache(
        &mut self,
        model_id: &str,
        token_bytes: u64,
        virtual_capacity_pages: u32,
    ) -> Result<PoolId, PageAllocError> {
        self.alloc_kvcache_with(model_id, token_bytes, virtual_capacity_pages, PagePlacement::MostOccupied)
    }

    pub fn alloc_kvcache_with(
        &mut self,
        model_id: &str,
        token_bytes: u64,
        virtual_capacity_pages: u32,
        placement: PagePlacement,
    ) -> Result<PoolId, PageAllocError> {
        if token_bytes == 0 || token_bytes > self.page_bytes {
            return Err(PageAllocError::TokenTooLarge { token_bytes, page_bytes: self.page_bytes });
        }
        if virtual_capacity_pages == 0 {
            return Err(PageAllocError::EmptyPool);
        }
        if self.by_model.contains_key(model_id) {
            return Err(PageAllocError::DuplicatePool { model: model_id.to_string(), gpu: self.gpu });
        }
        let id = PoolId(self.pools.len() as u32);
        let pool = KvPool {
            id,
            model_id: model_id.to_string(),
            token_bytes,
            tokens_per_page: (self.page_bytes / token_bytes) as u32,
            pages: vec![PageState::Unmapped; virtual_capacity_pages as usize],
            partial: BTreeSet::new(),
            unmapped: (0..virtual_capacity_pages).collect(),
            mapped: 0,
            free_mapped_slots: 0,
            live_tokens: 0,
            placement,
            cap_pages: None,
        };
        self.pools.push(PoolSlot::Live(Box::new(pool)));
        self.by_model.insert(model_id.to_string(), id);
        Ok(id)
    }

    /// Hard cap on the physical pages a pool may map (static partitioning).
    pub fn set_pool_cap(&mut self, id: PoolId, cap_pages: Option<u64>) -> Result<(), PageAllocError> {
        self.live_mut(id)?.cap_pages = cap_pages;
        Ok(())
    }

    /// Destroy a pool, unmapping all of its pages. Returns the pages released.
    pub fn free_kvcache(&mut self, id: PoolId) -> Result<u64, PageAllocError> {
        let pool = match self.pools.get_mut(id.0 as usize) {
            Some(slot @ PoolSlot::Live(_)) => match std::mem::replace(slot, PoolSlot::Freed) {
                PoolSlot::Live(p) => p,
                PoolSlot::Freed => unreachable!(),
            },
            Some(PoolSlot::Freed) => return Err(PageAllocError::DoubleFree(id)),
            None => return Err(PageAllocError::UnknownPool(id)),
        };
        self.kv_mapped -= pool.mapped;
        self.by_model.remove(&pool.model_id);
        self.record(&pool.model_id, AllocEventKind::Unmap, pool.mapped);
        Ok(pool.mapped)
    }

    /// `Ok` when `tokens` could be allocated right now, else the shortfall.
    pub fn check_alloc(&self, id: PoolId, tokens: u64) -> Result<u64, PageAllocError> {
        let pool = self.live(id)?;
        let need = pool.pages_needed(tokens);
        let grantable = pool.mappable_pages().min(self.available_pages());
        if need > grantable {
            return Err(PageAllocError::AllocFailure { tokens, shortfall_pages: need - grantable });
        }
        Ok(need)
    }

    /// Allocate `tokens` slots, all or nothing.
    pub fn alloc_kv(&mut self, id: PoolId, tokens: u64) -> Result<Allocation, PageAllocError> {
        if tokens == 0 {
            self.live(id)?;
            return Ok(Allocation::default());
        }
        if let Err(e) = self.check_alloc(id, tokens) {
            if let PageAllocError::AllocFailure { shortfall_pages, .. } = e {
                let model = self.live(id)?.model_id.clone();
                self.record(&model, AllocEventKind::AllocFail, shortfall_pages);
            }
            return Err(e);
        }
        let mut buffer = self.buffer_pages;
        let mut out = Allocation { handles: Vec::with_capacity(tokens as usize), ..Default::default() };
        let pool = self.live_mut(id)?;
        let tpp = pool.tokens_per_page;
        let mut remaining = tokens;
        while remaining > 0 {
            let idx = match pool.partial.pop_first() {
                Some((_, idx)) => idx,
                None => {
                    let idx = pool.unmapped.pop_first().expect("checked virtual capacity");
                    pool.pages[idx as usize] = PageState::Mapped(MappedPage::new(tpp));
                    pool.mapped += 1;
                    pool.free_mapped_slots += u64::from(tpp);
                    if buffer > 0 {
                        buffer -= 1;
                        out.buffer_hits += 1;
                    } else {
                        out.direct_maps += 1;
                    }
                    idx
                }
            };
            let PageState::Mapped(page) = &mut pool.pages[idx as usize] else { unreachable!() };
            while remaining > 0 && page.occupied < tpp {
                let slot = page.take_free_slot(tpp);
                out.handles.push(TokenSlotHandle { pool: id, page: idx, slot });
                remaining -= 1;
            }
            let occ = page.occupied;
            if occ < tpp {
                let key = pool.partial_key(idx, occ);
                pool.partial.insert(key);
            }
        }
        pool.free_mapped_slots -= tokens;
        pool.live_tokens += tokens;
        let model = pool.model_id.clone();
        let new_pages = out.buffer_hits + out.direct_maps;
        self.buffer_pages = buffer;
        self.kv_mapped += new_pages;
        self.record(&model, AllocEventKind::BufferHit, out.buffer_hits);
        self.record(&model, AllocEventKind::Map, out.direct_maps);
        Ok(out)
    }

    /// Release slots; pages left empty are unmapped immediately. Validates
    /// every handle before touching any state.
    pub fn free_kv(&mut self, id: PoolId, handles: &[TokenSlotHandle]) -> Result<u64, PageAllocError> {
        if let Some(PoolSlot::Freed) = self.pools.get(id.0 as usize) {
            if let Some(h) = handles.first() {
                return Err(PageAllocError::UseAfterFree(*h));
            }
        }
        let pool = self.live(id)?;
        let mut keys = Vec::with_capacity(handles.len());
        for h in handles {
            if h.pool != id {
                return Err(match self.pools.get(h.pool.0 as usize) {
                    Some(PoolSlot::Freed) => PageAllocError::UseAfterFree(*h),
                    _ => PageAllocError::ForeignHandle { handle: *h, pool: id },
                });
            }
            let live = match pool.pages.get(h.page as usize) {
                Some(PageState::Mapped(p)) => h.slot < pool.tokens_per_page && p.is_live(h.slot),
                _ => false,
            };
            if !live {
                return Err(PageAllocError::StaleHandle(*h));
            }
            keys.push((h.page, h.slot));
        }
        keys.sort();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(PageAllocError::StaleHandle(TokenSlotHandle { pool: id, page: w[0].0, slot: w[0].1 }));
        }
        let pool = self.live_mut(id)?;
        let tpp = pool.tokens_per_page;
        let mut unmapped = 0;
        let mut start = 0;
        while start < keys.len() {
            let idx = keys[start].0;
            let end = start + keys[start..].iter().take_while(|k| k.0 == idx).count();
            let group = &keys[start..end];
            start = end;
            let PageState::Mapped(page) = &mut pool.pages[idx as usize] else { unreachable!() };
            let before = page.occupied;
            for &(_, slot) in group {
                page.release(slot);
            }
            let after = page.occupied;
            let released = u64::from(before - after);
            if before < tpp {
                let key = pool.partial_key(idx, before);
                pool.partial.remove(&key);
            }
            if after == 0 {
                pool.pages[idx as usize] = PageState::Unmapped;
                pool.unmapped.insert(idx);
                pool.mapped -= 1;
                pool.free_mapped_slots -= u64::from(tpp) - released;
                unmapped += 1;
            } else {
                pool.free_mapped_slots += released;
                let key = pool.partial_key(idx, after);
                pool.partial.insert(key);
            }
        }
        pool.live_tokens -= handles.len() as u64;
        let model = pool.model_id.clone();
        self.kv_mapped -= unmapped;
        self.record(&model, AllocEventKind::Unmap, unmapped);
        Ok(unmapped)
    }

    /// Top the pre-mapped buffer up to `min(target, free capacity)`.
    /// Returns the pages newly mapped into the buffer.
    pub fn refill_buffer(&mut self, target_pages: u64) -> u64 {
        let want = target_pages.saturating_sub(self.buffer_pages);
        let add = want.min(self.free_pages());
        self.buffer_pages += add;
        add
    }

    /// Drop buffered pages beyond `target_pages` (returns pages released).
    pub fn trim_buffer(&mut self, target_pages: u64) -> u64 {
        let drop = self.buffer_pages.saturating_sub(target_pages);
        self.buffer_pages -= drop;
        drop
    }

    /// Charge page-rounded weight memory to `owner`. Buffered pages are
    /// reclaimed when free pages alone do not suffice.
    pub fn reserve_weights(&mut self, owner: &str, bytes: u64) -> Result<u64, PageAllocError> {
        if self.weights.contains_key(owner) {
            return Err(PageAllocError::DuplicateWeights(owner.to_string()));
        }
        let pages = self.pages_for_bytes(bytes);
        let free = self.free_pages();
        if pages > free + self.buffer_pages {
            return Err(PageAllocError::InsufficientMemory {
                owner: owner.to_string(),
                needed: pages,
                available: free + self.buffer_pages,
            });
        }
        if pages > free {
            self.buffer_pages -= pages - free;
        }
        self.weights.insert(owner.to_string(), pages);
        self.weight_pages += pages;
        Ok(pages)
    }

    pub fn release_weights(&mut self, owner: &str) -> Result<u64, PageAllocError> {
        let pages = self
            .weights
            .remove(owner)
            .ok_or_else(|| PageAllocError::UnknownWeights(owner.to_string()))?;
        self.weight_pages -= pages;
        Ok(pages)
    }

    pub fn resident_weights(&self) -> impl Iterator<Item = (&str, u64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Verify ledger/pool consistency; used by tests and the fuzz suite.
    pub fn check_invariants(&self) -> Result<(), String> {
        let pool_sum: u64 = self.live_pools().map(|p| p.mapped).sum();
        if pool_sum != self.kv_mapped {
            return Err(format!("ledger says {} mapped, pools sum to {}", self.kv_mapped, pool_sum));
        }
        let used = self.kv_mapped + self.weight_pages + self.buffer_pages;
        if used > self.capacity_pages {
            return Err(format!("{} pages in use exceeds capacity {}", used, self.capacity_pages));
        }
        for p in self.live_pools() {
            let mut mapped = 0;
            let mut live = 0u64;
            let mut free_slots = 0u64;
            for (i, page) in p.pages.iter().enumerate() {
                match page {
                    PageState::Unmapped => {
                        if !p.unmapped.contains(&(i as u32)) {
                            return Err(format!("pool {:?} page {i} unmapped but not indexed", p.id));
                        }
                    }
                    PageState::Mapped(m) => {
                        mapped += 1;
                        if m.occupied == 0 {
                            return Err(format!("pool {:?} page {i} mapped but empty", p.id));
                        }
                        if m.occupied > p.tokens_per_page {
                            return Err(format!("pool {:?} page {i} over-occupied", p.id));
                        }
                        let bits: u32 = m.live.iter().map(|w| w.count_ones()).sum();
                        if bits != m.occupied {
                            return Err(format!("pool {:?} page {i} occupancy mismatch", p.id));
                        }
                        live += u64::from(m.occupied);
                        free_slots += u64::from(p.tokens_per_page - m.occupied);
                    }
                }
            }
            if mapped != p.mapped || live != p.live_tokens || free_slots != p.free_mapped_slots {
                return Err(format!("pool {:?} counters out of sync", p.id));
            }
            if let Some(cap) = p.cap_pages {
                if p.mapped > cap {
                    return Err(format!("pool {:?} maps {} pages over cap {}", p.id, p.mapped, cap));
                }
            }
        }
        Ok(())
    }
}
