//! SpaceSaving counter summary over grid cells.
//!
//! Counters live in a stream-summary structure: a doubly linked list of
//! frequency buckets in ascending order, so increments and min-evictions
//! touch only the affected bucket and its successor. Inside a bucket the
//! members are ordered by (delta descending, cell ascending), which is the
//! eviction tie-break.

use std::cmp::Reverse;
use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::codec::{self, invalid};
use crate::error::Result;
use crate::grid::CellId;

/// One monitored cell: estimated frequency `f` and overestimation bound
/// `delta`; the true frequency lies in `[f - delta, f]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Counter {
    pub cell: CellId,
    pub f: u64,
    pub delta: u64,
}

/// What [`Tsum::update`] did with an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOutcome {
    Incremented {
        slot: usize,
    },
    Inserted {
        slot: usize,
    },
    /// `evicted` held `slot` before the update.
    Replaced {
        slot: usize,
        evicted: Counter,
    },
}

impl UpdateOutcome {
    pub fn slot(&self) -> usize {
        match *self {
            UpdateOutcome::Incremented { slot }
            | UpdateOutcome::Inserted { slot }
            | UpdateOutcome::Replaced { slot, .. } => slot,
        }
    }
}

#[derive(Clone, Debug)]
struct Bucket {
    f: u64,
    members: BTreeSet<(Reverse<u64>, CellId)>,
    prev: Option<usize>,
    next: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Tsum {
    capacity: usize,
    stream_len: u64,
    replacements: u64,
    slots: Vec<Counter>,
    slot_bucket: Vec<usize>,
    index: HashMap<CellId, usize>,
    buckets: Vec<Bucket>,
    free_buckets: Vec<usize>,
    head: Option<usize>,
}

impl Tsum {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "Tsum capacity must be positive");
        Self {
            capacity,
            stream_len: 0,
            replacements: 0,
            slots: Vec::with_capacity(capacity),
            slot_bucket: Vec::with_capacity(capacity),
            index: HashMap::with_capacity(capacity),
            buckets: Vec::new(),
            free_buckets: Vec::new(),
            head: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    /// Number of updates applied.
    pub fn stream_len(&self) -> u64 {
        self.stream_len
    }

    /// Number of evictions so far.
    pub fn replacements(&self) -> u64 {
        self.replacements
    }

    pub fn slot_of(&self, cell: CellId) -> Option<usize> {
        self.index.get(&cell).copied()
    }

    pub fn get(&self, cell: CellId) -> Option<&Counter> {
        self.slot_of(cell).map(|s| &self.slots[s])
    }

    pub fn contains(&self, cell: CellId) -> bool {
        self.index.contains_key(&cell)
    }

    /// Counters in slot order. Slots are stable: a counter keeps its slot
    /// until it is evicted, and the replacement reuses it.
    pub fn slots(&self) -> &[Counter] {
        &self.slots
    }

    pub fn update(&mut self, cell: CellId) -> UpdateOutcome {
        self.stream_len += 1;
        if let Some(slot) = self.slot_of(cell) {
            self.bump(slot);
            return UpdateOutcome::Incremented { slot };
        }
        if self.slots.len() < self.capacity {
            let slot = self.slots.len();
            self.slots.push(Counter { cell, f: 1, delta: 0 });
            self.index.insert(cell, slot);
            let b = match self.head {
                Some(h) if self.buckets[h].f == 1 => h,
                _ => self.new_bucket_after(None, 1),
            };
            self.buckets[b].members.insert((Reverse(0), cell));
            self.slot_bucket.push(b);
            return UpdateOutcome::Inserted { slot };
        }
        let (slot, evicted) = self.evict_min_for(cell);
        UpdateOutcome::Replaced { slot, evicted }
    }

    /// Counts an occurrence of an already monitored cell; returns `None`
    /// (and changes nothing) when the cell is not monitored.
    pub fn increment_existing(&mut self, cell: CellId) -> Option<usize> {
        let slot = self.slot_of(cell)?;
        self.stream_len += 1;
        self.bump(slot);
        Some(slot)
    }

    /// Counter that the next eviction would remove: minimum `f`, then
    /// largest `delta`, then lowest cell.
    pub fn min_counter(&self) -> Option<&Counter> {
        let h = self.head?;
        let (_, cell) = self.buckets[h].members.first()?;
        self.get(*cell)
    }

    pub fn min_frequency(&self) -> Option<u64> {
        self.head.map(|h| self.buckets[h].f)
    }

    /// The first `k` counters by `f` descending, ties broken by lower cell.
    pub fn top_k(&self, k: usize) -> Vec<Counter> {
        let mut all = self.slots.clone();
        all.sort_by(|a, b| b.f.cmp(&a.f).then(a.cell.cmp(&b.cell)));
        all.truncate(k);
        all
    }

    /// Sum of all `f`; equals the number of updates.
    pub fn total_frequency(&self) -> u64 {
        self.slots.iter().map(|c| c.f).sum()
    }

    /// Stored `f` for a monitored cell, otherwise the smallest stored `f`
    /// (0 for an empty summary).
    pub fn frequency_upper_bound(&self, cell: CellId) -> u64 {
        match self.get(cell) {
            Some(c) => c.f,
            None => self.min_frequency().unwrap_or(0),
        }
    }

    fn bump(&mut self, slot: usize) {
        let Counter { cell, f, delta } = self.slots[slot];
        let from = self.slot_bucket[slot];
        let to = self.successor_bucket(from, f + 1);
        self.buckets[to].members.insert((Reverse(delta), cell));
        self.slot_bucket[slot] = to;
        self.slots[slot].f = f + 1;
        self.detach(from, (Reverse(delta), cell));
    }

    fn evict_min_for(&mut self, cell: CellId) -> (usize, Counter) {
        let h = self.head.expect("full summary has a head bucket");
        let key = *self.buckets[h].members.first().expect("non-empty bucket");
        let slot = self.index[&key.1];
        let evicted = self.slots[slot];
        let f = evicted.f + 1;
        let to = self.successor_bucket(h, f);
        self.buckets[to].members.insert((Reverse(evicted.f), cell));
        self.detach(h, key);
        self.index.remove(&evicted.cell);
        self.index.insert(cell, slot);
        self.slots[slot] = Counter { cell, f, delta: evicted.f };
        self.slot_bucket[slot] = to;
        self.replacements += 1;
        (slot, evicted)
    }

    /// Bucket holding frequency `f`, which must be `buckets[b].f + 1`:
    /// either `b`'s successor or a fresh bucket linked right after `b`.
    fn successor_bucket(&mut self, b: usize, f: u64) -> usize {
        match self.buckets[b].next {
            Some(n) if self.buckets[n].f == f => n,
            _ => self.new_bucket_after(Some(b), f),
        }
    }

    fn new_bucket_after(&mut self, prev: Option<usize>, f: u64) -> usize {
        let next = match prev {
            Some(p) => self.buckets[p].next,
            None => self.head,
        };
        let bucket = Bucket { f, members: BTreeSet::new(), prev, next };
        let id = match self.free_buckets.pop() {
            Some(id) => {
                self.buckets[id] = bucket;
                id
            }
            None => {
                self.buckets.push(bucket);
                self.buckets.len() - 1
            }
        };
        match prev {
            Some(p) => self.buckets[p].next = Some(id),
            None => self.head = Some(id),
        }
        if let Some(n) = next {
            self.buckets[n].prev = Some(id);
        }
        id
    }

    fn detach(&mut self, b: usize, key: (Reverse<u64>, CellId)) {
        let bucket = &mut self.buckets[b];
        bucket.members.remove(&key);
        if !bucket.members.is_empty() {
            return;
        }
        let (prev, next) = (bucket.prev, bucket.next);
        match prev {
            Some(p) => self.buckets[p].next = next,
            None => self.head = next,
        }
        if let Some(n) = next {
            self.buckets[n].prev = prev;
        }
        self.free_buckets.push(b);
    }

    /// Rebuilds a summary from stored counters. Eviction order depends only
    /// on (f, delta, cell), so the result behaves exactly like the original.
    pub fn from_counters(capacity: usize, stream_len: u64, counters: &[Counter]) -> std::io::Result<Self> {
        if counters.len() > capacity {
            return Err(invalid("more counters than capacity"));
        }
        let mut sorted = counters.to_vec();
        sorted.sort_by(|a, b| a.f.cmp(&b.f).then(b.delta.cmp(&a.delta)).then(a.cell.cmp(&b.cell)));
        let mut t = Self::new(capacity);
        t.stream_len = stream_len;
        let mut last: Option<usize> = None;
        for c in sorted {
            if c.f == 0 || c.delta > c.f || t.index.contains_key(&c.cell) {
                return Err(invalid(format!("invalid counter {c:?}")));
            }
            let b = match last {
                Some(b) if t.buckets[b].f == c.f => b,
                _ => t.new_bucket_after(last, c.f),
            };
            last = Some(b);
            t.buckets[b].members.insert((Reverse(c.delta), c.cell));
            t.index.insert(c.cell, t.slots.len());
            t.slots.push(c);
            t.slot_bucket.push(b);
        }
        Ok(t)
    }

    const MAGIC: &'static [u8; 4] = b"TSUM";

    /// Binary record: magic, version, capacity, N, count, then
    /// `(cell u32, f u64, delta u64)` triples in `top_k` order.
    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        codec::put_u32(w, 1)?;
        codec::put_u32(w, self.capacity as u32)?;
        codec::put_u64(w, self.stream_len)?;
        codec::put_u32(w, self.slots.len() as u32)?;
        for c in self.top_k(self.capacity) {
            codec::put_u32(w, c.cell.0)?;
            codec::put_u64(w, c.f)?;
            codec::put_u64(w, c.delta)?;
        }
        Ok(())
    }

    pub fn read_binary(r: &mut impl Read) -> std::io::Result<Self> {
        codec::expect_magic(r, Self::MAGIC)?;
        if codec::get_u32(r)? != 1 {
            return Err(invalid("unsupported Tsum version"));
        }
        let capacity = codec::get_u32(r)? as usize;
        let stream_len = codec::get_u64(r)?;
        let n = codec::get_u32(r)? as usize;
        if capacity == 0 || n > capacity {
            return Err(invalid("bad Tsum header"));
        }
        let mut counters = Vec::with_capacity(n);
        for _ in 0..n {
            let cell = CellId(codec::get_u32(r)?);
            let f = codec::get_u64(r)?;
            let delta = codec::get_u64(r)?;
            counters.push(Counter { cell, f, delta });
        }
        Self::from_counters(capacity, stream_len, &counters)
    }

    /// CSV with header `cell_id,f,delta`, rows in `top_k` order.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["cell_id", "f", "delta"])?;
        for c in self.top_k(self.capacity) {
            out.serialize((c.cell.0, c.f, c.delta))?;
        }
        out.flush()?;
        Ok(())
    }

    #[cfg(test)]
    fn check_structure(&self) {
        let mut seen = 0;
        let mut cur = self.head;
        let mut prev_f = 0;
        let mut prev: Option<usize> = None;
        while let Some(b) = cur {
            let bucket = &self.buckets[b];
            assert_eq!(bucket.prev, prev);
            assert!(bucket.f > prev_f);
            assert!(!bucket.members.is_empty());
            for (Reverse(d), cell) in &bucket.members {
                let s = self.index[cell];
                assert_eq!(self.slots[s], Counter { cell: *cell, f: bucket.f, delta: *d });
                assert_eq!(self.slot_bucket[s], b);
                seen += 1;
            }
            prev_f = bucket.f;
            prev = cur;
            cur = bucket.next;
        }
        assert_eq!(seen, self.slots.len());
    }
}
