//! Experience replay.
//!
//! [`UniformReplay`] is a plain ring buffer. [`RankedReplay`] implements
//! rank-based prioritized replay: transitions live in a ring of slots while an
//! array-backed binary max-heap orders them by `|TD error|`. The heap array
//! position stands in for the rank (`rank = position + 1`), and the array is
//! fully sorted every `sort_every` pushes so that ranks are exact right after.
//!
//! Indices handed out by `sample` are slot ids. They stay valid until the slot
//! is overwritten by a later push.

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: usize,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub transitions: Vec<Transition>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

pub const DEFAULT_CAPACITY: usize = 1_000_000;
pub const DEFAULT_SORT_EVERY: u64 = 1000;
pub const DEFAULT_PER_ALPHA: f64 = 0.7;

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct UniformReplay {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl UniformReplay {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, index: usize) -> Option<&Transition> {
        self.items.get(index)
    }

    /// `m` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch> {
        if self.items.len() < m || m == 0 {
            return Err(Error::InsufficientData {
                need: m.max(1),
                have: self.items.len(),
            });
        }
        let indices: Vec<usize> = (0..m).map(|_| rng.gen_range(0..self.items.len())).collect();
        let transitions = indices.iter().map(|&i| self.items[i].clone()).collect();
        Ok(Batch {
            indices,
            transitions,
        })
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct HeapEntry {
    key: f64,
    /// Insertion sequence number; on equal keys the newer entry ranks higher.
    seq: u64,
    slot: usize,
}

impl HeapEntry {
    fn outranks(&self, other: &HeapEntry) -> bool {
        self.key > other.key || (self.key == other.key && self.seq > other.seq)
    }
}

#[derive(Debug, Clone)]
pub struct RankedReplay {
    capacity: usize,
    alpha: f64,
    sort_every: u64,
    slots: Vec<Transition>,
    next_slot: usize,
    heap: Vec<HeapEntry>,
    /// Heap position of every slot.
    position: Vec<usize>,
    seq: u64,
    pushes: u64,
    last_sort: u64,
    /// `cumulative[k] = sum_{r=1}^{k+1} r^-alpha`.
    cumulative: Vec<f64>,
}

impl RankedReplay {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        Self::with_sort_period(capacity, alpha, DEFAULT_SORT_EVERY)
    }

    pub fn with_sort_period(capacity: usize, alpha: f64, sort_every: u64) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        assert!(
            alpha >= 0.0 && alpha.is_finite(),
            "priority exponent must be >= 0"
        );
        assert!(sort_every > 0, "sort period must be positive");
        Self {
            capacity,
            alpha,
            sort_every,
            slots: Vec::new(),
            next_slot: 0,
            heap: Vec::new(),
            position: Vec::new(),
            seq: 0,
            pushes: 0,
            last_sort: 0,
            cumulative: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.slots.get(slot)
    }

    /// Current rank (1 = largest key) of a slot.
    pub fn rank(&self, slot: usize) -> Option<usize> {
        (slot < self.slots.len()).then(|| self.position[slot] + 1)
    }

    pub fn key(&self, slot: usize) -> Option<f64> {
        self.rank(slot).map(|r| self.heap[r - 1].key)
    }

    /// Largest key currently stored (1.0 for an empty buffer).
    pub fn max_key(&self) -> f64 {
        self.heap.first().map_or(1.0, |e| e.key)
    }

    /// Slots in heap-array order, i.e. by approximate rank.
    pub fn slots_by_rank(&self) -> Vec<usize> {
        self.heap.iter().map(|e| e.slot).collect()
    }

    /// Stores `t` with the current maximal key; evicts the oldest slot when full.
    /// Triggers the periodic full sort.
    pub fn push(&mut self, t: Transition) {
        let key = self.max_key();
        self.seq += 1;
        let entry_seq = self.seq;
        if self.slots.len() < self.capacity {
            let slot = self.slots.len();
            self.slots.push(t);
            self.position.push(self.heap.len());
            self.heap.push(HeapEntry {
                key,
                seq: entry_seq,
                slot,
            });
            self.sift_up(self.heap.len() - 1);
            let k = self.cumulative.len();
            if k < self.slots.len() {
                let prev = self.cumulative.last().copied().unwrap_or(0.0);
                self.cumulative
                    .push(prev + ((k + 1) as f64).powf(-self.alpha));
            }
        } else {
            let slot = self.next_slot;
            self.slots[slot] = t;
            let p = self.position[slot];
            self.heap[p].key = key;
            self.heap[p].seq = entry_seq;
            self.restore(p);
        }
        self.next_slot = (self.next_slot + 1) % self.capacity;
        self.pushes += 1;
        self.maybe_sort();
    }

    /// Fully sorts the heap array when the push counter reaches a multiple of
    /// the sort period. Returns whether a sort happened.
    pub fn maybe_sort(&mut self) -> bool {
        if self.pushes > 0
            && self.pushes.is_multiple_of(self.sort_every)
            && self.last_sort != self.pushes
        {
            self.sort();
            self.last_sort = self.pushes;
            true
        } else {
            false
        }
    }

    /// Sorts the heap array descending so that positions are exact ranks.
    pub fn sort(&mut self) {
        self.heap.sort_by(|a, b| {
            b.key
                .partial_cmp(&a.key)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.seq.cmp(&a.seq))
        });
        for (p, e) in self.heap.iter().enumerate() {
            self.position[e.slot] = p;
        }
    }

    /// Probability of drawing the transition at each rank, rank 1 first.
    pub fn rank_probabilities(&self) -> Vec<f64> {
        let n = self.slots.len();
        if n == 0 {
            return Vec::new();
        }
        let total = self.cumulative[n - 1];
        (1..=n)
            .map(|r| (r as f64).powf(-self.alpha) / total)
            .collect()
    }

    pub fn probability(&self, slot: usize) -> Option<f64> {
        let rank = self.rank(slot)?;
        let total = self.cumulative[self.slots.len() - 1];
        Some((rank as f64).powf(-self.alpha) / total)
    }

    /// `m` draws with replacement, probability proportional to `rank^-alpha`.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch> {
        let n = self.slots.len();
        if n < m || m == 0 {
            return Err(Error::InsufficientData {
                need: m.max(1),
                have: n,
            });
        }
        let cum = &self.cumulative[..n];
        let total = cum[n - 1];
        let mut indices = Vec::with_capacity(m);
        for _ in 0..m {
            let u = rng.gen::<f64>() * total;
            let rank_idx = cum.partition_point(|&c| c <= u).min(n - 1);
            indices.push(self.heap[rank_idx].slot);
        }
        let transitions = indices.iter().map(|&i| self.slots[i].clone()).collect();
        Ok(Batch {
            indices,
            transitions,
        })
    }

    /// Importance-sampling weights `(n P(i))^-beta`, normalized by the largest
    /// possible weight.
    pub fn importance_weights(&self, indices: &[usize], beta: f64) -> Result<Vec<f64>> {
        let n = self.slots.len();
        if n == 0 {
            return Err(Error::InsufficientData { need: 1, have: 0 });
        }
        let total = self.cumulative[n - 1];
        let p_min = (n as f64).powf(-self.alpha) / total;
        let w_max = (n as f64 * p_min).powf(-beta);
        indices
            .iter()
            .map(|&i| {
                let p = self
                    .probability(i)
                    .ok_or(Error::IndexOutOfRange { index: i, len: n })?;
                Ok((n as f64 * p).powf(-beta) / w_max)
            })
            .collect()
    }

    /// Sets each slot's key to `|td_error|` and restores the heap property.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        if indices.len() != td_errors.len() {
            return Err(Error::DimensionMismatch {
                context: "priority update",
                expected: indices.len(),
                got: td_errors.len(),
            });
        }
        let n = self.slots.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        for (&slot, &delta) in indices.iter().zip(td_errors) {
            let key = if delta.is_nan() { 0.0 } else { delta.abs() };
            let p = self.position[slot];
            self.heap[p].key = key;
            self.restore(p);
        }
        Ok(())
    }

    /// True iff every parent outranks (or equals) its children.
    pub fn heap_is_valid(&self) -> bool {
        (1..self.heap.len()).all(|i| !self.heap[i].outranks(&self.heap[(i - 1) / 2]))
            && self
                .heap
                .iter()
                .enumerate()
                .all(|(p, e)| self.position[e.slot] == p)
    }

    fn restore(&mut self, p: usize) {
        let p = self.sift_up(p);
        self.sift_down(p);
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.heap.swap(a, b);
        self.position[self.heap[a].slot] = a;
        self.position[self.heap[b].slot] = b;
    }

    fn sift_up(&mut self, mut p: usize) -> usize {
        while p > 0 {
            let parent = (p - 1) / 2;
            if self.heap[p].outranks(&self.heap[parent]) {
                self.swap(p, parent);
                p = parent;
            } else {
                break;
            }
        }
        p
    }

    fn sift_down(&mut self, mut p: usize) {
        let n = self.heap.len();
        loop {
            let (l, r) = (2 * p + 1, 2 * p + 2);
            let mut best = p;
            if l < n && self.heap[l].outranks(&self.heap[best]) {
                best = l;
            }
            if r < n && self.heap[r].outranks(&self.heap[best]) {
                best = r;
            }
            if best == p {
                break;
            }
            self.swap(p, best);
            p = best;
        }
    }
}

// ---------------------------------------------------------------------------

/// The replay strategy an agent trains from.
#[derive(Debug, Clone)]
pub enum Replay {
    Uniform(UniformReplay),
    Ranked(RankedReplay),
}

impl Replay {
    pub fn len(&self) -> usize {
        match self {
            Replay::Uniform(r) => r.len(),
            Replay::Ranked(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, t: Transition) {
        match self {
            Replay::Uniform(r) => r.push(t),
            Replay::Ranked(r) => r.push(t),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Result<Batch> {
        match self {
            Replay::Uniform(r) => r.sample(m, rng),
            Replay::Ranked(r) => r.sample(m, rng),
        }
    }

    /// No-op for uniform replay.
    pub fn update_priorities(&mut self, indices: &[usize], td_errors: &[f64]) -> Result<()> {
        match self {
            Replay::Uniform(_) => Ok(()),
            Replay::Ranked(r) => r.update_priorities(indices, td_errors),
        }
    }

    /// Importance weights; all ones for uniform replay.
    pub fn importance_weights(&self, indices: &[usize], beta: f64) -> Result<Vec<f64>> {
        match self {
            Replay::Uniform(_) => Ok(vec![1.0; indices.len()]),
            Replay::Ranked(r) => r.importance_weights(indices, beta),
        }
    }

    pub fn as_ranked(&self) -> Option<&RankedReplay> {
        match self {
            Replay::Ranked(r) => Some(r),
            Replay::Uniform(_) => None,
        }
    }
}
