use std::collections::HashMap;
use std::fmt;

use crate::chaos::hermite::factorial;
use crate::error::{Error, Result};

/// Default upper bound on `|A_{p,M_d}|`.
pub const DEFAULT_CARDINALITY_CAP: usize = 20_000;

/// Bumped whenever the enumeration order changes, so persisted models built on
/// an older layout are rejected.
const LAYOUT_VERSION: u64 = 1;

/// A multi-index `a = (a_1, ..., a_{M_d})` of Hermite degrees per basis slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MultiIndex {
    entries: Vec<u32>,
}

impl MultiIndex {
    pub fn new(entries: Vec<u32>) -> Self {
        Self { entries }
    }

    pub fn zero(slots: usize) -> Self {
        Self {
            entries: vec![0; slots],
        }
    }

    /// The unit index `e_s`.
    pub fn unit(slots: usize, s: usize) -> Self {
        let mut entries = vec![0; slots];
        entries[s] = 1;
        Self { entries }
    }

    pub fn entries(&self) -> &[u32] {
        &self.entries
    }

    pub fn slots(&self) -> usize {
        self.entries.len()
    }

    pub fn degree(&self) -> u32 {
        self.entries.iter().sum()
    }

    /// `a! = prod_s a_s!`.
    pub fn factorial(&self) -> f64 {
        self.entries.iter().map(|&k| factorial(k)).product()
    }

    /// Nonzero `(slot, degree)` pairs in slot order.
    pub fn support(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 0)
            .map(|(s, &k)| (s, k))
    }

    /// `a + other`, entrywise.
    pub fn add(&self, other: &MultiIndex) -> MultiIndex {
        MultiIndex::new(
            self.entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{e}")?;
        }
        write!(f, ")")
    }
}

/// `binomial(n + k, k)`, or `None` on overflow.
pub fn index_count(order: u32, slots: usize) -> Option<u128> {
    let mut c: u128 = 1;
    for k in 1..=order as u128 {
        c = c.checked_mul(slots as u128 + k)? / k;
    }
    Some(c)
}

/// All multi-indices over `slots` slots with total degree at most `order`,
/// in graded lexicographic order: by degree, then with larger leading
/// entries first, e.g. `(2,0), (1,1), (0,2)`.
#[derive(Debug, Clone)]
pub struct IndexSet {
    order: u32,
    slots: usize,
    indices: Vec<MultiIndex>,
    sparse: Vec<Vec<(usize, u32)>>,
    lookup: HashMap<Vec<u32>, usize>,
}

impl PartialEq for IndexSet {
    fn eq(&self, other: &Self) -> bool {
        self.order == other.order && self.slots == other.slots
    }
}

impl IndexSet {
    pub fn new(order: u32, slots: usize) -> Result<Self> {
        Self::with_cap(order, slots, DEFAULT_CARDINALITY_CAP)
    }

    pub fn with_cap(order: u32, slots: usize, cap: usize) -> Result<Self> {
        if slots == 0 {
            return Err(crate::error::param("slots", "need at least one basis slot"));
        }
        let count = index_count(order, slots);
        match count {
            Some(c) if c <= cap as u128 => {}
            _ => {
                return Err(Error::IndexSetTooLarge {
                    order,
                    slots,
                    cardinality: count.unwrap_or(u128::MAX),
                    cap,
                })
            }
        }
        let mut indices = Vec::with_capacity(count.unwrap() as usize);
        let mut buf = vec![0u32; slots];
        for degree in 0..=order {
            compositions(degree, 0, &mut buf, &mut indices);
        }
        let sparse = indices
            .iter()
            .map(|a| a.support().collect())
            .collect();
        let lookup = indices
            .iter()
            .enumerate()
            .map(|(i, a)| (a.entries.clone(), i))
            .collect();
        Ok(Self {
            order,
            slots,
            indices,
            sparse,
            lookup,
        })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[MultiIndex] {
        &self.indices
    }

    pub fn get(&self, pos: usize) -> &MultiIndex {
        &self.indices[pos]
    }

    /// Nonzero `(slot, degree)` pairs of the index at `pos`.
    pub fn support(&self, pos: usize) -> &[(usize, u32)] {
        &self.sparse[pos]
    }

    pub fn position(&self, entries: &[u32]) -> Option<usize> {
        self.lookup.get(entries).copied()
    }

    /// Position of `a - e_s`, if that is a valid index.
    pub fn lower(&self, pos: usize, s: usize) -> Option<usize> {
        let a = &self.indices[pos].entries;
        if a[s] == 0 {
            return None;
        }
        let mut b = a.clone();
        b[s] -= 1;
        self.position(&b)
    }

    /// Position of `a - e_r - e_s`, if that is a valid index.
    pub fn lower2(&self, pos: usize, r: usize, s: usize) -> Option<usize> {
        let mut b = self.indices[pos].entries.clone();
        if b[r] == 0 {
            return None;
        }
        b[r] -= 1;
        if b[s] == 0 {
            return None;
        }
        b[s] -= 1;
        self.position(&b)
    }

    /// A stable hash of `(order, slots, layout)` identifying the feature layout.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        feed(LAYOUT_VERSION);
        feed(self.order as u64);
        feed(self.slots as u64);
        for a in &self.indices {
            for &e in &a.entries {
                feed(e as u64);
            }
        }
        format!("{h:016x}")
    }
}

/// Pushes every composition of `remaining` into `buf[slot..]`, larger
/// leading entries first.
fn compositions(remaining: u32, slot: usize, buf: &mut [u32], out: &mut Vec<MultiIndex>) {
    if slot + 1 == buf.len() {
        buf[slot] = remaining;
        out.push(MultiIndex::new(buf.to_vec()));
        buf[slot] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        buf[slot] = k;
        compositions(remaining - k, slot + 1, buf, out);
    }
    buf[slot] = 0;
}
