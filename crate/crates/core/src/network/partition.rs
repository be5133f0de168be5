use std::fmt;

use crate::error::{invalid, Result};
use crate::tensor::Index;

/// Largest tensor order supported by the bitmask representation of index sets.
pub const MAX_ORDER: usize = 32;

/// Set of free-index positions, bit `μ` standing for the `μ`-th mode of the
/// data tensor.
pub type IndexSet = u64;

pub fn full_set(order: usize) -> IndexSet {
    if order >= 64 {
        u64::MAX
    } else {
        (1u64 << order) - 1
    }
}

pub fn members(set: IndexSet) -> impl Iterator<Item = usize> {
    (0..64).filter(move |b| set >> b & 1 == 1)
}

/// A bipartition of the free indices, identified up to complement.
///
/// The stored side is the one that does not contain mode 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    mask: IndexSet,
    order: u8,
}

impl Partition {
    /// Canonicalizes `block`; fails if it is empty or covers every mode.
    pub fn new(block: IndexSet, order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return invalid(format!("unsupported tensor order {order}"));
        }
        let full = full_set(order);
        if block & !full != 0 {
            return invalid(format!("block {block:#b} refers to modes beyond order {order}"));
        }
        if block == 0 || block == full {
            return invalid("partition block must be a proper nonempty subset of the free indices");
        }
        let mask = if block & 1 == 1 { full & !block } else { block };
        Ok(Self {
            mask,
            order: order as u8,
        })
    }

    /// Canonical side (never contains mode 0).
    pub fn mask(&self) -> IndexSet {
        self.mask
    }

    pub fn complement(&self) -> IndexSet {
        full_set(self.order()) & !self.mask
    }

    pub fn order(&self) -> usize {
        self.order as usize
    }

    /// True if `block` is either side of this partition.
    pub fn matches(&self, block: IndexSet) -> bool {
        block == self.mask || block == self.complement()
    }

    /// Two bipartitions can be edges of one tree iff one of the four
    /// side intersections is empty. Canonical sides both miss mode 0, so
    /// that reduces to nested-or-disjoint.
    pub fn compatible(&self, other: &Partition) -> bool {
        let (a, b) = (self.mask, other.mask);
        a & b == 0 || a & b == a || a & b == b
    }

    /// The side shown to users: the smaller one, or the side holding mode 0
    /// on a tie.
    pub fn display_block(&self) -> IndexSet {
        let (a, b) = (self.mask.count_ones(), self.complement().count_ones());
        if a < b {
            self.mask
        } else {
            self.complement()
        }
    }

    /// Ordering key: block size, then the ascending member list.
    pub fn sort_key(&self) -> (u32, Vec<usize>) {
        let block = self.display_block();
        (block.count_ones(), members(block).collect())
    }

    pub fn names(&self, free: &[Index]) -> Vec<String> {
        block_names(self.display_block(), free)
    }
}

impl PartialOrd for Partition {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Partition {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key()
            .cmp(&other.sort_key())
            .then(self.mask.cmp(&other.mask))
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = members(self.display_block()).map(|b| format!("I{}", b + 1)).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

pub fn block_names(block: IndexSet, free: &[Index]) -> Vec<String> {
    members(block)
        .filter_map(|b| free.get(b).map(|ix| ix.name().to_string()))
        .collect()
}
