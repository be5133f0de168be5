//! Sketch enumeration and the symbolic tree a sketch describes.
//!
//! A sketch is a duplicate-free laminar family of partitions whose ranks
//! are holes. Sketches are produced lazily, smallest first, and within one
//! size in lexicographic order over the canonical partition sequence.

use crate::dsl::{Program, Rank, Sketch};
use crate::error::{invalid, Error, Result};
use crate::network::{full_set, members, IndexSet, Partition, TensorNetwork};
use crate::tensor::{Index, Tensor};

/// Orders above this make the partition list itself impractically long.
pub const MAX_ENUM_ORDER: usize = 20;

/// The largest number of distinct contracted edges in a tree over `order`
/// free indices.
pub fn max_tree_splits(order: usize) -> usize {
    (2 * order).saturating_sub(3)
}

/// Every bipartition of `order` modes, in canonical order.
pub fn canonical_partitions(order: usize) -> Vec<Partition> {
    let mut parts: Vec<Partition> = (1..full_set(order))
        .filter(|m| m & 1 == 0)
        .filter_map(|m| Partition::new(m, order).ok())
        .collect();
    parts.sort();
    parts
}

#[derive(Clone, Debug)]
pub struct SketchSpace {
    free: Vec<Index>,
    max_splits: usize,
}

impl SketchSpace {
    /// `max_splits` above `2d − 3` is clamped.
    pub fn new(free: Vec<Index>, max_splits: usize) -> Result<Self> {
        let d = free.len();
        if d < 3 {
            return Err(Error::Unsupported(format!(
                "structure search needs at least 3 indices, got {d}"
            )));
        }
        if d > MAX_ENUM_ORDER {
            return Err(Error::Unsupported(format!(
                "sketch enumeration supports at most {MAX_ENUM_ORDER} indices, got {d}"
            )));
        }
        if max_splits == 0 {
            return invalid("max_splits must be positive");
        }
        Ok(Self {
            max_splits: max_splits.min(max_tree_splits(d)),
            free,
        })
    }

    pub fn free_indices(&self) -> &[Index] {
        &self.free
    }

    pub fn order(&self) -> usize {
        self.free.len()
    }

    pub fn max_splits(&self) -> usize {
        self.max_splits
    }
}

/// Lazily yields every nonempty valid sketch exactly once.
pub fn enumerate_sketches(space: &SketchSpace) -> Sketches {
    Sketches {
        parts: canonical_partitions(space.order()),
        max_splits: space.max_splits,
        size: 1,
        stack: Vec::new(),
        started: false,
    }
}

/// Iterator over sketches; see [`enumerate_sketches`].
#[derive(Clone, Debug)]
pub struct Sketches {
    parts: Vec<Partition>,
    max_splits: usize,
    size: usize,
    stack: Vec<usize>,
    started: bool,
}

impl Sketches {
    fn fits(&self, cand: usize) -> bool {
        let p = &self.parts[cand];
        self.stack.iter().all(|&i| self.parts[i].compatible(p))
    }

    /// Advances `stack` to the next pairwise-compatible combination of
    /// `size` positions in lexicographic order.
    fn next_combination(&mut self) -> bool {
        let n = self.parts.len();
        let mut cand = if self.started {
            match self.stack.pop() {
                Some(i) => i + 1,
                None => return false,
            }
        } else {
            self.started = true;
            0
        };
        loop {
            while cand < n && !self.fits(cand) {
                cand += 1;
            }
            if cand < n && n - cand >= self.size - self.stack.len() {
                self.stack.push(cand);
                if self.stack.len() == self.size {
                    return true;
                }
                cand += 1;
            } else {
                match self.stack.pop() {
                    Some(i) => cand = i + 1,
                    None => return false,
                }
            }
        }
    }
}

impl Iterator for Sketches {
    type Item = Sketch;

    fn next(&mut self) -> Option<Sketch> {
        while self.size <= self.max_splits {
            if self.next_combination() {
                let blocks: Vec<Partition> = self.stack.iter().map(|&i| self.parts[i]).collect();
                return Some(Program::sketch(&blocks));
            }
            self.size += 1;
            self.stack.clear();
            self.started = false;
        }
        None
    }
}

/// A node of a symbolic tree: which free modes it carries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopoNode {
    pub free: IndexSet,
}

/// A contracted edge; `expr` is the position of the sketch expression that
/// creates it (and hence of its rank).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopoEdge {
    pub a: usize,
    pub b: usize,
    pub partition: Partition,
    pub expr: usize,
}

/// The unique tree whose contracted-edge partitions are a sketch's blocks.
///
/// Node 0 holds mode 0; node `i + 1` is the cluster of expression `i`
/// (its canonical side). Each cluster hangs off the smallest cluster that
/// strictly contains it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub order: usize,
    pub nodes: Vec<TopoNode>,
    pub edges: Vec<TopoEdge>,
}

/// Fails if the sketch is not a duplicate-free laminar family of the given order.
pub fn topology_from_sketch(s: &Sketch, order: usize) -> Result<Topology> {
    if !s.is_valid() || s.partitions().iter().any(|p| p.order() != order) {
        return invalid(format!("sketch '{s}' is not a valid family over {order} indices"));
    }
    let clusters: Vec<IndexSet> = s.partitions().iter().map(Partition::mask).collect();
    // Smallest cluster strictly containing `set` (as a node id), else the root.
    let owner = |set: IndexSet, strict: bool| {
        clusters
            .iter()
            .enumerate()
            .filter(|&(_, &c)| set & !c == 0 && (!strict || c != set))
            .min_by_key(|&(_, &c)| c.count_ones())
            .map_or(0, |(i, _)| i + 1)
    };
    let mut nodes = vec![TopoNode { free: 0 }; clusters.len() + 1];
    for mode in 0..order {
        nodes[owner(1 << mode, false)].free |= 1 << mode;
    }
    let edges = s
        .partitions()
        .iter()
        .enumerate()
        .map(|(i, &partition)| TopoEdge {
            a: owner(clusters[i], true),
            b: i + 1,
            partition,
            expr: i,
        })
        .collect();
    Ok(Topology { order, nodes, edges })
}

impl Topology {
    /// Expression positions of the edges touching `node`.
    pub fn incident(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|e| e.a == node || e.b == node)
            .map(|e| e.expr)
            .collect()
    }

    /// Product of the free dimensions carried by `node`.
    pub fn free_volume(&self, node: usize, dims: &[usize]) -> usize {
        members(self.nodes[node].free).map(|m| dims[m]).product()
    }

    /// Total element count with `ranks[i]` on the edge of expression `i`.
    pub fn size(&self, dims: &[usize], ranks: &[usize]) -> usize {
        (0..self.nodes.len())
            .map(|n| {
                self.incident(n)
                    .iter()
                    .fold(self.free_volume(n, dims), |acc, &e| acc.saturating_mul(ranks[e]))
            })
            .fold(0usize, usize::saturating_add)
    }

    /// Same form as [`crate::network::topology_signature`].
    pub fn signature(&self) -> std::collections::BTreeSet<(IndexSet, Vec<IndexSet>)> {
        (0..self.nodes.len())
            .map(|n| {
                let mut incident: Vec<IndexSet> = self
                    .edges
                    .iter()
                    .filter(|e| e.a == n || e.b == n)
                    .map(|e| e.partition.mask())
                    .collect();
                incident.sort_unstable();
                (self.nodes[n].free, incident)
            })
            .collect()
    }

    /// A network of this shape whose node entries come from `fill`, called
    /// once per entry in node order. Bonds are named `r<k>` after their
    /// expression position.
    pub fn instantiate(&self, free: &[Index], ranks: &[usize], mut fill: impl FnMut() -> f64) -> Result<TensorNetwork> {
        if free.len() != self.order || ranks.len() != self.edges.len() {
            return invalid("free indices or ranks do not match the topology");
        }
        let base = free.iter().map(Index::id).max().map_or(0, |m| m + 1);
        let bonds: Vec<Index> = self
            .edges
            .iter()
            .map(|e| Index::new(base + e.expr as u32, format!("r{}", e.expr + 1), ranks[e.expr]))
            .collect::<Result<_>>()?;
        let tensors = (0..self.nodes.len())
            .map(|n| {
                let mut idx: Vec<Index> = members(self.nodes[n].free).map(|m| free[m].clone()).collect();
                idx.extend(
                    self.edges
                        .iter()
                        .filter(|e| e.a == n || e.b == n)
                        .map(|e| bonds[e.expr].clone()),
                );
                Tensor::from_fn(idx, |_| fill())
            })
            .collect::<Result<Vec<_>>>()?;
        TensorNetwork::from_nodes(free.to_vec(), tensors)
    }
}

/// The sketch naming the blocks of `s` with ranks from `ranks`.
pub fn complete(s: &Sketch, ranks: &[usize]) -> Result<Program> {
    let holes = s.holes();
    if holes.len() != ranks.len() {
        return invalid("one rank per hole expected");
    }
    s.fill(&holes.into_iter().zip(ranks.iter().copied()).collect())
}

/// True if expression ranks are all holes (a pure sketch).
pub fn is_pure_sketch(s: &Sketch) -> bool {
    s.exprs().iter().all(|e| matches!(e.rank, Rank::Hole(_)))
}
