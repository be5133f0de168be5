//! Tree tensor networks: size accounting, full contraction, edge
//! partitions, orthonormalization toward a node, rounding and merging.

mod partition;

pub use partition::{block_names, full_set, members, IndexSet, Partition, MAX_ORDER};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::sync::Arc;


use crate::error::{invalid, Error, Result};
use crate::tensor::{self, tensor_from_matrix, Index, IndexId, Tensor};

pub type NodeId = usize;

/// A contracted edge between two nodes (`a < b`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub a: NodeId,
    pub b: NodeId,
    pub index: Index,
}

/// Singular values at or below `ZERO_TOL * ‖T‖` are dropped by rounding
/// without being charged to the error budget.
pub const ZERO_TOL: f64 = 1e-12;

/// An undirected tree of tensors. Free indices are the modes of the data
/// tensor; bond indices appear on exactly two nodes.
///
/// Networks are values: every transformation returns a new network and
/// shares untouched node tensors.
#[derive(Clone, Debug)]
pub struct TensorNetwork {
    free: Vec<Index>,
    nodes: BTreeMap<NodeId, Arc<Tensor>>,
    next_node: NodeId,
    next_bond: IndexId,
    splits: u32,
}

impl TensorNetwork {
    /// The single-node network `G0 = ({T}, ∅)`.
    pub fn from_tensor(t: Tensor) -> Self {
        let free = t.indices().to_vec();
        let next_bond = free.iter().map(Index::id).max().map_or(0, |m| m + 1);
        let mut nodes = BTreeMap::new();
        nodes.insert(0, Arc::new(t));
        Self {
            free,
            nodes,
            next_node: 1,
            next_bond,
            splits: 0,
        }
    }

    /// Assembles a network from node tensors. Node ids are assigned in
    /// order; `free` fixes the data tensor's mode order.
    pub fn from_nodes(free: Vec<Index>, node_tensors: Vec<Tensor>) -> Result<Self> {
        let max_id = node_tensors
            .iter()
            .flat_map(|t| t.indices().iter().map(Index::id))
            .chain(free.iter().map(Index::id))
            .max()
            .unwrap_or(0);
        let n = node_tensors.len();
        let nodes: BTreeMap<NodeId, Arc<Tensor>> = node_tensors.into_iter().map(Arc::new).enumerate().collect();
        let g = Self {
            free,
            nodes,
            next_node: n,
            next_bond: max_id + 1,
            splits: n.saturating_sub(1) as u32,
        };
        g.check()?;
        Ok(g)
    }

    pub fn free_indices(&self) -> &[Index] {
        &self.free
    }

    pub fn order(&self) -> usize {
        self.free.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(&id).map(|t| t.as_ref())
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.nodes.iter().map(|(&id, t)| (id, t.as_ref()))
    }

    /// `size(G)`: total element count over all nodes.
    pub fn size(&self) -> usize {
        self.nodes.values().map(|t| t.len()).sum()
    }

    /// Position of a free index id in the data tensor, i.e. its bit.
    pub fn free_bit(&self, id: IndexId) -> Option<usize> {
        self.free.iter().position(|ix| ix.id() == id)
    }

    pub fn is_free(&self, id: IndexId) -> bool {
        self.free_bit(id).is_some()
    }

    /// Free indices attached directly to `node`, as a bit set.
    pub fn node_free_set(&self, node: NodeId) -> IndexSet {
        self.nodes[&node]
            .indices()
            .iter()
            .filter_map(|ix| self.free_bit(ix.id()))
            .fold(0, |acc, b| acc | 1 << b)
    }

    /// Contracted edges, ordered by endpoints.
    pub fn edges(&self) -> Vec<Edge> {
        let mut edges = Vec::new();
        let ids: Vec<NodeId> = self.node_ids();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                for ix in self.nodes[&a].indices() {
                    if !self.is_free(ix.id()) && self.nodes[&b].position(ix.id()).is_some() {
                        edges.push(Edge { a, b, index: ix.clone() });
                    }
                }
            }
        }
        edges
    }

    pub fn free_edges(&self) -> Vec<(NodeId, Index)> {
        self.free
            .iter()
            .filter_map(|ix| self.node_of(ix.id()).map(|n| (n, ix.clone())))
            .collect()
    }

    /// The node holding a free index.
    pub fn node_of(&self, id: IndexId) -> Option<NodeId> {
        self.nodes
            .iter()
            .find(|(_, t)| t.position(id).is_some())
            .map(|(&n, _)| n)
    }

    /// Neighbours of `node` with the bond each is reached through.
    pub fn neighbors(&self, node: NodeId) -> Vec<(NodeId, Index)> {
        let Some(t) = self.nodes.get(&node) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for ix in t.indices() {
            if self.is_free(ix.id()) {
                continue;
            }
            for (&other, ot) in &self.nodes {
                if other != node && ot.position(ix.id()).is_some() {
                    out.push((other, ix.clone()));
                }
            }
        }
        out
    }

    /// Free indices reachable from `node` through its mode `via`: the mode
    /// itself when it is free, otherwise everything on the far side of the
    /// bond.
    pub fn subtree_set(&self, node: NodeId, via: IndexId) -> IndexSet {
        if let Some(b) = self.free_bit(via) {
            return 1 << b;
        }
        let Some((start, _)) = self.neighbors(node).into_iter().find(|(_, ix)| ix.id() == via) else {
            return 0;
        };
        let mut set = 0;
        let mut seen = BTreeSet::from([node, start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            set |= self.node_free_set(v);
            for (w, _) in self.neighbors(v) {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        set
    }

    /// `Partition(e, G)`: the free-index bipartition a contracted edge induces.
    pub fn edge_partition(&self, bond: IndexId) -> Result<Partition> {
        if self.is_free(bond) {
            return invalid("free edges do not induce a partition");
        }
        let edge = self
            .edges()
            .into_iter()
            .find(|e| e.index.id() == bond)
            .ok_or_else(|| Error::InvalidArgument(format!("no contracted edge with index id {bond}")))?;
        Partition::new(self.subtree_set(edge.a, bond), self.order())
    }

    /// Every contracted edge with its partition.
    pub fn edge_partitions(&self) -> Vec<(Partition, Edge)> {
        self.edges()
            .into_iter()
            .map(|e| {
                let p = Partition::new(self.subtree_set(e.a, e.index.id()), self.order())
                    .expect("tree edges separate nonempty free sets");
                (p, e)
            })
            .collect()
    }

    /// Checks the tree, edge-record and free-index invariants.
    pub fn check(&self) -> Result<()> {
        let mut counts: BTreeMap<IndexId, Vec<(NodeId, usize)>> = BTreeMap::new();
        for (&n, t) in &self.nodes {
            for ix in t.indices() {
                counts.entry(ix.id()).or_default().push((n, ix.size()));
            }
        }
        for ix in &self.free {
            match counts.get(&ix.id()).map(Vec::as_slice) {
                Some([(_, s)]) if *s == ix.size() => {}
                _ => {
                    return Err(Error::InvalidState(format!(
                        "free index {} must appear once with size {}",
                        ix.name(),
                        ix.size()
                    )))
                }
            }
        }
        let mut bonds = 0;
        for (id, uses) in &counts {
            if self.is_free(*id) {
                continue;
            }
            match uses.as_slice() {
                [(a, s), (b, t)] if a != b && s == t => bonds += 1,
                _ => return Err(Error::InvalidState(format!("bond index id {id} must join two nodes with equal sizes"))),
            }
        }
        if bonds + 1 != self.nodes.len() {
            return Err(Error::InvalidState(format!(
                "{} nodes and {bonds} contracted edges do not form a tree",
                self.nodes.len()
            )));
        }
        if !self.is_connected() {
            return Err(Error::InvalidState("network is disconnected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let Some(&start) = self.nodes.keys().next() else {
            return true;
        };
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for (w, _) in self.neighbors(v) {
                if seen.insert(w) {
                    stack.push(w);
                }
            }
        }
        seen.len() == self.nodes.len()
    }

    /// `N(G)`, contracted greedily by smallest intermediate, with modes in
    /// the data tensor's order.
    pub fn contract_all(&self) -> Result<Tensor> {
        let mut g = self.clone();
        while g.nodes.len() > 1 {
            let best = g
                .edges()
                .into_iter()
                .map(|e| {
                    let (ta, tb) = (&g.nodes[&e.a], &g.nodes[&e.b]);
                    let shared: usize = ta
                        .indices()
                        .iter()
                        .filter(|ix| tb.position(ix.id()).is_some())
                        .map(Index::size)
                        .product();
                    let result = ta.len() / shared * (tb.len() / shared);
                    (result, e.a, e.b)
                })
                .min();
            let Some((_, a, b)) = best else {
                return Err(Error::InvalidState("cannot contract a disconnected network".into()));
            };
            g = g.merge_nodes(a, b)?;
        }
        let t = g.nodes.values().next().ok_or_else(|| Error::InvalidState("empty network".into()))?;
        let ids: Vec<IndexId> = self.free.iter().map(Index::id).collect();
        t.permute_to(&ids)
    }

    /// Replaces adjacent nodes `a` and `b` by their contraction.
    pub fn merge_nodes(&self, a: NodeId, b: NodeId) -> Result<Self> {
        if a == b || !self.neighbors(a).iter().any(|(n, _)| *n == b) {
            return invalid(format!("nodes {a} and {b} are not adjacent"));
        }
        let merged = self.nodes[&a].contract(&self.nodes[&b])?;
        let mut g = self.clone();
        g.nodes.remove(&a);
        g.nodes.remove(&b);
        g.insert_node(merged);
        Ok(g)
    }

    /// BFS order from `root` with each node's parent bond.
    fn rooted_order(&self, root: NodeId) -> Vec<(NodeId, Option<(NodeId, Index)>)> {
        let mut order = vec![(root, None)];
        let mut seen = BTreeSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for (w, ix) in self.neighbors(v) {
                if seen.insert(w) {
                    order.push((w, Some((v, ix))));
                    queue.push_back(w);
                }
            }
        }
        order
    }

    /// QR sweep from the leaves to `root`: afterwards every non-root node,
    /// matricized with its parent bond as columns, has orthonormal columns.
    /// Bonds wider than the rest of their node shrink exactly.
    pub fn orthonormalize(&self, root: NodeId) -> Result<Self> {
        if !self.nodes.contains_key(&root) {
            return invalid(format!("node {root} not in network"));
        }
        let mut g = self.clone();
        for (v, parent) in self.rooted_order(root).into_iter().rev() {
            let Some((p, bond)) = parent else { continue };
            let node = g.nodes[&v].clone();
            let bond = node.index(bond.id()).expect("bond on child").clone();
            let rest: Vec<Index> = node.indices().iter().filter(|ix| ix.id() != bond.id()).cloned().collect();
            let m = node.matricize_ordered(rest.clone(), vec![bond.clone()]).matrix;
            let qr = m.qr();
            let (q, r) = (qr.q(), qr.r());
            let mut idx = rest;
            idx.push(bond.resized(q.ncols())?);
            let order: Vec<IndexId> = node.indices().iter().map(Index::id).collect();
            let new_child = tensor_from_matrix(&q, idx).permute_to(&order)?;
            let new_parent = g.nodes[&p].apply_on_index(bond.id(), &r)?;
            g.nodes.insert(v, Arc::new(new_child));
            g.nodes.insert(p, Arc::new(new_parent));
        }
        Ok(g)
    }

    /// Re-truncates every contracted edge, sweeping edges in canonical
    /// partition order. Each edge may spend an equal share of what is left
    /// of `budget_sq`; singular values `≤ ZERO_TOL · data_norm` are dropped
    /// for free. Returns the rounded network and the squared mass charged.
    pub fn round(&self, budget_sq: f64, data_norm: f64) -> Result<(Self, f64)> {
        let mut edges = self.edge_partitions();
        edges.sort_by_key(|x| x.0);
        let zero = ZERO_TOL * data_norm;
        let mut g = self.clone();
        let mut spent = 0.0;
        let total = edges.len();
        for (k, (_, edge)) in edges.into_iter().enumerate() {
            let bond_id = edge.index.id();
            let current = g.edges().into_iter().find(|e| e.index.id() == bond_id).expect("rounding keeps every edge");
            let allowance = (budget_sq - spent).max(0.0) / (total - k) as f64;
            let (a, b) = (current.a, current.b);
            g = g.orthonormalize(a)?;
            let node = g.nodes[&a].clone();
            let bond = node.index(bond_id).expect("bond on node").clone();
            let rest: Vec<Index> = node.indices().iter().filter(|ix| ix.id() != bond_id).cloned().collect();
            let m = node.matricize_ordered(rest.clone(), vec![bond.clone()]).matrix;
            let dec = tensor::svd(&m)?;
            let mut keep = dec.sigma.len();
            while keep > 1 && dec.sigma[keep - 1] <= zero {
                keep -= 1;
            }
            let mut local = 0.0;
            while keep > 1 && local + dec.sigma[keep - 1].powi(2) <= allowance {
                local += dec.sigma[keep - 1].powi(2);
                keep -= 1;
            }
            spent += local;
            if keep == bond.size() {
                continue;
            }
            let mut us = dec.u.columns(0, keep).into_owned();
            for j in 0..keep {
                us.column_mut(j).scale_mut(dec.sigma[j]);
            }
            let vt = dec.vt.rows(0, keep).into_owned();
            let mut idx = rest;
            idx.push(bond.resized(keep)?);
            let order: Vec<IndexId> = node.indices().iter().map(Index::id).collect();
            let new_a = tensor_from_matrix(&us, idx).permute_to(&order)?;
            let new_b = g.nodes[&b].apply_on_index(bond_id, &vt)?;
            g.nodes.insert(a, Arc::new(new_a));
            g.nodes.insert(b, Arc::new(new_b));
        }
        Ok((g, spent))
    }

    pub(crate) fn insert_node(&mut self, t: Tensor) -> NodeId {
        let id = self.next_node;
        self.next_node += 1;
        self.nodes.insert(id, Arc::new(t));
        id
    }

    pub(crate) fn remove_node(&mut self, id: NodeId) -> Option<Arc<Tensor>> {
        self.nodes.remove(&id)
    }

    /// A new bond index named `r<k>`, `k` counting splits in this network.
    pub(crate) fn fresh_bond(&mut self, size: usize) -> Result<Index> {
        self.splits += 1;
        let id = self.next_bond;
        self.next_bond += 1;
        Index::new(id, format!("r{}", self.splits), size)
    }

    /// Graphviz rendering; free edges hang off point-shaped stubs.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph tensor_network {\n");
        for (id, t) in self.nodes() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "  n{id} [label=\"n{id}\\n{}\"];", dims.join("x"));
        }
        for (node, ix) in self.free_edges() {
            let _ = writeln!(out, "  f{} [shape=point];", ix.id());
            let _ = writeln!(out, "  n{node} -- f{} [label=\"{} ({})\"];", ix.id(), ix.name(), ix.size());
        }
        for e in self.edges() {
            let _ = writeln!(out, "  n{} -- n{} [label=\"{} ({})\"];", e.a, e.b, e.index.name(), e.index.size());
        }
        out.push_str("}\n");
        out
    }
}

/// Node-level signature used to compare topologies: the free set and the
/// incident partitions of every node. Two trees with distinct edge
/// partitions are isomorphic (as free-index-labelled trees) iff their
/// signatures are equal.
pub fn topology_signature(g: &TensorNetwork) -> BTreeSet<(IndexSet, Vec<IndexSet>)> {
    let parts: BTreeMap<IndexId, Partition> = g
        .edge_partitions()
        .into_iter()
        .map(|(p, e)| (e.index.id(), p))
        .collect();
    g.node_ids()
        .into_iter()
        .map(|n| {
            let mut incident: Vec<IndexSet> = g
                .neighbors(n)
                .iter()
                .map(|(_, ix)| parts[&ix.id()].mask())
                .collect();
            incident.sort_unstable();
            (g.node_free_set(n), incident)
        })
        .collect()
}

#[cfg(test)]
pub(crate) fn random_tensor(indices: Vec<Index>, rng: &mut impl rand::Rng) -> Tensor {
    Tensor::from_fn(indices, |_| rng.random_range(-1.0..1.0)).unwrap()
}
