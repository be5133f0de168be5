//! Split programs: sequences of output-directed splits `OSplit(I, r)` whose
//! ranks are integers or holes, and their execution on tensor networks.
//!
//! Executing a program threads an [`ExecState`] (network plus remaining
//! squared error budget) through each expression. A split that cannot be
//! realized aborts the whole program with a [`Failure`].

mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{invalid, Error, Result};
use crate::network::{members, IndexSet, NodeId, Partition, TensorNetwork};
use crate::tensor::{self, tensor_from_matrix, Index, IndexId, Tensor};

pub type HoleId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rank {
    Hole(HoleId),
    Fixed(usize),
}

/// `OSplit(block, rank)`. The block is kept as written; comparisons go
/// through its canonical [`Partition`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expr {
    block: IndexSet,
    partition: Partition,
    pub rank: Rank,
}

impl Expr {
    pub fn new(block: IndexSet, order: usize, rank: Rank) -> Result<Self> {
        if rank == Rank::Fixed(0) {
            return invalid("split rank must be positive");
        }
        Ok(Self {
            block,
            partition: Partition::new(block, order)?,
            rank,
        })
    }

    pub fn from_partition(p: Partition, rank: Rank) -> Self {
        Self {
            block: p.display_block(),
            partition: p,
            rank,
        }
    }

    pub fn block(&self) -> IndexSet {
        self.block
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }
}

/// A program, or a sketch when some rank is a hole.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Program {
    exprs: Vec<Expr>,
}

pub type Sketch = Program;

impl Program {
    pub fn new(exprs: Vec<Expr>) -> Result<Self> {
        let mut holes = BTreeSet::new();
        for e in &exprs {
            if let Rank::Hole(h) = e.rank {
                if !holes.insert(h) {
                    return invalid(format!("hole ??{h} used twice"));
                }
            }
        }
        if let Some(order) = exprs.first().map(|e| e.partition.order()) {
            if exprs.iter().any(|e| e.partition.order() != order) {
                return invalid("expressions disagree on the tensor order");
            }
        }
        Ok(Self { exprs })
    }

    /// A sketch over the given partitions, hole `i` at position `i`.
    pub fn sketch(blocks: &[Partition]) -> Self {
        Self {
            exprs: blocks
                .iter()
                .enumerate()
                .map(|(i, &p)| Expr::from_partition(p, Rank::Hole(i)))
                .collect(),
        }
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.exprs
    }

    pub fn len(&self) -> usize {
        self.exprs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exprs.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.exprs.iter().all(|e| matches!(e.rank, Rank::Fixed(_)))
    }

    pub fn holes(&self) -> Vec<HoleId> {
        self.exprs
            .iter()
            .filter_map(|e| match e.rank {
                Rank::Hole(h) => Some(h),
                Rank::Fixed(_) => None,
            })
            .collect()
    }

    pub fn partitions(&self) -> Vec<Partition> {
        self.exprs.iter().map(Expr::partition).collect()
    }

    /// The blocks form a duplicate-free laminar family.
    pub fn is_valid(&self) -> bool {
        let mut prefix = Program::default();
        for e in &self.exprs {
            if !valid_extension(&prefix, e.block, e.partition.order()) {
                return false;
            }
            prefix.exprs.push(*e);
        }
        true
    }

    /// Every hole replaced by a concrete rank.
    pub fn fill(&self, assignment: &BTreeMap<HoleId, usize>) -> Result<Program> {
        let exprs = self
            .exprs
            .iter()
            .map(|e| match e.rank {
                Rank::Hole(h) => match assignment.get(&h) {
                    Some(&r) if r > 0 => Ok(Expr { rank: Rank::Fixed(r), ..*e }),
                    Some(_) => invalid(format!("hole ??{h} assigned rank 0")),
                    None => invalid(format!("no rank given for hole ??{h}")),
                },
                Rank::Fixed(_) => Ok(*e),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Program { exprs })
    }

    /// Same blocks, every rank turned into a fresh hole.
    pub fn to_sketch(&self) -> Sketch {
        Program::sketch(&self.partitions())
    }

    pub fn to_text(&self, free: &[Index]) -> String {
        text::print(self, free)
    }

    pub fn parse(src: &str, free: &[Index]) -> Result<Program> {
        text::parse(src, free)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.exprs.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            let names: Vec<String> = members(e.block).map(|b| format!("I{}", b + 1)).collect();
            match e.rank {
                Rank::Hole(h) => write!(f, "OSplit({{{}}}, ??{h})", names.join(","))?,
                Rank::Fixed(r) => write!(f, "OSplit({{{}}}, {r})", names.join(","))?,
            }
        }
        Ok(())
    }
}

/// `ValidExpr`: adding `block` keeps the family laminar and duplicate-free.
pub fn valid_extension(s: &Sketch, block: IndexSet, order: usize) -> bool {
    let Ok(p) = Partition::new(block, order) else {
        return false;
    };
    s.exprs
        .iter()
        .all(|e| e.partition != p && e.partition.compatible(&p))
}

/// Same multiset of (partition, rank) pairs.
pub fn programs_equivalent(p1: &Program, p2: &Program) -> bool {
    let key = |p: &Program| {
        let mut v: Vec<(IndexSet, Rank)> = p.exprs.iter().map(|e| (e.partition.mask(), e.rank)).collect();
        v.sort();
        v
    };
    key(p1) == key(p2)
}

/// The program that names every contracted edge of `g` with its current
/// rank, in canonical partition order.
pub fn program_from_network(g: &TensorNetwork) -> Program {
    let mut parts = g.edge_partitions();
    parts.sort_by_key(|x| x.0);
    Program {
        exprs: parts
            .into_iter()
            .map(|(p, e)| Expr::from_partition(p, Rank::Fixed(e.index.size())))
            .collect(),
    }
}

/// Network plus the remaining absolute squared error allowance.
#[derive(Clone, Debug)]
pub struct ExecState {
    pub network: TensorNetwork,
    pub budget_sq: f64,
    pub data_norm: f64,
    initial_budget_sq: f64,
}

impl ExecState {
    /// `(G0, ε)` for data tensor `t`: budget `(ε‖T‖)²`.
    pub fn new(t: Tensor, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eps) {
            return invalid(format!("error bound {eps} outside [0, 1)"));
        }
        let data_norm = t.frobenius_norm();
        let budget_sq = (eps * data_norm).powi(2);
        Ok(Self {
            network: TensorNetwork::from_tensor(t),
            budget_sq,
            data_norm,
            initial_budget_sq: budget_sq,
        })
    }

    pub fn with_budget(network: TensorNetwork, budget_sq: f64, data_norm: f64) -> Self {
        Self {
            network,
            budget_sq,
            data_norm,
            initial_budget_sq: budget_sq,
        }
    }

    pub fn initial_budget_sq(&self) -> f64 {
        self.initial_budget_sq
    }

    /// Squared mass discarded so far.
    pub fn spent_sq(&self) -> f64 {
        (self.initial_budget_sq - self.budget_sq).max(0.0)
    }

    /// `ε′ = sqrt(budget)/‖T‖`.
    pub fn remaining_eps(&self) -> f64 {
        if self.data_norm == 0.0 {
            0.0
        } else {
            self.budget_sq.sqrt() / self.data_norm
        }
    }

    /// Float noise allowed when comparing a discarded tail to the budget.
    fn slack_sq(&self) -> f64 {
        1e-9 * self.initial_budget_sq + (1e-13 * self.data_norm).powi(2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FailureReason {
    /// No node can be split to realize the block.
    NoSuitableNode,
    /// The budget requires keeping more singular values than the rank allows.
    RankTooSmall { required: usize, requested: usize },
    /// The program still contains holes.
    Incomplete,
    /// The split index set is not a proper nonempty subset of the node.
    BadSplit,
}

/// The `⊥` outcome of execution.
#[derive(Clone, Debug, PartialEq)]
pub struct Failure {
    /// Position of the failing expression, when executing a program.
    pub expr: Option<usize>,
    pub reason: FailureReason,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(i) = self.expr {
            write!(f, "expression {i}: ")?;
        }
        match &self.reason {
            FailureReason::NoSuitableNode => write!(f, "no node can realize the requested partition"),
            FailureReason::RankTooSmall { required, requested } => {
                write!(f, "error budget needs rank {required}, program asks for {requested}")
            }
            FailureReason::Incomplete => write!(f, "program has unfilled holes"),
            FailureReason::BadSplit => write!(f, "split indices must be a proper nonempty subset of the node"),
        }
    }
}

impl std::error::Error for Failure {}

fn fail(reason: FailureReason) -> Failure {
    Failure { expr: None, reason }
}

/// How an input-directed split picks its rank.
#[derive(Clone, Copy, Debug)]
pub(crate) enum SplitRank {
    /// Keep exactly this many singular values (fewer if the spectrum is shorter).
    Fixed(usize),
    /// Keep the fewest values whose discarded tail fits this allowance.
    Budget(f64),
}

/// `⟦P⟧(G, ε)`: applies the expressions left to right.
pub fn exec_program(p: &Program, s0: ExecState) -> Result<ExecState, Failure> {
    let mut st = s0;
    for (i, e) in p.exprs.iter().enumerate() {
        let Rank::Fixed(r) = e.rank else {
            return Err(Failure {
                expr: Some(i),
                reason: FailureReason::Incomplete,
            });
        };
        st = exec_osplit(&st, e.block, r).map_err(|f| Failure { expr: Some(i), ..f })?;
    }
    Ok(st)
}

/// Finds the node that can realize `block` with one cut: every mode of the
/// node leads to free indices either inside `block` or disjoint from it.
/// `Ok(None)` when an edge already realizes the partition.
fn split_site(g: &TensorNetwork, block: IndexSet) -> Result<Option<(NodeId, Vec<IndexId>)>, Failure> {
    let target = Partition::new(block, g.order()).map_err(|_| fail(FailureReason::NoSuitableNode))?;
    if g.edge_partitions().iter().any(|(p, _)| *p == target) {
        return Ok(None);
    }
    'nodes: for node in g.node_ids() {
        let mut isplit = Vec::new();
        for ix in g.node(node).expect("listed node").indices() {
            let sub = g.subtree_set(node, ix.id());
            if sub & !block == 0 {
                isplit.push(ix.id());
            } else if sub & block != 0 {
                continue 'nodes;
            }
        }
        return Ok(Some((node, isplit)));
    }
    Err(fail(FailureReason::NoSuitableNode))
}

/// `ExecOSplit`: realize `block` with a new edge of rank `r`.
///
/// If the partition already exists the state is returned unchanged.
pub fn exec_osplit(st: &ExecState, block: IndexSet, r: usize) -> Result<ExecState, Failure> {
    match split_site(&st.network, block)? {
        Some((node, isplit)) => exec_isplit(st, node, &isplit, r),
        None => {
            log::debug!("partition {block:#b} already realized; requested rank {r} ignored");
            Ok(st.clone())
        }
    }
}

/// OSplit whose rank is the smallest one fitting `local_budget_sq`.
pub(crate) fn exec_osplit_adaptive(st: &ExecState, block: IndexSet, local_budget_sq: f64) -> Result<ExecState, Failure> {
    match split_site(&st.network, block)? {
        Some((node, isplit)) => exec_isplit_with(st, node, &isplit, SplitRank::Budget(local_budget_sq)),
        None => Ok(st.clone()),
    }
}

/// `ExecISplit`: truncated SVD of `node` separating `isplit` from its other
/// modes, keeping exactly `min(r, spectrum length)` singular values.
pub fn exec_isplit(st: &ExecState, node: NodeId, isplit: &[IndexId], r: usize) -> Result<ExecState, Failure> {
    exec_isplit_with(st, node, isplit, SplitRank::Fixed(r))
}

pub(crate) fn exec_isplit_with(
    st: &ExecState,
    node: NodeId,
    isplit: &[IndexId],
    rank: SplitRank,
) -> Result<ExecState, Failure> {
    let Some(t) = st.network.node(node) else {
        return Err(fail(FailureReason::BadSplit));
    };
    if isplit.is_empty() || isplit.len() >= t.order() || isplit.iter().any(|&id| t.position(id).is_none()) {
        return Err(fail(FailureReason::BadSplit));
    }
    let g = st
        .network
        .orthonormalize(node)
        .map_err(|_| fail(FailureReason::BadSplit))?;
    let t = g.node(node).expect("orthonormalize keeps node ids");
    let m = t.matricize(isplit).map_err(|_| fail(FailureReason::BadSplit))?;
    let dec = tensor::svd(&m.matrix).map_err(|_| fail(FailureReason::BadSplit))?;
    let len = dec.sigma.len();
    // tail[k]: squared mass discarded when keeping k values.
    let mut tail = vec![0.0; len + 1];
    for k in (0..len).rev() {
        tail[k] = tail[k + 1] + dec.sigma[k] * dec.sigma[k];
    }
    let allowed = st.budget_sq + st.slack_sq();
    let r_min = (1..=len).find(|&k| tail[k] <= allowed).unwrap_or(len);
    let keep = match rank {
        SplitRank::Fixed(r) => {
            if r_min > r {
                return Err(fail(FailureReason::RankTooSmall {
                    required: r_min,
                    requested: r,
                }));
            }
            r.min(len)
        }
        SplitRank::Budget(local) => {
            let local = local.min(st.budget_sq) + st.slack_sq();
            (1..=len).find(|&k| tail[k] <= local).unwrap_or(len)
        }
    };
    let discarded = tail[keep];

    let mut next = g.clone();
    let bond = next.fresh_bond(keep).map_err(|_| fail(FailureReason::BadSplit))?;
    let u = dec.u.columns(0, keep).into_owned();
    let mut sv = dec.vt.rows(0, keep).into_owned();
    for i in 0..keep {
        sv.row_mut(i).scale_mut(dec.sigma[i]);
    }
    let mut u_idx = m.rows.clone();
    u_idx.push(bond.clone());
    let mut sv_idx = vec![bond];
    sv_idx.extend(m.cols.iter().cloned());
    next.remove_node(node);
    next.insert_node(tensor_from_matrix(&u, u_idx));
    next.insert_node(tensor_from_matrix(&sv, sv_idx));
    Ok(ExecState {
        network: next,
        budget_sq: (st.budget_sq - discarded).max(0.0),
        data_norm: st.data_norm,
        initial_budget_sq: st.initial_budget_sq,
    })
}

/// Resolves index names against the data tensor's modes.
pub fn block_from_names(names: &[&str], free: &[Index]) -> Result<IndexSet> {
    let mut set = 0;
    for name in names {
        let pos = free
            .iter()
            .position(|ix| ix.name() == *name)
            .ok_or_else(|| Error::Malformed(format!("unknown index name '{name}'")))?;
        set |= 1 << pos;
    }
    Ok(set)
}

#[cfg(test)]
mod tests;
