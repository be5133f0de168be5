//! Rank completion of sketches.
//!
//! Every hole's candidate ranks come from the singular spectrum of the
//! original tensor's matricization along the hole's partition. Those
//! spectra bound the spectra seen during execution from above, so any
//! choice whose discarded prefix masses sum to at most the budget is
//! guaranteed to execute, and the network size computed from the chosen
//! ranks bounds the executed size.
//!
//! The choice is a 0-1 program: one-hot bin variables per hole, a knapsack
//! budget row, and a product objective over adjacent holes. [`solve`]
//! optimizes it exactly by branch and bound; [`CostModel::to_ilp`] spells
//! out the linearized form for cross-checking.

use std::collections::BTreeMap;

use crate::dsl::{Program, Rank, Sketch};
use crate::error::{invalid, Result};
use crate::network::{members, IndexSet, Partition};
use crate::par::Pool;
use crate::sketch::{topology_from_sketch, Topology};
use crate::tensor::{singular_values, Tensor};

/// Singular values of one matricization, ascending, with prefix sums of
/// their squares: `prefix_sq[i]` is the squared error of discarding the
/// `i` smallest values.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    sigma: Vec<f64>,
    prefix_sq: Vec<f64>,
}

impl Spectrum {
    pub fn from_descending(desc: &[f64]) -> Self {
        let sigma: Vec<f64> = desc.iter().rev().copied().collect();
        let mut prefix_sq = Vec::with_capacity(sigma.len() + 1);
        prefix_sq.push(0.0);
        for s in &sigma {
            prefix_sq.push(prefix_sq.last().unwrap() + s * s);
        }
        Self { sigma, prefix_sq }
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn prefix_sq(&self) -> &[f64] {
        &self.prefix_sq
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Largest discard count below the full length whose error is at most `limit`.
    pub fn max_discard(&self, limit: f64) -> usize {
        let cap = self.len().saturating_sub(1);
        (0..=cap).rev().find(|&i| self.prefix_sq[i] <= limit).unwrap_or(0)
    }
}

/// Spectra of the data tensor, one per canonical partition.
#[derive(Clone, Debug)]
pub struct SpectrumTable {
    dims: Vec<usize>,
    norm_sq: f64,
    spectra: BTreeMap<IndexSet, Spectrum>,
}

impl SpectrumTable {
    /// Computes the spectra of `parts` (duplicates are computed once).
    pub fn build(t: &Tensor, parts: &[Partition], pool: &Pool) -> Result<Self> {
        let mut masks: Vec<IndexSet> = parts.iter().map(Partition::mask).collect();
        masks.sort_unstable();
        masks.dedup();
        if parts.iter().any(|p| p.order() != t.order()) {
            return invalid("partition order does not match the tensor");
        }
        let ids: Vec<_> = t.indices().iter().map(|ix| ix.id()).collect();
        let computed = pool.map(&masks, |&mask| -> Result<Spectrum> {
            let rows: Vec<_> = members(mask).map(|m| ids[m]).collect();
            let m = t.matricize(&rows)?;
            Ok(Spectrum::from_descending(&singular_values(&m.matrix)?))
        });
        let spectra = masks
            .into_iter()
            .zip(computed)
            .map(|(m, s)| s.map(|s| (m, s)))
            .collect::<Result<_>>()?;
        Ok(Self {
            dims: t.shape(),
            norm_sq: t.norm_sq(),
            spectra,
        })
    }

    pub fn get(&self, p: &Partition) -> Option<&Spectrum> {
        self.spectra.get(&p.mask())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }

    /// Absolute squared budget `(ε‖T‖)²`.
    pub fn budget_sq(&self, eps: f64) -> f64 {
        eps * eps * self.norm_sq
    }
}

/// One truncation option of a hole.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinOption {
    pub discard: usize,
    pub error_sq: f64,
}

/// Truncation options spaced about `c · budget` apart in error.
///
/// For each target `j·c·budget` the largest discard count whose error does
/// not exceed it is kept. Zero discard is always present and at least one
/// value is always kept.
pub fn bin_options(sp: &Spectrum, budget_sq: f64, c: f64) -> Vec<BinOption> {
    let mut out = vec![BinOption { discard: 0, error_sq: 0.0 }];
    let steps = (1.0 / c).ceil() as usize;
    for j in 1..=steps {
        let target = (j as f64 * c).min(1.0) * budget_sq;
        let discard = sp.max_discard(target);
        if discard > out.last().unwrap().discard {
            out.push(BinOption {
                discard,
                error_sq: sp.prefix_sq[discard],
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoleVar {
    /// Spectrum length, i.e. the rank when nothing is discarded.
    pub len: usize,
    /// Ascending in discard count.
    pub options: Vec<BinOption>,
}

impl HoleVar {
    pub fn rank(&self, bin: usize) -> usize {
        self.len - self.options[bin].discard
    }
}

/// `coeff · Π rank(h)` over the holes adjacent to one node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostTerm {
    pub coeff: usize,
    pub holes: Vec<usize>,
}

/// The 0-1 completion model of one sketch; hole `i` is expression `i`.
#[derive(Clone, Debug)]
pub struct CostModel {
    pub holes: Vec<HoleVar>,
    pub terms: Vec<CostTerm>,
    pub budget_sq: f64,
    /// Only completions costing at most this are acceptable.
    pub cut: Option<usize>,
}

impl CostModel {
    pub fn build(s: &Sketch, table: &SpectrumTable, budget_sq: f64, c: f64, cut: Option<usize>) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return invalid(format!("bin fraction {c} outside (0, 1]"));
        }
        let topo = topology_from_sketch(s, table.dims().len())?;
        let holes = s
            .partitions()
            .iter()
            .map(|p| {
                let sp = table
                    .get(p)
                    .ok_or_else(|| crate::Error::InvalidState(format!("no spectrum for partition {p}")))?;
                Ok(HoleVar {
                    len: sp.len(),
                    options: bin_options(sp, budget_sq, c),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(&topo, table.dims(), holes, budget_sq, cut))
    }

    pub fn new(topo: &Topology, dims: &[usize], holes: Vec<HoleVar>, budget_sq: f64, cut: Option<usize>) -> Self {
        let terms = (0..topo.nodes.len())
            .map(|n| CostTerm {
                coeff: topo.free_volume(n, dims),
                holes: topo.incident(n),
            })
            .collect();
        Self {
            holes,
            terms,
            budget_sq,
            cut,
        }
    }

    fn cost_of_ranks(&self, ranks: &[usize]) -> usize {
        self.terms
            .iter()
            .map(|t| t.holes.iter().fold(t.coeff, |acc, &h| acc.saturating_mul(ranks[h])))
            .fold(0, usize::saturating_add)
    }

    /// Objective for a bin index per hole.
    pub fn cost(&self, bins: &[usize]) -> usize {
        let ranks: Vec<usize> = self.holes.iter().zip(bins).map(|(h, &b)| h.rank(b)).collect();
        self.cost_of_ranks(&ranks)
    }

    /// Discarded squared mass, summed in hole order.
    pub fn error_sq(&self, bins: &[usize]) -> f64 {
        self.holes
            .iter()
            .zip(bins)
            .fold(0.0, |acc, (h, &b)| acc + h.options[b].error_sq)
    }

    pub fn feasible(&self, bins: &[usize]) -> bool {
        self.error_sq(bins) <= self.budget_sq && self.cut.is_none_or(|c| self.cost(bins) <= c)
    }

    /// The linearized 0-1 program: one-hot rows, the budget row, product
    /// variables `y ≤ x_i`, `y ≥ Σx − (n − 1)` and the optional cut row.
    pub fn to_ilp(&self) -> Ilp {
        let mut vars = Vec::new();
        let mut choice = Vec::new();
        for (h, hole) in self.holes.iter().enumerate() {
            choice.push(
                (0..hole.options.len())
                    .map(|b| {
                        vars.push(IlpVar::Choice { hole: h, bin: b });
                        vars.len() - 1
                    })
                    .collect::<Vec<_>>(),
            );
        }
        let mut constraints = Vec::new();
        for ids in &choice {
            constraints.push(Constraint {
                terms: ids.iter().map(|&v| (v, 1.0)).collect(),
                sense: Sense::Eq,
                rhs: 1.0,
            });
        }
        constraints.push(Constraint {
            terms: self
                .holes
                .iter()
                .enumerate()
                .flat_map(|(h, hole)| hole.options.iter().enumerate().map(move |(b, o)| (h, b, o.error_sq)))
                .map(|(h, b, e)| (choice[h][b], e))
                .collect(),
            sense: Sense::Le,
            rhs: self.budget_sq,
        });
        let mut objective = Vec::new();
        let mut constant = 0.0;
        for term in &self.terms {
            if term.holes.is_empty() {
                constant += term.coeff as f64;
                continue;
            }
            // One product variable per combination of the adjacent holes' bins.
            let mut combo = vec![0usize; term.holes.len()];
            loop {
                let factors: Vec<usize> = term.holes.iter().zip(&combo).map(|(&h, &b)| choice[h][b]).collect();
                let value = term
                    .holes
                    .iter()
                    .zip(&combo)
                    .fold(term.coeff as f64, |acc, (&h, &b)| acc * self.holes[h].rank(b) as f64);
                let var = if factors.len() == 1 {
                    factors[0]
                } else {
                    vars.push(IlpVar::Product { factors: factors.clone() });
                    let y = vars.len() - 1;
                    for &f in &factors {
                        constraints.push(Constraint {
                            terms: vec![(y, 1.0), (f, -1.0)],
                            sense: Sense::Le,
                            rhs: 0.0,
                        });
                    }
                    let mut row = vec![(y, 1.0)];
                    row.extend(factors.iter().map(|&f| (f, -1.0)));
                    constraints.push(Constraint {
                        terms: row,
                        sense: Sense::Ge,
                        rhs: -(factors.len() as f64 - 1.0),
                    });
                    y
                };
                objective.push((var, value));
                // Odometer over bin combinations.
                let mut k = 0;
                loop {
                    if k == combo.len() {
                        break;
                    }
                    combo[k] += 1;
                    if combo[k] < self.holes[term.holes[k]].options.len() {
                        break;
                    }
                    combo[k] = 0;
                    k += 1;
                }
                if k == combo.len() {
                    break;
                }
            }
        }
        if let Some(cut) = self.cut {
            constraints.push(Constraint {
                terms: objective.clone(),
                sense: Sense::Le,
                rhs: cut as f64 - constant,
            });
        }
        Ilp {
            vars,
            objective,
            objective_const: constant,
            constraints,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IlpVar {
    Choice { hole: usize, bin: usize },
    Product { factors: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub terms: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// A 0-1 linear program: minimize `objective · x + objective_const`.
#[derive(Clone, Debug)]
pub struct Ilp {
    pub vars: Vec<IlpVar>,
    pub objective: Vec<(usize, f64)>,
    pub objective_const: f64,
    pub constraints: Vec<Constraint>,
}

impl Ilp {
    pub fn satisfied(&self, x: &[bool]) -> bool {
        self.constraints.iter().all(|c| {
            let lhs: f64 = c.terms.iter().filter(|(v, _)| x[*v]).map(|(_, a)| a).sum();
            match c.sense {
                Sense::Le => lhs <= c.rhs,
                Sense::Ge => lhs >= c.rhs,
                Sense::Eq => lhs == c.rhs,
            }
        })
    }

    pub fn objective(&self, x: &[bool]) -> f64 {
        self.objective_const + self.objective.iter().filter(|(v, _)| x[*v]).map(|(_, a)| a).sum::<f64>()
    }
}

/// An optimal completion of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// Bin index per hole.
    pub bins: Vec<usize>,
    pub discards: Vec<usize>,
    pub ranks: Vec<usize>,
    pub cost: usize,
    pub error_sq: f64,
}

impl Solution {
    fn from_bins(m: &CostModel, bins: Vec<usize>) -> Self {
        Self {
            discards: m.holes.iter().zip(&bins).map(|(h, &b)| h.options[b].discard).collect(),
            ranks: m.holes.iter().zip(&bins).map(|(h, &b)| h.rank(b)).collect(),
            cost: m.cost(&bins),
            error_sq: m.error_sq(&bins),
            bins,
        }
    }
}

/// Exact optimum, or `None` when the cut excludes every feasible point.
/// Among optima the lexicographically smallest bin vector wins.
pub fn solve(m: &CostModel) -> Option<Solution> {
    struct Search<'a> {
        m: &'a CostModel,
        bins: Vec<usize>,
        ranks: Vec<usize>,
        bound: usize,
        best: Option<Vec<usize>>,
    }

    impl Search<'_> {
        /// Cost with holes from `next` on at their smallest individually
        /// affordable rank.
        fn lower_bound(&mut self, next: usize, spent: f64) -> usize {
            for h in next..self.m.holes.len() {
                let hole = &self.m.holes[h];
                let b = hole
                    .options
                    .iter()
                    .rposition(|o| spent + o.error_sq <= self.m.budget_sq)
                    .unwrap_or(0);
                self.ranks[h] = hole.rank(b);
            }
            self.m.cost_of_ranks(&self.ranks)
        }

        fn dfs(&mut self, h: usize, spent: f64) {
            if h == self.m.holes.len() {
                self.bound = self.m.cost_of_ranks(&self.ranks);
                self.best = Some(self.bins.clone());
                return;
            }
            for b in 0..self.m.holes[h].options.len() {
                let opt = self.m.holes[h].options[b];
                let next_spent = spent + opt.error_sq;
                if next_spent > self.m.budget_sq {
                    break;
                }
                self.bins[h] = b;
                self.ranks[h] = self.m.holes[h].rank(b);
                if self.lower_bound(h + 1, next_spent) >= self.bound {
                    continue;
                }
                self.dfs(h + 1, next_spent);
            }
        }
    }

    let n = m.holes.len();
    let mut s = Search {
        m,
        bins: vec![0; n],
        ranks: m.holes.iter().map(|h| h.len).collect(),
        bound: m.cut.map_or(usize::MAX, |c| c.saturating_add(1)),
        best: None,
    };
    if n == 0 {
        let cost = m.cost_of_ranks(&[]);
        return (cost < s.bound).then(|| Solution::from_bins(m, Vec::new()));
    }
    s.dfs(0, 0.0);
    s.best.map(|bins| Solution::from_bins(m, bins))
}

/// How a sketch's holes get their ranks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankStrategy {
    /// Exact optimization of the cost model.
    #[default]
    Constraint,
    /// Each hole independently spends an equal share of the budget.
    Equal,
}

/// A completed sketch with its predicted (upper bound) size.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub program: Program,
    pub ranks: Vec<usize>,
    pub predicted_cost: usize,
    pub predicted_error_sq: f64,
}

/// Fills every hole of `s` so that executing the result on the table's
/// tensor succeeds within `eps`. `None` when nothing costs at most `cut`.
pub fn complete_sketch(
    s: &Sketch,
    table: &SpectrumTable,
    eps: f64,
    strategy: RankStrategy,
    bin_fraction: f64,
    cut: Option<usize>,
) -> Result<Option<Completion>> {
    let budget_sq = table.budget_sq(eps);
    let solution = match strategy {
        RankStrategy::Constraint => solve(&CostModel::build(s, table, budget_sq, bin_fraction, cut)?),
        RankStrategy::Equal => {
            let share = if s.is_empty() { budget_sq } else { budget_sq / s.len() as f64 };
            let holes = s
                .partitions()
                .iter()
                .map(|p| {
                    let sp = table
                        .get(p)
                        .ok_or_else(|| crate::Error::InvalidState(format!("no spectrum for partition {p}")))?;
                    let discard = sp.max_discard(share);
                    Ok(HoleVar {
                        len: sp.len(),
                        options: vec![BinOption {
                            discard,
                            error_sq: sp.prefix_sq[discard],
                        }],
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let topo = topology_from_sketch(s, table.dims().len())?;
            let m = CostModel::new(&topo, table.dims(), holes, f64::INFINITY, cut);
            let bins = vec![0; s.len()];
            m.feasible(&bins).then(|| Solution::from_bins(&m, bins))
        }
    };
    let Some(sol) = solution else {
        return Ok(None);
    };
    let exprs = s
        .exprs()
        .iter()
        .zip(&sol.ranks)
        .map(|(e, &r)| {
            let mut e = *e;
            e.rank = Rank::Fixed(r);
            e
        })
        .collect();
    Ok(Some(Completion {
        program: Program::new(exprs)?,
        ranks: sol.ranks,
        predicted_cost: sol.cost,
        predicted_error_sq: sol.error_sq,
    }))
}
