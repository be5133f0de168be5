//! End-to-end structure search, topology reuse, baselines and the
//! synthetic ground-truth generator.

use std::collections::BinaryHeap;
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsl::{exec_osplit_adaptive, exec_program, program_from_network, ExecState, Program, Sketch};
use crate::error::{invalid, Error, Result};
use crate::network::{full_set, IndexSet, Partition, TensorNetwork};
use crate::par::Pool;
use crate::rank::{complete_sketch, Completion, RankStrategy, SpectrumTable};
use crate::sketch::{canonical_partitions, enumerate_sketches, max_tree_splits, topology_from_sketch, SketchSpace};
use crate::tensor::{Index, Tensor};

/// Default cap on the number of splits explored.
pub const DEFAULT_MAX_SPLITS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Relative Frobenius error bound, in (0, 1).
    pub eps: f64,
    /// Number of completions that are actually executed.
    pub k: usize,
    /// `None` means `min(2d − 3, 6)`.
    pub max_splits: Option<usize>,
    pub bin_fraction: f64,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub strategy: RankStrategy,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            k: 1,
            max_splits: None,
            bin_fraction: 0.1,
            seed: 0,
            threads: 0,
            strategy: RankStrategy::Constraint,
        }
    }
}

impl SearchConfig {
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return invalid(format!("eps must be in (0, 1), got {}", self.eps));
        }
        if self.k == 0 {
            return invalid("k must be at least 1");
        }
        if self.max_splits == Some(0) {
            return invalid("max_splits must be positive");
        }
        if !(self.bin_fraction > 0.0 && self.bin_fraction <= 1.0) {
            return invalid(format!("bin fraction must be in (0, 1], got {}", self.bin_fraction));
        }
        Ok(())
    }

    pub fn max_splits_for(&self, order: usize) -> usize {
        self.max_splits
            .unwrap_or(DEFAULT_MAX_SPLITS)
            .min(max_tree_splits(order))
    }
}

/// Wall time per phase, in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub spectra: f64,
    pub completion: f64,
    pub execution: f64,
    pub rounding: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub network: TensorNetwork,
    /// The final network as a program (its partitions and ranks).
    pub program: Program,
    pub achieved_rel_error: f64,
    pub compression_ratio: f64,
    /// Upper bound predicted for the chosen completion before execution.
    pub predicted_cost: usize,
    pub timings: Timings,
    pub sketch_count: usize,
    /// Programs executed on data.
    pub executions: usize,
}

impl SearchResult {
    pub fn size(&self) -> usize {
        self.network.size()
    }
}

/// A completion that survived ranking.
#[derive(Clone, Debug)]
pub struct RankedSketch {
    /// Position in enumeration order.
    pub index: usize,
    pub sketch: Sketch,
    pub completion: Completion,
}

/// An executed candidate with its leftover squared budget.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub ranked: RankedSketch,
    pub state: ExecState,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub candidates: Vec<Candidate>,
    pub sketch_count: usize,
    pub timings: Timings,
}

fn require_order(t: &Tensor) -> Result<()> {
    if t.order() < 3 {
        return Err(Error::Unsupported(format!(
            "structure search needs a tensor of order at least 3, got order {}; \
             an order-2 tensor is best compressed by a truncated SVD (the tt baseline)",
            t.order()
        )));
    }
    Ok(())
}

/// k smallest costs seen so far; the cut is the largest of them once full.
struct TopK {
    k: usize,
    heap: Mutex<BinaryHeap<usize>>,
}

impl TopK {
    fn cut(&self) -> Option<usize> {
        let heap = self.heap.lock().unwrap_or_else(|e| e.into_inner());
        (heap.len() >= self.k).then(|| *heap.peek().expect("nonempty"))
    }

    fn offer(&self, cost: usize) {
        let mut heap = self.heap.lock().unwrap_or_else(|e| e.into_inner());
        heap.push(cost);
        if heap.len() > self.k {
            heap.pop();
        }
    }
}

/// Completes every sketch under a shared top-k cut and returns the
/// survivors ordered by predicted cost, then split count, then
/// enumeration order. Only the first `k` are guaranteed to be present.
pub fn rank_sketches(
    sketches: &[Sketch],
    table: &SpectrumTable,
    cfg: &SearchConfig,
    pool: &Pool,
) -> Result<Vec<RankedSketch>> {
    let topk = TopK {
        k: cfg.k,
        heap: Mutex::new(BinaryHeap::new()),
    };
    let indexed: Vec<(usize, &Sketch)> = sketches.iter().enumerate().collect();
    let done = pool.map(&indexed, |&(index, s)| -> Result<Option<RankedSketch>> {
        let c = complete_sketch(s, table, cfg.eps, cfg.strategy, cfg.bin_fraction, topk.cut())?;
        Ok(c.map(|completion| {
            topk.offer(completion.predicted_cost);
            RankedSketch {
                index,
                sketch: s.clone(),
                completion,
            }
        }))
    });
    let mut ranked: Vec<RankedSketch> = done.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    ranked.sort_by_key(|r| (r.completion.predicted_cost, r.sketch.len(), r.index));
    Ok(ranked)
}

/// Enumerates, completes and ranks all sketches, then executes the best `k`.
pub fn synth(t: &Tensor, cfg: &SearchConfig, pool: &Pool) -> Result<SynthOutput> {
    cfg.validate()?;
    require_order(t)?;
    let mut timings = Timings::default();
    let space = SketchSpace::new(t.indices().to_vec(), cfg.max_splits_for(t.order()))?;
    let sketches: Vec<Sketch> = enumerate_sketches(&space).collect();

    let start = Instant::now();
    let table = SpectrumTable::build(t, &canonical_partitions(t.order()), pool)?;
    timings.spectra = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut ranked = rank_sketches(&sketches, &table, cfg, pool)?;
    ranked.truncate(cfg.k);
    timings.completion = start.elapsed().as_secs_f64();
    log::info!(
        "{} sketches ranked; best predicted cost {:?}",
        sketches.len(),
        ranked.first().map(|r| r.completion.predicted_cost)
    );

    let start = Instant::now();
    let s0 = ExecState::new(t.clone(), cfg.eps)?;
    let candidates = ranked
        .into_iter()
        .map(|r| {
            let state = exec_program(&r.completion.program, s0.clone())
                .map_err(|f| Error::InvalidState(format!("completed sketch '{}' failed to execute: {f}", r.sketch)))?;
            Ok(Candidate { ranked: r, state })
        })
        .collect::<Result<Vec<_>>>()?;
    timings.execution = start.elapsed().as_secs_f64();
    Ok(SynthOutput {
        candidates,
        sketch_count: sketches.len(),
        timings,
    })
}

/// Spends the leftover budget on rounding and checks the result by
/// contraction. Returns the network and its relative error.
///
/// The leftover squared budget is tried first; if the contracted error
/// then exceeds the bound, rounding is redone with the budget the triangle
/// inequality guarantees, and failing that the network is kept as is.
pub fn round_within(g: &TensorNetwork, t: &Tensor, eps: f64) -> Result<(TensorNetwork, f64)> {
    let norm = t.frobenius_norm();
    let bound = eps * norm;
    let rel = |e: f64| if norm == 0.0 { 0.0 } else { e / norm };
    let err0 = g.contract_all()?.distance(t)?;
    let leftover_sq = (bound * bound - err0 * err0).max(0.0);
    let triangle_sq = (bound - err0).max(0.0).powi(2);
    for budget in [leftover_sq, triangle_sq] {
        let (r, _) = g.round(budget, norm)?;
        if r.size() >= g.size() {
            continue;
        }
        let err = r.contract_all()?.distance(t)?;
        if err <= bound {
            return Ok((r, rel(err)));
        }
        log::debug!("rounding with budget {budget:e} overshot ({err:e} > {bound:e})");
    }
    Ok((g.clone(), rel(err0)))
}

fn single_node(t: &Tensor) -> TensorNetwork {
    TensorNetwork::from_tensor(t.clone())
}

fn finish(t: &Tensor, network: TensorNetwork, rel: f64, predicted_cost: usize, timings: Timings, sketch_count: usize, executions: usize) -> SearchResult {
    let (network, rel) = if network.size() < t.len() {
        (network, rel)
    } else {
        (single_node(t), 0.0)
    };
    SearchResult {
        program: program_from_network(&network),
        compression_ratio: t.len() as f64 / network.size() as f64,
        achieved_rel_error: rel,
        network,
        predicted_cost,
        timings,
        sketch_count,
        executions,
    }
}

/// Searches topologies and ranks for the smallest tree network within
/// `cfg.eps` of `t`. Falls back to the single-node network when nothing
/// smaller is found.
pub fn search_structure(t: &Tensor, cfg: &SearchConfig) -> Result<SearchResult> {
    let total = Instant::now();
    let pool = Pool::new(cfg.threads)?;
    let out = synth(t, cfg, &pool)?;
    let mut timings = out.timings;
    let start = Instant::now();
    let mut best: Option<(TensorNetwork, f64, usize)> = None;
    for c in &out.candidates {
        let (g, rel) = round_within(&c.state.network, t, cfg.eps)?;
        if best.as_ref().is_none_or(|(b, _, _)| g.size() < b.size()) {
            best = Some((g, rel, c.ranked.completion.predicted_cost));
        }
    }
    timings.rounding = start.elapsed().as_secs_f64();
    timings.total = total.elapsed().as_secs_f64();
    let (g, rel, predicted) = best.unwrap_or_else(|| (single_node(t), 0.0, t.len()));
    Ok(finish(t, g, rel, predicted, timings, out.sketch_count, out.candidates.len()))
}

/// Completes, executes and rounds one given sketch (ranks in `s` are ignored).
pub fn decompose_with_topology(t: &Tensor, s: &Sketch, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    require_order(t)?;
    let total = Instant::now();
    let s = s.to_sketch();
    topology_from_sketch(&s, t.order())?;
    let pool = Pool::new(cfg.threads)?;
    let mut timings = Timings::default();

    let start = Instant::now();
    let table = SpectrumTable::build(t, &s.partitions(), &pool)?;
    timings.spectra = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let c = complete_sketch(&s, &table, cfg.eps, cfg.strategy, cfg.bin_fraction, None)?
        .ok_or_else(|| Error::InvalidState("uncut completion found no solution".into()))?;
    timings.completion = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let st = exec_program(&c.program, ExecState::new(t.clone(), cfg.eps)?)
        .map_err(|f| Error::InvalidState(format!("completed sketch failed to execute: {f}")))?;
    timings.execution = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let (g, rel) = round_within(&st.network, t, cfg.eps)?;
    timings.rounding = start.elapsed().as_secs_f64();
    timings.total = total.elapsed().as_secs_f64();
    Ok(finish(t, g, rel, c.predicted_cost, timings, 1, 1))
}

/// Splits `blocks` in order, each with rank chosen adaptively for an equal
/// share of the squared budget, then rounds.
fn adaptive_chain(t: &Tensor, eps: f64, blocks: &[IndexSet]) -> Result<SearchResult> {
    if !(0.0..1.0).contains(&eps) {
        return invalid(format!("eps must be in [0, 1), got {eps}"));
    }
    let total = Instant::now();
    let mut timings = Timings::default();
    let mut st = ExecState::new(t.clone(), eps)?;
    let share = st.budget_sq / blocks.len().max(1) as f64;
    let start = Instant::now();
    for &b in blocks {
        st = exec_osplit_adaptive(&st, b, share)
            .map_err(|f| Error::InvalidState(format!("baseline split failed: {f}")))?;
    }
    timings.execution = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let (g, rel) = round_within(&st.network, t, eps)?;
    timings.rounding = start.elapsed().as_secs_f64();
    timings.total = total.elapsed().as_secs_f64();
    let size = g.size();
    Ok(finish(t, g, rel, size, timings, 0, 1))
}

/// Tensor train: blocks `{I1}, {I1,I2}, …, {I1..I(d−1)}`.
pub fn tt_baseline(t: &Tensor, eps: f64) -> Result<SearchResult> {
    if t.order() < 2 {
        return Err(Error::Unsupported("tensor train needs at least 2 indices".into()));
    }
    let blocks: Vec<IndexSet> = (1..t.order()).map(full_set).collect();
    adaptive_chain(t, eps, &blocks)
}

/// The blocks of a balanced binary dimension tree, top down.
pub fn balanced_blocks(order: usize) -> Vec<IndexSet> {
    let range = |lo: usize, hi: usize| full_set(hi) & !full_set(lo);
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::from([(0, order)]);
    while let Some((lo, hi)) = queue.pop_front() {
        if hi - lo < 2 {
            continue;
        }
        let mid = lo + (hi - lo).div_ceil(2);
        for (a, b) in [(lo, mid), (mid, hi)] {
            let block = range(a, b);
            let dup = out
                .iter()
                .any(|&o| o == block || o == full_set(order) & !block);
            if !dup {
                out.push(block);
            }
            queue.push_back((a, b));
        }
    }
    out
}

/// Hierarchical Tucker over a balanced binary dimension tree.
pub fn ht_baseline(t: &Tensor, eps: f64) -> Result<SearchResult> {
    if t.order() < 2 {
        return Err(Error::Unsupported("hierarchical Tucker needs at least 2 indices".into()));
    }
    adaptive_chain(t, eps, &balanced_blocks(t.order()))
}

/// A random tree topology over `order` indices: a random maximal laminar
/// family, of which a random nonempty subset is kept.
pub fn sample_tree(order: usize, rng: &mut impl Rng) -> Result<Vec<Partition>> {
    if order < 3 {
        return Err(Error::Unsupported(format!("random trees need at least 3 indices, got {order}")));
    }
    let mut all = canonical_partitions(order);
    all.shuffle(rng);
    let mut family: Vec<Partition> = Vec::new();
    for p in all {
        if family.iter().all(|q| q.compatible(&p)) {
            family.push(p);
        }
    }
    let m = rng.random_range(1..=max_tree_splits(order));
    family.shuffle(rng);
    family.truncate(m);
    family.sort();
    Ok(family)
}

/// A generated data tensor and the network it was contracted from.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub tensor: Tensor,
    pub truth: TensorNetwork,
    /// Ground-truth partitions with their ranks.
    pub program: Program,
}

impl Synthetic {
    pub fn ratio(&self) -> f64 {
        self.tensor.len() as f64 / self.truth.size() as f64
    }
}

fn data_indices(dims: &[usize]) -> Result<Vec<Index>> {
    dims.iter()
        .enumerate()
        .map(|(i, &n)| Index::new(i as u32, format!("I{}", i + 1), n))
        .collect()
}

/// Contracts a network of the given partitions and ranks whose entries
/// are standard normal draws from `seed`.
pub fn synthesize(dims: &[usize], parts: &[Partition], ranks: &[usize], seed: u64) -> Result<Synthetic> {
    if parts.len() != ranks.len() || ranks.contains(&0) {
        return invalid("one positive rank per partition expected");
    }
    let free = data_indices(dims)?;
    let sketch = Program::sketch(parts);
    let topo = topology_from_sketch(&sketch, dims.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = topo.instantiate(&free, ranks, || rng.sample(StandardNormal))?;
    let program = sketch.fill(&(0..ranks.len()).zip(ranks.iter().copied()).collect())?;
    Ok(Synthetic {
        tensor: truth.contract_all()?,
        truth,
        program,
    })
}

/// A random tree over `dims` with ranks uniform in `rank_range` and
/// standard normal node entries, contracted.
pub fn generate_synthetic(dims: &[usize], rank_range: (usize, usize), seed: u64) -> Result<Synthetic> {
    let (lo, hi) = rank_range;
    if lo == 0 || lo > hi {
        return invalid(format!("rank range [{lo}, {hi}] must satisfy 1 <= min <= max"));
    }
    if dims.contains(&0) {
        return invalid("dimensions must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = sample_tree(dims.len(), &mut rng)?;
    let ranks: Vec<usize> = parts.iter().map(|_| rng.random_range(lo..=hi)).collect();
    synthesize(dims, &parts, &ranks, rng.random())
}
