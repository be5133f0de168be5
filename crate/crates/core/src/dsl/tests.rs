use super::*;
use crate::network::{full_set, topology_signature};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn free(dims: &[usize]) -> Vec<Index> {
    dims.iter()
        .enumerate()
        .map(|(i, &n)| Index::new(i as IndexId, format!("I{}", i + 1), n).unwrap())
        .collect()
}

fn random_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(free(dims), |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn osplit(block: IndexSet, order: usize, r: usize) -> Expr {
    Expr::new(block, order, Rank::Fixed(r)).unwrap()
}

fn bridge_program(r: usize) -> Program {
    Program::new(vec![osplit(0b0001, 4, r), osplit(0b0011, 4, r), osplit(0b0010, 4, r)]).unwrap()
}

/// A random duplicate-free laminar family, in random order.
fn random_family(order: usize, rng: &mut impl Rng) -> Vec<Partition> {
    let mut all: Vec<Partition> = (1..full_set(order))
        .filter(|m| m & 1 == 0)
        .map(|m| Partition::new(m, order).unwrap())
        .collect();
    all.shuffle(rng);
    let target = rng.random_range(1..=2 * order - 3);
    let mut chosen: Vec<Partition> = Vec::new();
    for p in all {
        if chosen.len() < target && chosen.iter().all(|q| q.compatible(&p)) {
            chosen.push(p);
        }
    }
    chosen
}

fn partition_set(g: &TensorNetwork) -> BTreeSet<IndexSet> {
    g.edge_partitions().iter().map(|(p, _)| p.mask()).collect()
}

#[test]
fn empty_program_is_identity() {
    let t = random_tensor(&[2, 3, 2], 1);
    let st = ExecState::new(t.clone(), 0.1).unwrap();
    let out = exec_program(&Program::default(), st.clone()).unwrap();
    assert_eq!(out.network.node_count(), 1);
    assert_eq!(out.budget_sq, st.budget_sq);
    assert_eq!(out.network.contract_all().unwrap(), t);
}

#[test]
fn bridge_program_builds_bridge_topology() {
    let t = random_tensor(&[3, 3, 3, 3], 2);
    let out = exec_program(&bridge_program(81), ExecState::new(t.clone(), 0.0).unwrap()).unwrap();
    out.network.check().unwrap();
    let expected: BTreeSet<IndexSet> = [0b1110, 0b1100, 0b0010].into_iter().collect();
    assert_eq!(partition_set(&out.network), expected);
    assert_eq!(out.network.node_count(), 4);
    // One node carries only bonds (C).
    assert!(out.network.node_ids().iter().any(|&n| out.network.node_free_set(n) == 0));
    let err = out.network.contract_all().unwrap().distance(&t).unwrap();
    assert!(err <= 1e-10 * t.frobenius_norm());
}

#[test]
fn rank_one_on_full_rank_data_fails() {
    let t = random_tensor(&[3, 3, 3, 3], 3);
    // SVD oracle: the {I1,I2} matricization has more than one nonzero singular value.
    let sv = tensor::singular_values(&t.matricize(&[0, 1]).unwrap().matrix).unwrap();
    assert!(sv[1] > 1e-3);
    let p = Program::new(vec![osplit(0b0001, 4, 3), osplit(0b0011, 4, 1)]).unwrap();
    let f = exec_program(&p, ExecState::new(t, 0.0).unwrap()).unwrap_err();
    assert_eq!(f.expr, Some(1));
    assert!(matches!(f.reason, FailureReason::RankTooSmall { requested: 1, .. }));
}

#[test]
fn first_osplit_separates_i1() {
    let t = random_tensor(&[2, 3, 2, 2], 4);
    let st = exec_osplit(&ExecState::new(t, 0.0).unwrap(), 0b0001, 2).unwrap();
    assert_eq!(st.network.node_count(), 2);
    assert_eq!(st.network.edge_partitions()[0].0, Partition::new(0b0001, 4).unwrap());
}

#[test]
fn crossing_blocks_fail() {
    let t = random_tensor(&[2, 2, 2, 2], 5);
    let p = Program::new(vec![osplit(0b0011, 4, 4), osplit(0b0101, 4, 4)]).unwrap();
    let f = exec_program(&p, ExecState::new(t, 0.0).unwrap()).unwrap_err();
    assert_eq!(f, Failure { expr: Some(1), reason: FailureReason::NoSuitableNode });
}

#[test]
fn existing_partition_is_a_no_op() {
    let t = random_tensor(&[2, 2, 2, 2], 6);
    let st = exec_osplit(&ExecState::new(t, 0.0).unwrap(), 0b0011, 4).unwrap();
    let again = exec_osplit(&st, 0b0011, 2).unwrap();
    assert_eq!(again.network.size(), st.network.size());
    assert_eq!(again.network.node_ids(), st.network.node_ids());
    let complement = exec_osplit(&st, 0b1100, 4).unwrap();
    assert_eq!(complement.network.node_ids(), st.network.node_ids());
}

fn rank_two_state(budget_sq: f64) -> (ExecState, f64) {
    // A = u1 v1ᵀ + u2 v2ᵀ with orthogonal u's and v's: σ = (3, 0.5).
    let f = free(&[2, 2]);
    let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.5]);
    let rot = DMatrix::from_row_slice(2, 2, &[0.6, -0.8, 0.8, 0.6]);
    let m = &rot * a * rot.transpose();
    let t = Tensor::new(f, m.transpose().as_slice().to_vec()).unwrap();
    let sigma2 = tensor::svd(&m).unwrap().sigma[1];
    let norm = t.frobenius_norm();
    (ExecState::with_budget(TensorNetwork::from_tensor(t), budget_sq, norm), sigma2)
}

#[test]
fn isplit_rank_two_exact() {
    let (st, _) = rank_two_state(0.0);
    let out = exec_isplit(&st, 0, &[0], 2).unwrap();
    assert_eq!(out.network.node_count(), 2);
    assert_eq!(out.network.edges()[0].index.size(), 2);
}

#[test]
fn isplit_rank_one_needs_budget() {
    let (st, sigma2) = rank_two_state(0.0);
    assert!((sigma2 - 0.5).abs() < 1e-12);
    let f = exec_isplit(&st, 0, &[0], 1).unwrap_err();
    assert_eq!(f.reason, FailureReason::RankTooSmall { required: 2, requested: 1 });

    let (st, sigma2) = rank_two_state(0.3);
    let out = exec_isplit(&st, 0, &[0], 1).unwrap();
    assert!((out.budget_sq - (0.3 - sigma2 * sigma2)).abs() < 1e-12);
    assert_eq!(out.network.edges()[0].index.size(), 1);
}

#[test]
fn isplit_layout_and_names() {
    let t = random_tensor(&[2, 3, 4], 7);
    let st = ExecState::new(t, 0.0).unwrap();
    let out = exec_isplit(&st, 0, &[2, 0], 6).unwrap();
    let ids = out.network.node_ids();
    let u = out.network.node(ids[0]).unwrap();
    let sv = out.network.node(ids[1]).unwrap();
    let names: Vec<&str> = u.indices().iter().map(Index::name).collect();
    assert_eq!(names, ["I1", "I3", "r1"]);
    let names: Vec<&str> = sv.indices().iter().map(Index::name).collect();
    assert_eq!(names, ["r1", "I2"]);
    assert!(exec_isplit(&st, 0, &[], 2).is_err());
    assert!(exec_isplit(&st, 0, &[0, 1, 2], 2).is_err());
}

#[test]
fn valid_extension_examples() {
    let s = Program::new(vec![Expr::new(0b0011, 4, Rank::Hole(0)).unwrap()]).unwrap();
    assert!(!valid_extension(&s, 0b0101, 4));
    let s = Program::new(vec![Expr::new(0b0001, 4, Rank::Hole(0)).unwrap()]).unwrap();
    assert!(valid_extension(&s, 0b0011, 4));
    assert!(!valid_extension(&s, 0b0001, 4));
    assert!(!valid_extension(&s, 0b1110, 4));
    assert!(!valid_extension(&s, 0, 4));
}

#[test]
fn fill_examples() {
    let p = bridge_program(2);
    assert_eq!(p.fill(&BTreeMap::new()).unwrap(), p);
    let sketch = p.to_sketch();
    assert_eq!(sketch.holes(), vec![0, 1, 2]);
    let filled = sketch.fill(&BTreeMap::from([(0, 2), (1, 2), (2, 2)])).unwrap();
    assert!(programs_equivalent(&filled, &p));
    assert!(sketch.fill(&BTreeMap::from([(0, 2), (1, 2)])).is_err());
    assert!(Program::new(vec![Expr::new(1, 3, Rank::Hole(0)).unwrap(), Expr::new(2, 3, Rank::Hole(0)).unwrap()]).is_err());
}

#[test]
fn reversed_bridge_program_is_equivalent() {
    let p = bridge_program(9);
    let rev = Program::new(p.exprs().iter().rev().copied().collect()).unwrap();
    assert!(programs_equivalent(&p, &rev));
    let t = random_tensor(&[3, 3, 3, 3], 8);
    let a = exec_program(&p, ExecState::new(t.clone(), 0.0).unwrap()).unwrap();
    let b = exec_program(&rev, ExecState::new(t, 0.0).unwrap()).unwrap();
    assert_eq!(topology_signature(&a.network), topology_signature(&b.network));

    let other = Program::new(vec![osplit(0b0001, 4, 9), osplit(0b0011, 4, 8), osplit(0b0010, 4, 9)]).unwrap();
    assert!(!programs_equivalent(&p, &other));
}

#[test]
fn input_directed_sequences_translate_to_same_osplits() {
    // ISplit(T,{I1}); ISplit(T2,{I3,I4})  vs  ISplit(T,{I1,I2}); ISplit(T1,{I1})
    let t = random_tensor(&[2, 2, 2, 2], 9);
    let st = ExecState::new(t, 0.0).unwrap();
    let a1 = exec_isplit(&st, 0, &[0], 2).unwrap();
    let a2 = exec_isplit(&a1, 2, &[2, 3], 4).unwrap();
    let b1 = exec_isplit(&st, 0, &[0, 1], 4).unwrap();
    let b2 = exec_isplit(&b1, 1, &[0], 2).unwrap();
    let pa = program_from_network(&a2.network);
    let pb = program_from_network(&b2.network);
    assert!(programs_equivalent(&pa, &pb));
    assert_eq!(topology_signature(&a2.network), topology_signature(&b2.network));
}

#[test]
fn every_distinct_partition_tree_is_reachable() {
    // Trees built by input-directed splits are reproduced by their own
    // output-directed program.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for seed in 0..10 {
        let t = random_tensor(&[2, 2, 2, 2, 2], 100 + seed);
        let blocks = random_family(5, &mut rng);
        let sketch = Program::sketch(&blocks);
        let full = sketch
            .fill(&sketch.holes().iter().map(|&h| (h, 32)).collect())
            .unwrap();
        let g = exec_program(&full, ExecState::new(t.clone(), 0.0).unwrap()).unwrap().network;
        let again = exec_program(&program_from_network(&g), ExecState::new(t, 0.0).unwrap()).unwrap();
        assert_eq!(topology_signature(&g), topology_signature(&again.network));
    }
}

#[test]
fn program_text_round_trip() {
    let f = free(&[2, 2, 2, 2]);
    let src = "# fig 2\nosplit {I1} rank=3\nosplit {I1, I2} rank=?  # hole\n\nosplit {I2} rank=2\n";
    let p = Program::parse(src, &f).unwrap();
    assert_eq!(p.len(), 3);
    assert_eq!(p.exprs()[1].rank, Rank::Hole(0));
    assert_eq!(Program::parse(&p.to_text(&f), &f).unwrap(), p);
    assert!(Program::parse("osplit {I9} rank=2", &f).is_err());
    assert!(Program::parse("osplit {I1} rank=0", &f).is_err());
    assert!(Program::parse("split {I1} rank=2", &f).is_err());
    assert!(Program::parse("osplit {I1,I2,I3,I4} rank=2", &f).is_err());
    assert!(Program::parse("", &f).unwrap().is_empty());
}

/// Descending singular values of the `block` matricization, padded to `len`.
fn spectrum(t: &Tensor, block: IndexSet) -> Vec<f64> {
    let rows: Vec<IndexId> = members(block).map(|b| b as IndexId).collect();
    tensor::singular_values(&t.matricize(&rows).unwrap().matrix).unwrap()
}

#[test]
fn truncation_never_raises_singular_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..10 {
        let t = random_tensor(&[4, 4, 4, 4], 200 + seed);
        let norm = t.frobenius_norm();
        let blocks = random_family(4, &mut rng);
        let sketch = Program::sketch(&blocks);
        let assign = sketch.holes().iter().map(|&h| (h, rng.random_range(2..=6))).collect();
        let p = sketch.fill(&assign).unwrap();
        let mut st = ExecState::new(t.clone(), 0.9).unwrap();
        for e in p.exprs() {
            let current = st.network.contract_all().unwrap();
            for q in &blocks {
                let before = spectrum(&t, q.mask());
                let now = spectrum(&current, q.mask());
                for (a, b) in now.iter().zip(&before) {
                    assert!(*a <= b + 1e-8 * norm, "σ grew: {a} > {b}");
                }
            }
            let Rank::Fixed(r) = e.rank else { unreachable!() };
            match exec_osplit(&st, e.block(), r) {
                Ok(next) => st = next,
                Err(_) => break,
            }
        }
    }
}

#[test]
fn accounted_error_matches_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut executed = 0;
    for seed in 0..30 {
        let dims: Vec<usize> = (0..4).map(|_| rng.random_range(2..=6)).collect();
        let t = random_tensor(&dims, 300 + seed);
        let norm_sq = t.norm_sq();
        let blocks = random_family(4, &mut rng);
        let sketch = Program::sketch(&blocks);
        let assign = sketch.holes().iter().map(|&h| (h, rng.random_range(1..=8))).collect();
        let p = sketch.fill(&assign).unwrap();
        let Ok(out) = exec_program(&p, ExecState::new(t.clone(), 0.6).unwrap()) else {
            continue;
        };
        executed += 1;
        out.network.check().unwrap();
        let ids: BTreeSet<IndexId> = out.network.free_edges().iter().map(|(_, ix)| ix.id()).collect();
        assert_eq!(ids, (0..4).collect());
        let err_sq = out.network.contract_all().unwrap().distance(&t).unwrap().powi(2);
        assert!(err_sq <= out.spent_sq() + 1e-9 * norm_sq, "{err_sq} > {}", out.spent_sq());
        assert!(out.budget_sq <= out.initial_budget_sq());
    }
    assert!(executed >= 10);
}

#[test]
fn failure_propagates() {
    let t = random_tensor(&[2, 2, 2, 2], 13);
    let p = Program::new(vec![osplit(0b0011, 4, 4), osplit(0b0101, 4, 4), osplit(0b0001, 4, 2)]).unwrap();
    assert_eq!(exec_program(&p, ExecState::new(t, 0.0).unwrap()).unwrap_err().expr, Some(1));
    let holes = Program::new(vec![Expr::new(1, 3, Rank::Hole(0)).unwrap()]).unwrap();
    let t = random_tensor(&[2, 2, 2], 14);
    assert_eq!(
        exec_program(&holes, ExecState::new(t, 0.0).unwrap()).unwrap_err().reason,
        FailureReason::Incomplete
    );
}
