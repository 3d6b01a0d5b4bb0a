//! VC-dimension analysis of Boolean decision trees and DNF formulas:
//! tree rank, exact tree VC-dimension, the DNF VC upper bound, tree↔DNF
//! conversions, and the curve emitter for comparison plots.

use crate::error::{Error, Result};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};

/// A Boolean decision tree over `{0,1}ⁿ`. At an internal node the `high`
/// subtree is taken on decision 1, the `low` subtree on decision 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BoolTree {
    Leaf(bool),
    Node {
        var: usize,
        high: Box<BoolTree>,
        low: Box<BoolTree>,
    },
}

impl BoolTree {
    pub fn eval(&self, x: &[bool]) -> bool {
        match self {
            BoolTree::Leaf(v) => *v,
            BoolTree::Node { var, high, low } => {
                if x[*var] {
                    high.eval(x)
                } else {
                    low.eval(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            BoolTree::Leaf(_) => 0,
            BoolTree::Node { high, low, .. } => 1 + high.depth().max(low.depth()),
        }
    }

    /// Largest variable index used, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            BoolTree::Leaf(_) => None,
            BoolTree::Node { var, high, low } => {
                Some((*var).max(high.max_var().unwrap_or(0)).max(low.max_var().unwrap_or(0)))
            }
        }
    }
}

/// Tree rank: a single node has rank 0; an internal node has rank
/// `1 + r` when both subtrees have equal rank `r`, else the larger rank.
pub fn rank(tree: &BoolTree) -> usize {
    match tree {
        BoolTree::Leaf(_) => 0,
        BoolTree::Node { high, low, .. } => {
            let rh = rank(high);
            let rl = rank(low);
            if rh == rl {
                rh + 1
            } else {
                rh.max(rl)
            }
        }
    }
}

/// A literal: variable index plus polarity (`true` = positive).
pub type Literal = (usize, bool);

/// A DNF formula: a disjunction of conjunctions of literals. Conjunctions
/// never contain a variable with both polarities (normalized away as
/// unsatisfiable), and literals within a conjunction are deduplicated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolDnf {
    pub conjunctions: Vec<Vec<Literal>>,
}

impl BoolDnf {
    /// Builds a DNF, dropping unsatisfiable conjunctions and duplicate
    /// literals.
    pub fn new(conjunctions: Vec<Vec<Literal>>) -> BoolDnf {
        let mut normalized = Vec::with_capacity(conjunctions.len());
        'outer: for conj in conjunctions {
            let mut lits: Vec<Literal> = Vec::with_capacity(conj.len());
            for (var, pol) in conj {
                if lits.contains(&(var, !pol)) {
                    continue 'outer; // contradictory pair, constant false
                }
                if !lits.contains(&(var, pol)) {
                    lits.push((var, pol));
                }
            }
            lits.sort_unstable();
            normalized.push(lits);
        }
        BoolDnf {
            conjunctions: normalized,
        }
    }

    pub fn eval(&self, x: &[bool]) -> bool {
        self.conjunctions
            .iter()
            .any(|conj| conj.iter().all(|&(var, pol)| x[var] == pol))
    }
}

/// Exact VC-dimension of rank-≤r decision trees over n variables:
/// `Σᵢ₌₀..r C(n, i)`, arbitrary precision.
pub fn tree_vcdim(n: usize, r: usize) -> Result<BigUint> {
    if r > n {
        return Err(Error::contract(format!("rank {r} exceeds variable count {n}")));
    }
    let mut total = BigUint::zero();
    let mut binom = BigUint::one(); // C(n, 0)
    total += &binom;
    for i in 1..=r {
        binom = binom * BigUint::from(n - i + 1) / BigUint::from(i);
        total += &binom;
    }
    Ok(total)
}

/// Upper bound on the VC-dimension of k-conjunction DNF formulas over n
/// variables: `2(n+1)·k·log₂(3k)`.
pub fn dnf_vcdim_bound(n: usize, k: usize) -> Result<f64> {
    dnf_vcdim_bound_with_base(n, k, 2.0)
}

/// Same bound with an explicit logarithm base (the base of the underlying
/// counting lemma is a modeling choice).
pub fn dnf_vcdim_bound_with_base(n: usize, k: usize, base: f64) -> Result<f64> {
    if n < 1 || k < 1 {
        return Err(Error::contract("dnf_vcdim_bound requires n ≥ 1, k ≥ 1"));
    }
    if !(base > 1.0) {
        return Err(Error::contract("log base must exceed 1"));
    }
    Ok(2.0 * (n + 1) as f64 * k as f64 * (3.0 * k as f64).log(base))
}

/// One conjunction per root-to-positive-leaf path; literals are the path's
/// decisions. Equivalent to the tree as a Boolean function.
pub fn tree_to_dnf(tree: &BoolTree) -> BoolDnf {
    fn walk(tree: &BoolTree, path: &mut Vec<Literal>, out: &mut Vec<Vec<Literal>>) {
        match tree {
            BoolTree::Leaf(true) => out.push(path.clone()),
            BoolTree::Leaf(false) => {}
            BoolTree::Node { var, high, low } => {
                path.push((*var, true));
                walk(high, path, out);
                path.pop();
                path.push((*var, false));
                walk(low, path, out);
                path.pop();
            }
        }
    }
    let mut conjunctions = Vec::new();
    walk(tree, &mut Vec::new(), &mut conjunctions);
    BoolDnf::new(conjunctions)
}

/// A chain tree equivalent to the conjunction: one main branch of internal
/// nodes, each falling off to a negative leaf when its literal fails. The
/// result has rank 1 (rank 0 for the empty conjunction's constant-true
/// leaf).
pub fn conjunction_to_rank1_tree(conjunction: &[Literal]) -> BoolTree {
    let mut tree = BoolTree::Leaf(true);
    for &(var, pol) in conjunction.iter().rev() {
        let (high, low) = if pol {
            (tree, BoolTree::Leaf(false))
        } else {
            (BoolTree::Leaf(false), tree)
        };
        tree = BoolTree::Node {
            var,
            high: Box::new(high),
            low: Box::new(low),
        };
    }
    tree
}

/// One point of the VC comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct VcRow {
    pub n: usize,
    pub series: String,
    pub value: f64,
}

/// Tabular plot data comparing exact tree VC-dimensions (`tree-rank-r`
/// series) against DNF upper bounds (`dnf-k-K` series) over a range of n.
/// Points with r > n are skipped; any log scaling is the plotter's concern.
pub fn emit_vc_curves(
    n_range: &[usize],
    tree_ranks: &[usize],
    dnf_ks: &[usize],
    log_base: f64,
) -> Result<Vec<VcRow>> {
    let mut rows = Vec::new();
    for &n in n_range {
        for &r in tree_ranks {
            if r > n {
                continue;
            }
            let exact = tree_vcdim(n, r)?;
            rows.push(VcRow {
                n,
                series: format!("tree-rank-{r}"),
                value: exact.to_f64().unwrap_or(f64::INFINITY),
            });
        }
        for &k in dnf_ks {
            rows.push(VcRow {
                n,
                series: format!("dnf-k-{k}"),
                value: dnf_vcdim_bound_with_base(n, k, log_base)?,
            });
        }
    }
    Ok(rows)
}

/// Smallest n in the table where `tree_series` strictly exceeds
/// `dnf_series`, if any.
pub fn first_crossover(rows: &[VcRow], tree_series: &str, dnf_series: &str) -> Option<usize> {
    let mut ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    for n in ns {
        let get = |series: &str| {
            rows.iter()
                .find(|r| r.n == n && r.series == series)
                .map(|r| r.value)
        };
        if let (Some(t), Some(d)) = (get(tree_series), get(dnf_series)) {
            if t > d {
                return Some(n);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn leaf(v: bool) -> BoolTree {
        BoolTree::Leaf(v)
    }

    fn node(var: usize, high: BoolTree, low: BoolTree) -> BoolTree {
        BoolTree::Node {
            var,
            high: Box::new(high),
            low: Box::new(low),
        }
    }

    fn complete_tree(depth: usize, var: usize) -> BoolTree {
        if depth == 0 {
            // alternate labels so no pruning-like degeneracy hides the rank
            leaf(var.is_multiple_of(2))
        } else {
            node(
                var,
                complete_tree(depth - 1, var + 1),
                complete_tree(depth - 1, var + 7),
            )
        }
    }

    fn all_inputs(n: usize) -> impl Iterator<Item = Vec<bool>> {
        (0u32..1 << n).map(move |bits| (0..n).map(|i| bits >> i & 1 == 1).collect())
    }

    #[test]
    fn rank_base_cases() {
        assert_eq!(rank(&leaf(true)), 0);
        assert_eq!(rank(&node(0, leaf(true), leaf(false))), 1);
        // unequal subtree ranks take the max
        let lop = node(0, node(1, leaf(true), leaf(false)), leaf(false));
        assert_eq!(rank(&lop), 1);
    }

    #[test]
    fn complete_tree_of_depth_r_has_rank_r() {
        for r in 0..=6 {
            assert_eq!(rank(&complete_tree(r, 0)), r);
        }
    }

    #[test]
    fn tree_vcdim_small_values() {
        assert_eq!(tree_vcdim(5, 1).unwrap(), BigUint::from(6u32));
        assert_eq!(tree_vcdim(100, 3).unwrap(), BigUint::from(166_751u32));
        for n in 1..=20usize {
            assert_eq!(tree_vcdim(n, n).unwrap(), BigUint::one() << n);
        }
        assert!(tree_vcdim(3, 4).is_err());
    }

    #[test]
    fn tree_vcdim_rank1_is_n_plus_1() {
        for n in [1usize, 2, 10, 1000, 123_456] {
            assert_eq!(tree_vcdim(n, 1).unwrap(), BigUint::from(n + 1));
        }
    }

    #[test]
    fn dnf_bound_hand_values() {
        // k = 1 → 2(n+1)·log₂3
        for n in [1usize, 7, 100] {
            let expected = 2.0 * (n + 1) as f64 * 3f64.log2();
            assert!((dnf_vcdim_bound(n, 1).unwrap() - expected).abs() < 1e-12);
        }
        // n=10, k=2 → 2·11·2·log₂6 ≈ 113.7
        let v = dnf_vcdim_bound(10, 2).unwrap();
        assert!((v - 44.0 * 6f64.log2()).abs() < 1e-12);
        assert!((v - 113.7).abs() < 0.1);
        assert!(dnf_vcdim_bound(0, 1).is_err());
        assert!(dnf_vcdim_bound(1, 0).is_err());
    }

    #[test]
    fn dnf_bound_monotone_in_n_and_k() {
        for n in 1..50usize {
            for k in 1..50usize {
                let v = dnf_vcdim_bound(n, k).unwrap();
                assert!(dnf_vcdim_bound(n + 1, k).unwrap() > v);
                assert!(dnf_vcdim_bound(n, k + 1).unwrap() > v);
            }
        }
    }

    #[test]
    fn tree_to_dnf_degenerate_cases() {
        let dnf = tree_to_dnf(&leaf(true));
        assert_eq!(dnf.conjunctions, vec![Vec::<Literal>::new()]);
        assert!(dnf.eval(&[]));
        let dnf = tree_to_dnf(&leaf(false));
        assert!(dnf.conjunctions.is_empty());
        assert!(!dnf.eval(&[]));
    }

    #[test]
    fn dnf_normalization_drops_contradictions() {
        let dnf = BoolDnf::new(vec![
            vec![(0, true), (0, false)],
            vec![(1, true), (1, true)],
        ]);
        assert_eq!(dnf.conjunctions, vec![vec![(1, true)]]);
    }

    fn random_tree(rng: &mut impl Rng, n: usize, depth: usize) -> BoolTree {
        if depth == 0 || rng.gen_bool(0.3) {
            leaf(rng.gen_bool(0.5))
        } else {
            node(
                rng.gen_range(0..n),
                random_tree(rng, n, depth - 1),
                random_tree(rng, n, depth - 1),
            )
        }
    }

    #[test]
    fn tree_and_dnf_agree_on_random_trees() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        for _ in 0..300 {
            let n = rng.gen_range(1..=4);
            let tree = random_tree(&mut rng, n, 4);
            let dnf = tree_to_dnf(&tree);
            for x in all_inputs(n) {
                assert_eq!(tree.eval(&x), dnf.eval(&x));
            }
        }
    }

    proptest! {
        #[test]
        fn prop_tree_dnf_equivalence(seed in 0u64..5000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..=4usize);
            let tree = random_tree(&mut rng, n, 4);
            let dnf = tree_to_dnf(&tree);
            for x in all_inputs(n) {
                prop_assert_eq!(tree.eval(&x), dnf.eval(&x));
            }
        }
    }

    #[test]
    fn chain_tree_matches_conjunction_and_has_rank_1() {
        // the 5-literal positive conjunction: a 5-node chain
        let conj: Vec<Literal> = (0..5).map(|v| (v, true)).collect();
        let tree = conjunction_to_rank1_tree(&conj);
        assert_eq!(tree.depth(), 5);
        assert_eq!(rank(&tree), 1);
        for x in all_inputs(5) {
            assert_eq!(tree.eval(&x), x.iter().all(|&b| b));
        }

        // single literal
        let tree = conjunction_to_rank1_tree(&[(3, false)]);
        assert_eq!(rank(&tree), 1);

        // empty conjunction is the constant-true leaf
        let tree = conjunction_to_rank1_tree(&[]);
        assert_eq!(tree, leaf(true));
        assert_eq!(rank(&tree), 0);
    }

    #[test]
    fn exhaustive_conjunctions_up_to_6_vars() {
        // every conjunction over n ≤ 6: each variable absent, positive, or
        // negative
        for n in 1..=6usize {
            let mut states = vec![0u8; n];
            'conjunctions: loop {
                let conj: Vec<Literal> = states
                    .iter()
                    .enumerate()
                    .filter(|&(_, &s)| s > 0)
                    .map(|(v, &s)| (v, s == 1))
                    .collect();
                let tree = conjunction_to_rank1_tree(&conj);
                let expected_rank = usize::from(!conj.is_empty());
                assert_eq!(rank(&tree), expected_rank);
                for x in all_inputs(n) {
                    let truth = conj.iter().all(|&(v, pol)| x[v] == pol);
                    assert_eq!(tree.eval(&x), truth);
                }
                // advance the ternary counter
                let mut i = 0;
                loop {
                    if i == n {
                        break 'conjunctions;
                    }
                    states[i] += 1;
                    if states[i] < 3 {
                        break;
                    }
                    states[i] = 0;
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn round_trip_single_conjunction_rank() {
        let tree = node(0, node(1, leaf(true), leaf(false)), leaf(false));
        let dnf = tree_to_dnf(&tree);
        assert_eq!(dnf.conjunctions.len(), 1);
        let rebuilt = conjunction_to_rank1_tree(&dnf.conjunctions[0]);
        assert_eq!(rank(&rebuilt), 1);
    }

    #[test]
    fn curve_emitter_rank1_series_is_n_plus_1() {
        let ns: Vec<usize> = (1..=40).collect();
        let rows = emit_vc_curves(&ns, &[1], &[2], 2.0).unwrap();
        for &n in &ns {
            let v = rows
                .iter()
                .find(|r| r.n == n && r.series == "tree-rank-1")
                .unwrap()
                .value;
            assert_eq!(v, (n + 1) as f64);
        }
    }

    #[test]
    fn curve_emitter_reports_crossover() {
        let ns: Vec<usize> = (1..=200).collect();
        let rows = emit_vc_curves(&ns, &[2], &[1], 2.0).unwrap();
        // rank-2 tree VC ~ n²/2 vs k=1 bound ~ 3.17(n+1): crossover where
        // 1 + n + n(n−1)/2 > 2(n+1)log₂3
        let n_star = first_crossover(&rows, "tree-rank-2", "dnf-k-1").unwrap();
        let check = |n: usize| {
            let tree = 1.0 + n as f64 + (n * (n - 1) / 2) as f64;
            tree > 2.0 * (n + 1) as f64 * 3f64.log2()
        };
        assert!(check(n_star));
        assert!(n_star == 1 || !check(n_star - 1));
    }

    #[test]
    fn curve_emitter_empty_ranges() {
        assert!(emit_vc_curves(&[], &[1, 2], &[4], 2.0).unwrap().is_empty());
        let rows = emit_vc_curves(&[5], &[], &[], 2.0).unwrap();
        assert!(rows.is_empty());
    }

    #[test]
    fn curve_emitter_skips_rank_above_n() {
        let rows = emit_vc_curves(&[2], &[5], &[], 2.0).unwrap();
        assert!(rows.is_empty());
    }
}
