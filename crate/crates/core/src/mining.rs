//! Neighbor ranking and pair mining over the labeled + unlabeled pool.
//!
//! Every point gets a full ascending ranking of all other points by
//! Mahalanobis distance (ties broken by ascending index). Four inventories
//! come out of the ranking:
//!
//! * close positive pairs: mutual K-nearest neighbors,
//! * loose positive pairs: exactly one direction of K-NN membership,
//! * labeled intra-class pairs: all same-label pairs within the labeled set,
//! * negative pairs: anchor plus any point ranked at or beyond a bound
//!   (`beta * K` at full scale), sampled rather than materialized.
//!
//! One-directional KNN pairs with all-pairs negatives are kept as an ablation
//! baseline.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{EmbeddingSet, Role};
use crate::metric::MahalanobisMetric;

/// Unordered index pair, stored with the smaller index first.
pub type Pair = (u32, u32);

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("neighbor table needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("pool dim {pool} does not match metric dim {metric}")]
    DimMismatch { pool: usize, metric: usize },
    #[error("K must satisfy 1 <= K < n_points ({n}), got {k}")]
    BadK { k: u32, n: usize },
    #[error(
        "negative complement is empty: rank bound {bound} >= n_points - 1 ({max}); \
         lower beta or K"
    )]
    EmptyNegativeComplement { bound: usize, max: usize },
    #[error("labeled pair mining requires role labeled_id, got {0}")]
    WrongRole(&'static str),
    #[error("pairs text line {line}: {msg}")]
    PairsParse { line: usize, msg: String },
}

/// Full Mahalanobis neighbor ranking over the pool, with its inverse lookup.
///
/// `ranked` holds, per point, all other indices sorted by ascending distance
/// (ties by ascending index); `rank_of[i][j]` is j's 0-based position in i's
/// ranking. Rows are computed independently, so parallel construction is
/// schedule-independent.
pub struct NeighborTable {
    n: usize,
    ranked: Vec<u32>,
    rank_of: Vec<u32>,
}

impl NeighborTable {
    pub fn n_points(&self) -> usize {
        self.n
    }

    /// All other indices sorted by ascending distance to `i`.
    pub fn ranked_row(&self, i: usize) -> &[u32] {
        &self.ranked[i * (self.n - 1)..(i + 1) * (self.n - 1)]
    }

    /// 0-based position of `j` in `i`'s ranking. `i != j` required.
    pub fn rank_of(&self, i: usize, j: usize) -> u32 {
        debug_assert_ne!(i, j);
        self.rank_of[i * self.n + j]
    }
}

/// Ranks the whole pool under the metric. The pool is the concatenation of
/// labeled rows followed by unlabeled rows; distances are evaluated on
/// whitened coordinates (one triangular solve per point), which keeps the
/// full pass at O(N^2 d) flops and O(N) extra memory beyond the table.
pub fn build_neighbor_table(
    pool: &EmbeddingSet,
    metric: &MahalanobisMetric,
) -> Result<NeighborTable, MiningError> {
    let n = pool.n_rows();
    if n < 2 {
        return Err(MiningError::TooFewPoints(n));
    }
    if pool.dim() != metric.dim() {
        return Err(MiningError::DimMismatch { pool: pool.dim(), metric: metric.dim() });
    }
    let dim = pool.dim();
    let mut whitened = Vec::with_capacity(n * dim);
    for row in pool.rows() {
        let start = whitened.len();
        whitened.extend_from_slice(row);
        metric.whiten_in_place(&mut whitened[start..start + dim]);
    }

    let mut ranked = vec![0u32; n * (n - 1)];
    let mut rank_of = vec![u32::MAX; n * n];
    ranked
        .par_chunks_mut(n - 1)
        .zip(rank_of.par_chunks_mut(n))
        .enumerate()
        .for_each_init(
            || Vec::with_capacity(n - 1),
            |scratch: &mut Vec<(f64, u32)>, (i, (ranked_row, rank_row))| {
                let wi = &whitened[i * dim..(i + 1) * dim];
                scratch.clear();
                for j in 0..n {
                    if j == i {
                        continue;
                    }
                    let wj = &whitened[j * dim..(j + 1) * dim];
                    let mut d2 = 0.0;
                    for (a, b) in wi.iter().zip(wj) {
                        let t = a - b;
                        d2 += t * t;
                    }
                    scratch.push((d2, j as u32));
                }
                scratch.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for (rank, &(_, j)) in scratch.iter().enumerate() {
                    ranked_row[rank] = j;
                    rank_row[j as usize] = rank as u32;
                }
            },
        );
    Ok(NeighborTable { n, ranked, rank_of })
}

fn check_k(table: &NeighborTable, k: u32) -> Result<(), MiningError> {
    if k == 0 || k as usize >= table.n {
        return Err(MiningError::BadK { k, n: table.n });
    }
    Ok(())
}

/// Pairs where each point is within the other's K nearest neighbors.
pub fn mine_close_pairs(table: &NeighborTable, k: u32) -> Result<Vec<Pair>, MiningError> {
    check_k(table, k)?;
    let mut pairs = Vec::new();
    for i in 0..table.n {
        for j in (i + 1)..table.n {
            if table.rank_of(i, j) < k && table.rank_of(j, i) < k {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    Ok(pairs)
}

/// Pairs where exactly one direction of K-NN membership holds.
pub fn mine_loose_pairs(table: &NeighborTable, k: u32) -> Result<Vec<Pair>, MiningError> {
    check_k(table, k)?;
    let mut pairs = Vec::new();
    for i in 0..table.n {
        for j in (i + 1)..table.n {
            if (table.rank_of(i, j) < k) != (table.rank_of(j, i) < k) {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    Ok(pairs)
}

/// True iff `j` lies outside the `beta * K` nearest neighbors of anchor `i`.
/// Directional. When the bound reaches `n_points - 1` the complement is
/// empty and every query answers false.
pub fn is_negative(table: &NeighborTable, i: usize, j: usize, k: u32, beta: u32) -> bool {
    let bound = beta as u64 * k as u64;
    table.rank_of(i, j) as u64 >= bound
}

/// Draws `count` ordered negative pairs: anchor uniform over the pool, far
/// point uniform over ranking positions `[bound, n-1)`. Deterministic given
/// the seed.
pub fn sample_negative_pairs(
    table: &NeighborTable,
    k: u32,
    beta: u32,
    count: usize,
    seed: u64,
) -> Result<Vec<(u32, u32)>, MiningError> {
    let bound = (beta as u64 * k as u64).min(usize::MAX as u64) as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    sample_negatives_with_rng(table, bound, count, &mut rng)
}

/// Sampler shared by [`sample_negative_pairs`] and the training loop, keyed
/// on an explicit rank bound (bound 0 degenerates to all-pairs sampling).
pub fn sample_negatives_with_rng(
    table: &NeighborTable,
    bound: usize,
    count: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(u32, u32)>, MiningError> {
    if bound >= table.n - 1 {
        return Err(MiningError::EmptyNegativeComplement { bound, max: table.n - 1 });
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.random_range(0..table.n);
        let pos = rng.random_range(bound..table.n - 1);
        pairs.push((i as u32, table.ranked_row(i)[pos]));
    }
    Ok(pairs)
}

/// All unordered same-label pairs within the labeled set.
pub fn mine_labeled_pairs(labeled: &EmbeddingSet) -> Result<Vec<Pair>, MiningError> {
    if labeled.role() != Role::LabeledId {
        return Err(MiningError::WrongRole(labeled.role().as_str()));
    }
    let labels = labeled.labels().expect("labeled_id sets carry labels");
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            if labels[i] == labels[j] {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    Ok(pairs)
}

/// The ablation baseline's negative relation: every ordered pair of distinct
/// in-range indices.
pub struct StepNegatives {
    n: usize,
}

impl StepNegatives {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        i != j && i < self.n && j < self.n
    }
}

/// Baseline mining: one-directional KNN pairs as positives (every pair with
/// at least one directed edge, viewed unordered) and all distinct pairs as
/// negatives. Exposed for the ablation harness.
pub fn mine_step_baseline(
    table: &NeighborTable,
    k: u32,
) -> Result<(Vec<Pair>, StepNegatives), MiningError> {
    check_k(table, k)?;
    let mut pairs = Vec::new();
    for i in 0..table.n {
        for j in (i + 1)..table.n {
            if table.rank_of(i, j) < k || table.rank_of(j, i) < k {
                pairs.push((i as u32, j as u32));
            }
        }
    }
    Ok((pairs, StepNegatives { n: table.n }))
}

/// The four mined inventories plus the negative-sampling configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInventory {
    pub close: Vec<Pair>,
    pub loose: Vec<Pair>,
    pub labeled_intra: Vec<Pair>,
    /// Rank bound for negatives; `beta * k` at full scale, possibly rescaled
    /// for small pools.
    pub negative_rank_bound: usize,
    pub k: u32,
    pub beta: u32,
}

impl PairInventory {
    /// Mines all inventories from a ranked pool. `bound` is the negative
    /// rank bound actually used (callers rescale it for small pools).
    pub fn mine(
        table: &NeighborTable,
        labeled: &EmbeddingSet,
        k: u32,
        beta: u32,
        bound: usize,
    ) -> Result<Self, MiningError> {
        Ok(Self {
            close: mine_close_pairs(table, k)?,
            loose: mine_loose_pairs(table, k)?,
            labeled_intra: mine_labeled_pairs(labeled)?,
            negative_rank_bound: bound,
            k,
            beta,
        })
    }

    pub fn n_positive(&self) -> usize {
        self.close.len() + self.loose.len()
    }

    /// Text export: a `K beta bound` header line, then one `i j tag` line per
    /// mined pair.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {} {}", self.k, self.beta, self.negative_rank_bound);
        for &(i, j) in &self.close {
            let _ = writeln!(out, "{i} {j} close");
        }
        for &(i, j) in &self.loose {
            let _ = writeln!(out, "{i} {j} loose");
        }
        for &(i, j) in &self.labeled_intra {
            let _ = writeln!(out, "{i} {j} labeled");
        }
        out
    }

    /// Parses the [`Self::to_text`] format.
    pub fn from_text(text: &str) -> Result<Self, MiningError> {
        let parse_err =
            |line: usize, msg: String| MiningError::PairsParse { line, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (idx, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty pairs file".into()))?;
        let mut fields = header.split_whitespace();
        let mut next_num = |name: &str| -> Result<u64, MiningError> {
            fields
                .next()
                .ok_or_else(|| parse_err(idx + 1, format!("missing {name} in header")))?
                .parse::<u64>()
                .map_err(|_| parse_err(idx + 1, format!("cannot parse {name}")))
        };
        let k = next_num("K")? as u32;
        let beta = next_num("beta")? as u32;
        let bound = next_num("bound")? as usize;
        let mut inv = PairInventory {
            close: Vec::new(),
            loose: Vec::new(),
            labeled_intra: Vec::new(),
            negative_rank_bound: bound,
            k,
            beta,
        };
        for (idx, line) in lines {
            let mut fields = line.split_whitespace();
            let mut index = |name: &str| -> Result<u32, MiningError> {
                fields
                    .next()
                    .ok_or_else(|| parse_err(idx + 1, format!("missing {name}")))?
                    .parse::<u32>()
                    .map_err(|_| parse_err(idx + 1, format!("cannot parse {name}")))
            };
            let i = index("i")?;
            let j = index("j")?;
            if i == j {
                return Err(parse_err(idx + 1, "self-pair".into()));
            }
            let tag = fields
                .next()
                .ok_or_else(|| parse_err(idx + 1, "missing tag".into()))?;
            if fields.next().is_some() {
                return Err(parse_err(idx + 1, "trailing fields".into()));
            }
            let pair = (i.min(j), i.max(j));
            match tag {
                "close" => inv.close.push(pair),
                "loose" => inv.loose.push(pair),
                "labeled" => inv.labeled_intra.push(pair),
                other => return Err(parse_err(idx + 1, format!("unknown tag {other:?}"))),
            }
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use crate::metric::MahalanobisMetric;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pool_1d(values: &[f64]) -> EmbeddingSet {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        EmbeddingSet::from_rows(Role::UnlabeledMix, &rows, None).unwrap()
    }

    fn identity_metric(dim: usize) -> MahalanobisMetric {
        MahalanobisMetric::from_covariance(DMatrix::identity(dim, dim), 0.0).unwrap()
    }

    fn table_1d(values: &[f64]) -> NeighborTable {
        build_neighbor_table(&pool_1d(values), &identity_metric(1)).unwrap()
    }

    #[test]
    fn hand_ranking_on_three_points() {
        let table = table_1d(&[0.0, 1.0, 10.0]);
        assert_eq!(table.ranked_row(0), &[1, 2]);
        assert_eq!(table.ranked_row(1), &[0, 2]);
        assert_eq!(table.ranked_row(2), &[1, 0]);
        assert_eq!(table.rank_of(2, 1), 0);
        assert_eq!(table.rank_of(2, 0), 1);
    }

    #[test]
    fn coincident_points_tie_break_by_index() {
        let table = table_1d(&[5.0, 5.0, 9.0]);
        // Point 2 is equidistant from 0 and 1; ascending index wins.
        assert_eq!(table.ranked_row(2), &[0, 1]);
    }

    #[test]
    fn close_pairs_on_two_clusters() {
        let table = table_1d(&[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(mine_close_pairs(&table, 1).unwrap(), vec![(0, 1), (2, 3)]);
    }

    #[test]
    fn close_and_loose_on_asymmetric_line() {
        // B_1(2) = {1} but B_1(1) = {0}: (0,1) is mutual, (1,2) one-sided.
        let table = table_1d(&[0.0, 1.0, 3.0]);
        assert_eq!(mine_close_pairs(&table, 1).unwrap(), vec![(0, 1)]);
        assert_eq!(mine_loose_pairs(&table, 1).unwrap(), vec![(1, 2)]);
    }

    #[test]
    fn maximal_k_makes_everything_close() {
        let table = table_1d(&[0.0, 1.0, 3.0, 7.0]);
        let k = 3;
        let close = mine_close_pairs(&table, k).unwrap();
        assert_eq!(close.len(), 6);
        assert!(mine_loose_pairs(&table, k).unwrap().is_empty());
    }

    #[test]
    fn negative_membership_hand_case() {
        // B_2(0) = {1, 2}; only the point at 10 is negative for anchor 0.
        let table = table_1d(&[0.0, 1.0, 3.0, 10.0]);
        assert!(is_negative(&table, 0, 3, 1, 2));
        assert!(!is_negative(&table, 0, 1, 1, 2));
        assert!(!is_negative(&table, 0, 2, 1, 2));
    }

    #[test]
    fn oversized_bound_means_nothing_is_negative() {
        let table = table_1d(&[0.0, 1.0, 3.0]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(!is_negative(&table, i, j, 2, 1));
                }
            }
        }
        assert!(matches!(
            sample_negative_pairs(&table, 2, 1, 5, 0),
            Err(MiningError::EmptyNegativeComplement { .. })
        ));
    }

    #[test]
    fn sampled_negatives_all_satisfy_the_predicate() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let values: Vec<f64> = (0..40).map(|_| rng.random_range(-10.0..10.0)).collect();
        let table = table_1d(&values);
        let pairs = sample_negative_pairs(&table, 3, 2, 500, 99).unwrap();
        assert_eq!(pairs.len(), 500);
        for (i, j) in pairs {
            assert!(is_negative(&table, i as usize, j as usize, 3, 2));
        }
        let again = sample_negative_pairs(&table, 3, 2, 500, 99).unwrap();
        assert_eq!(again, sample_negative_pairs(&table, 3, 2, 500, 99).unwrap());
        let _ = again;
    }

    #[test]
    fn sampled_anchor_distribution_is_uniform() {
        let values: Vec<f64> = (0..25).map(|i| i as f64).collect();
        let table = table_1d(&values);
        let count = 250_000;
        let pairs = sample_negative_pairs(&table, 2, 3, count, 7).unwrap();
        let mut anchor_counts = vec![0usize; 25];
        for (i, _) in pairs {
            anchor_counts[i as usize] += 1;
        }
        let expected = count as f64 / 25.0;
        for c in anchor_counts {
            let rel = (c as f64 - expected).abs() / expected;
            assert!(rel < 0.05, "anchor frequency off by {rel} relative");
        }
    }

    #[test]
    fn labeled_pairs_enumeration() {
        let set = EmbeddingSet::from_rows(
            Role::LabeledId,
            &[vec![0.0], vec![1.0], vec![2.0]],
            Some(vec![0, 0, 1]),
        )
        .unwrap();
        assert_eq!(mine_labeled_pairs(&set).unwrap(), vec![(0, 1)]);

        let distinct = EmbeddingSet::from_rows(
            Role::LabeledId,
            &[vec![0.0], vec![1.0], vec![2.0]],
            Some(vec![0, 1, 2]),
        )
        .unwrap();
        assert!(mine_labeled_pairs(&distinct).unwrap().is_empty());
    }

    #[test]
    fn labeled_pair_counting_identity() {
        let k = 4;
        let per = 25;
        let rows: Vec<Vec<f64>> = (0..k * per).map(|i| vec![i as f64]).collect();
        let labels: Vec<u32> = (0..k * per).map(|i| (i / per) as u32).collect();
        let set = EmbeddingSet::from_rows(Role::LabeledId, &rows, Some(labels)).unwrap();
        assert_eq!(mine_labeled_pairs(&set).unwrap().len(), k * (per * (per - 1) / 2));
    }

    #[test]
    fn step_baseline_union_and_total_negatives() {
        let table = table_1d(&[0.0, 1.0, 3.0]);
        let (positives, negatives) = mine_step_baseline(&table, 1).unwrap();
        assert_eq!(positives, vec![(0, 1), (1, 2)]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(negatives.contains(i, j), i != j);
            }
        }
        // Partition law: close and loose tile the baseline positives.
        let mut union = mine_close_pairs(&table, 1).unwrap();
        union.extend(mine_loose_pairs(&table, 1).unwrap());
        union.sort_unstable();
        assert_eq!(union, positives);
    }

    #[test]
    fn brute_force_oracle_on_random_pool() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let n = 200;
        let dim = 3;
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..dim).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
        let pool = EmbeddingSet::from_rows(Role::UnlabeledMix, &rows, None).unwrap();
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        let metric =
            MahalanobisMetric::from_covariance(&a * a.transpose(), 0.05).unwrap();
        let table = build_neighbor_table(&pool, &metric).unwrap();
        for i in 0..n {
            let mut dists: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (metric.mahalanobis(pool.row(i), pool.row(j)).unwrap(), j as u32))
                .collect();
            dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expected: Vec<u32> = dists.into_iter().map(|(_, j)| j).collect();
            assert_eq!(table.ranked_row(i), expected.as_slice(), "row {i} mismatch");
        }
    }

    #[test]
    fn pairs_text_roundtrip_and_errors() {
        let inv = PairInventory {
            close: vec![(0, 1), (4, 9)],
            loose: vec![(2, 3)],
            labeled_intra: vec![(0, 2)],
            negative_rank_bound: 48,
            k: 12,
            beta: 4,
        };
        let text = inv.to_text();
        assert!(text.starts_with("12 4 48\n"));
        assert_eq!(PairInventory::from_text(&text).unwrap(), inv);
        assert!(matches!(
            PairInventory::from_text("12 4 48\n1 1 close\n"),
            Err(MiningError::PairsParse { line: 2, .. })
        ));
        assert!(matches!(
            PairInventory::from_text("12 4 48\n1 2 weird\n"),
            Err(MiningError::PairsParse { line: 2, .. })
        ));
        assert!(PairInventory::from_text("").is_err());
    }
}
