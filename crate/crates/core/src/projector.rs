//! Linear projector trained on four hinge losses over mined pairs.
//!
//! Positive-type terms (labeled intra-class, close, loose) hinge on the
//! projected Euclidean distance against a Mahalanobis target computed in the
//! original space: `max(0, ||P a - P b|| - lambda * MD(a, b))`. Negative
//! pairs hinge on a margin: `max(0, M - ||P a - P b||)`. The overall loss is
//! the plain sum of the four terms and is minimized with seeded SGD.
//!
//! Subgradient convention: a hinge that is inactive or exactly at its kink
//! contributes nothing, and so does a pair whose projected difference is
//! exactly zero.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::Path;
use thiserror::Error;

use crate::data::{self, DataError, EmbeddingSet};
use crate::metric::MahalanobisMetric;
use crate::mining::{sample_negatives_with_rng, MiningError, NeighborTable, Pair, PairInventory};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("constraint violated: lambda1 < lambda2 (lambda1={l1}, lambda2={l2})")]
    Lambda12 { l1: f64, l2: f64 },
    #[error("constraint violated: lambda2 < lambda3 (lambda2={l2}, lambda3={l3})")]
    Lambda23 { l2: f64, l3: f64 },
    #[error("{name} must be positive and finite (got {value})")]
    NonPositive { name: &'static str, value: f64 },
    #[error("identity init needs d_out <= d_in (got {d_out} > {d_in})")]
    IdentityDims { d_in: usize, d_out: usize },
    #[error("projector dims must be positive")]
    ZeroDims,
    #[error("no positive structure mined, increase K")]
    NoPositiveStructure,
    #[error("pool dim {pool} does not match metric dim {metric}")]
    DimMismatch { pool: usize, metric: usize },
    #[error("pair index {index} out of range for {what} ({len} rows)")]
    PairIndex { index: u32, what: &'static str, len: usize },
    #[error(
        "config K/beta {config:?} do not match the mined inventory's {inventory:?}; \
         pairs must be mined with the training parameters"
    )]
    InventoryMismatch { config: (u32, u32), inventory: (u32, u32) },
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// How the projector starts before SGD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Truncated identity `[I | 0]`; requires `d_out <= d_in`.
    Identity,
    /// Entries i.i.d. uniform in `+-sqrt(6 / (d_in + d_out))`.
    ScaledRandom,
}

impl std::str::FromStr for InitScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "identity" => Ok(InitScheme::Identity),
            "scaled_random" => Ok(InitScheme::ScaledRandom),
            other => Err(format!("unknown init scheme {other:?} (identity | scaled_random)")),
        }
    }
}

/// The trained linear map from input feature space to the new space.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    weights: DMatrix<f64>,
}

impl Projector {
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self, TrainError> {
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(TrainError::ZeroDims);
        }
        Ok(Self { weights })
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn apply(&self, x: &[f64]) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.d_in());
        let mut out = DVector::zeros(self.d_out());
        let view = DVector::from_column_slice(x);
        out.gemv(1.0, &self.weights, &view, 0.0);
        out
    }

    /// Saves the weights as `d_out` rows of length `d_in` in the embedding
    /// binary format (payload narrows to `f32`).
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let flat: Vec<f64> = (0..self.d_out())
            .flat_map(|r| (0..self.d_in()).map(move |c| self.weights[(r, c)]))
            .collect();
        data::save_matrix(path, self.d_in(), self.d_out(), &flat)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let (d_in, d_out, flat) = data::load_matrix(path)?;
        Ok(Self { weights: DMatrix::from_row_slice(d_out, d_in, &flat) })
    }
}

/// Builds the initial projector. Deterministic given the seed.
pub fn init_projector(
    d_in: usize,
    d_out: usize,
    scheme: InitScheme,
    seed: u64,
) -> Result<Projector, TrainError> {
    if d_in == 0 || d_out == 0 {
        return Err(TrainError::ZeroDims);
    }
    let weights = match scheme {
        InitScheme::Identity => {
            if d_out > d_in {
                return Err(TrainError::IdentityDims { d_in, d_out });
            }
            DMatrix::from_fn(d_out, d_in, |r, c| if r == c { 1.0 } else { 0.0 })
        }
        InitScheme::ScaledRandom => {
            let bound = (6.0 / (d_in + d_out) as f64).sqrt();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut weights = DMatrix::zeros(d_out, d_in);
            for r in 0..d_out {
                for c in 0..d_in {
                    weights[(r, c)] = rng.random_range(-bound..bound);
                }
            }
            weights
        }
    };
    Ok(Projector { weights })
}

/// Per-step pair quotas for the four loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quotas {
    pub q_a: usize,
    pub q_c: usize,
    pub q_l: usize,
    pub q_f: usize,
}

impl Quotas {
    /// Splits a batch size evenly over the four terms.
    pub fn from_batch_size(batch: usize) -> Self {
        let q = (batch / 4).max(1);
        Quotas { q_a: q, q_c: q, q_l: q, q_f: q }
    }

    pub fn batch_size(&self) -> usize {
        self.q_a + self.q_c + self.q_l + self.q_f
    }
}

/// Training hyperparameters. Defaults carry the full-scale values
/// (K=12, M=3, lambda 0.1/0.5/6, beta=4000, lr 3e-4, 1500 epochs, batch 128).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub margin: f64,
    pub k: u32,
    pub beta: u32,
    pub learning_rate: f64,
    pub epochs: u32,
    pub quotas: Quotas,
    pub seed: u64,
    pub enable_ppm: bool,
    pub enable_npm: bool,
    pub enable_tsm: bool,
    pub init: InitScheme,
    /// Output dimension; `None` keeps the input dimension.
    pub d_out: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 0.1,
            lambda2: 0.5,
            lambda3: 6.0,
            margin: 3.0,
            k: 12,
            beta: 4000,
            learning_rate: 3e-4,
            epochs: 1500,
            quotas: Quotas::from_batch_size(128),
            seed: 0,
            enable_ppm: true,
            enable_npm: true,
            enable_tsm: true,
            init: InitScheme::Identity,
            d_out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |name: &'static str, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(TrainError::NonPositive { name, value })
            }
        };
        positive("lambda1", self.lambda1)?;
        positive("lambda2", self.lambda2)?;
        positive("lambda3", self.lambda3)?;
        positive("margin", self.margin)?;
        positive("learning_rate", self.learning_rate)?;
        if self.lambda1 >= self.lambda2 {
            return Err(TrainError::Lambda12 { l1: self.lambda1, l2: self.lambda2 });
        }
        if self.lambda2 >= self.lambda3 {
            return Err(TrainError::Lambda23 { l2: self.lambda2, l3: self.lambda3 });
        }
        if self.k == 0 {
            return Err(TrainError::NonPositive { name: "k", value: 0.0 });
        }
        Ok(())
    }
}

/// Loss values for one step or one epoch mean. `total` is always the sum of
/// the four parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_c: f64,
    pub l_l: f64,
    pub l_f: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(l_a: f64, l_c: f64, l_l: f64, l_f: f64) -> Self {
        LossBreakdown { l_a, l_c, l_l, l_f, total: l_a + l_c + l_l + l_f }
    }
}

/// Sampled pairs for all four terms of one gradient evaluation.
#[derive(Debug, Clone, Default)]
pub struct StepBatch {
    pub labeled: Vec<Pair>,
    pub close: Vec<Pair>,
    pub loose: Vec<Pair>,
    pub negative: Vec<Pair>,
}

struct Workspace {
    v: DVector<f64>,
    u: DVector<f64>,
}

impl Workspace {
    fn new(d_in: usize, d_out: usize) -> Self {
        Workspace { v: DVector::zeros(d_in), u: DVector::zeros(d_out) }
    }
}

/// One positive-type hinge: `max(0, ||P(a-b)|| - lambda * md)`. When active,
/// adds `(u/||u||) (a-b)^T` to the gradient.
fn positive_term(
    p: &Projector,
    a: &[f64],
    b: &[f64],
    md: f64,
    lambda: f64,
    grad: Option<&mut DMatrix<f64>>,
    ws: &mut Workspace,
) -> f64 {
    for ((d, x), y) in ws.v.iter_mut().zip(a).zip(b) {
        *d = x - y;
    }
    ws.u.gemv(1.0, p.weights(), &ws.v, 0.0);
    let unorm = ws.u.norm();
    let term = unorm - lambda * md;
    if term > 0.0 {
        if let Some(g) = grad {
            if unorm > 0.0 {
                g.ger(1.0 / unorm, &ws.u, &ws.v, 1.0);
            }
        }
        term
    } else {
        0.0
    }
}

/// One negative hinge: `max(0, margin - ||P(a-b)||)`. When active, adds
/// `-(u/||u||) (a-b)^T` to the gradient.
fn negative_term(
    p: &Projector,
    a: &[f64],
    b: &[f64],
    margin: f64,
    grad: Option<&mut DMatrix<f64>>,
    ws: &mut Workspace,
) -> f64 {
    for ((d, x), y) in ws.v.iter_mut().zip(a).zip(b) {
        *d = x - y;
    }
    ws.u.gemv(1.0, p.weights(), &ws.v, 0.0);
    let unorm = ws.u.norm();
    let term = margin - unorm;
    if term > 0.0 {
        if let Some(g) = grad {
            if unorm > 0.0 {
                g.ger(-1.0 / unorm, &ws.u, &ws.v, 1.0);
            }
        }
        term
    } else {
        0.0
    }
}

fn md_of(metric: &MahalanobisMetric, pool: &EmbeddingSet, pair: Pair) -> f64 {
    metric
        .mahalanobis(pool.row(pair.0 as usize), pool.row(pair.1 as usize))
        .expect("pair dims validated upstream")
}

/// Sum of skeleton-maintenance hinges over labeled intra-class pairs.
pub fn loss_skeleton(
    p: &Projector,
    pool: &EmbeddingSet,
    pairs: &[Pair],
    metric: &MahalanobisMetric,
    lambda1: f64,
) -> f64 {
    let mut ws = Workspace::new(p.d_in(), p.d_out());
    pairs
        .iter()
        .map(|&pair| {
            let md = md_of(metric, pool, pair);
            positive_term(p, pool.row(pair.0 as usize), pool.row(pair.1 as usize), md, lambda1, None, &mut ws)
        })
        .sum()
}

/// Sum of hinges over close positive pairs.
pub fn loss_close(
    p: &Projector,
    pool: &EmbeddingSet,
    pairs: &[Pair],
    metric: &MahalanobisMetric,
    lambda2: f64,
) -> f64 {
    loss_skeleton(p, pool, pairs, metric, lambda2)
}

/// Sum of hinges over loose positive pairs.
pub fn loss_loose(
    p: &Projector,
    pool: &EmbeddingSet,
    pairs: &[Pair],
    metric: &MahalanobisMetric,
    lambda3: f64,
) -> f64 {
    loss_skeleton(p, pool, pairs, metric, lambda3)
}

/// Sum of margin hinges over negative pairs. No Mahalanobis term.
pub fn loss_negative(p: &Projector, pool: &EmbeddingSet, pairs: &[Pair], margin: f64) -> f64 {
    let mut ws = Workspace::new(p.d_in(), p.d_out());
    pairs
        .iter()
        .map(|&(i, j)| {
            negative_term(p, pool.row(i as usize), pool.row(j as usize), margin, None, &mut ws)
        })
        .sum()
}

/// Analytic gradient of the overall loss over one batch of all four terms.
pub fn gradient(
    p: &Projector,
    pool: &EmbeddingSet,
    metric: &MahalanobisMetric,
    batch: &StepBatch,
    config: &TrainConfig,
) -> DMatrix<f64> {
    let mut grad = DMatrix::zeros(p.d_out(), p.d_in());
    let mut ws = Workspace::new(p.d_in(), p.d_out());
    for (pairs, lambda) in [
        (&batch.labeled, config.lambda1),
        (&batch.close, config.lambda2),
        (&batch.loose, config.lambda3),
    ] {
        for &pair in pairs {
            let md = md_of(metric, pool, pair);
            positive_term(
                p,
                pool.row(pair.0 as usize),
                pool.row(pair.1 as usize),
                md,
                lambda,
                Some(&mut grad),
                &mut ws,
            );
        }
    }
    for &(i, j) in &batch.negative {
        negative_term(
            p,
            pool.row(i as usize),
            pool.row(j as usize),
            config.margin,
            Some(&mut grad),
            &mut ws,
        );
    }
    grad
}

fn sample_with_md(
    pairs: &[(Pair, f64)],
    quota: usize,
    rng: &mut ChaCha12Rng,
    out: &mut Vec<(Pair, f64)>,
) {
    out.clear();
    if pairs.is_empty() {
        return;
    }
    for _ in 0..quota {
        out.push(pairs[rng.random_range(0..pairs.len())]);
    }
}

// Seed tags for the per-term sampling streams. Separate streams keep the
// other terms' sampled pairs unchanged when one term is ablated.
const SEED_TAG_LABELED: u64 = 0x746f706f_615f7461;
const SEED_TAG_CLOSE: u64 = 0x746f706f_635f7461;
const SEED_TAG_LOOSE: u64 = 0x746f706f_6c5f7461;
const SEED_TAG_NEGATIVE: u64 = 0x746f706f_665f7461;

/// Trains the projector with plain SGD over per-step sampled batches.
///
/// Per step: `q_a` labeled pairs, `q_c` close, `q_l` loose (uniform with
/// replacement from the inventories) and `q_f` fresh negatives. One epoch is
/// `ceil(n_positive / (q_c + q_l))` steps. Disabled ablation flags zero their
/// term: no TSM drops the labeled term, no PPM collapses close/loose into a
/// single-coefficient batch over their union (coefficient `lambda2`), no NPM
/// samples negatives from all pairs instead of the rank complement. Fully
/// deterministic given the config.
pub fn train(
    pool: &EmbeddingSet,
    labeled: &EmbeddingSet,
    table: &NeighborTable,
    inventory: &PairInventory,
    metric: &MahalanobisMetric,
    config: &TrainConfig,
) -> Result<(Projector, Vec<LossBreakdown>), TrainError> {
    config.validate()?;
    if pool.dim() != metric.dim() {
        return Err(TrainError::DimMismatch { pool: pool.dim(), metric: metric.dim() });
    }
    if labeled.dim() != pool.dim() {
        return Err(TrainError::DimMismatch { pool: pool.dim(), metric: labeled.dim() });
    }
    if config.k != inventory.k || config.beta != inventory.beta {
        return Err(TrainError::InventoryMismatch {
            config: (config.k, config.beta),
            inventory: (inventory.k, inventory.beta),
        });
    }
    let n_pool = pool.n_rows();
    let n_labeled = labeled.n_rows();
    for (pairs, what, len) in [
        (&inventory.close, "pool", n_pool),
        (&inventory.loose, "pool", n_pool),
        (&inventory.labeled_intra, "labeled set", n_labeled),
    ] {
        for &(i, j) in pairs.iter() {
            let max = i.max(j);
            if max as usize >= len {
                return Err(TrainError::PairIndex { index: max, what, len });
            }
        }
    }
    if inventory.close.is_empty() && inventory.loose.is_empty() {
        return Err(TrainError::NoPositiveStructure);
    }

    let d_in = pool.dim();
    let d_out = config.d_out.unwrap_or(d_in);
    let mut projector = init_projector(d_in, d_out, config.init, config.seed)?;

    let with_md = |pairs: &[Pair]| -> Vec<(Pair, f64)> {
        pairs.iter().map(|&pair| (pair, md_of(metric, pool, pair))).collect()
    };
    let labeled_md = with_md(&inventory.labeled_intra);
    let close_md = with_md(&inventory.close);
    let loose_md = with_md(&inventory.loose);
    let collapsed_md: Vec<(Pair, f64)> = if config.enable_ppm {
        Vec::new()
    } else {
        close_md.iter().chain(&loose_md).cloned().collect()
    };

    let q = config.quotas;
    let steps_per_epoch = inventory.n_positive().div_ceil((q.q_c + q.q_l).max(1)).max(1);
    let negative_bound = if config.enable_npm { inventory.negative_rank_bound } else { 0 };
    if q.q_f > 0 && negative_bound >= n_pool.saturating_sub(1) {
        return Err(MiningError::EmptyNegativeComplement {
            bound: negative_bound,
            max: n_pool.saturating_sub(1),
        }
        .into());
    }

    let mut rng_a = ChaCha12Rng::seed_from_u64(config.seed ^ SEED_TAG_LABELED);
    let mut rng_c = ChaCha12Rng::seed_from_u64(config.seed ^ SEED_TAG_CLOSE);
    let mut rng_l = ChaCha12Rng::seed_from_u64(config.seed ^ SEED_TAG_LOOSE);
    let mut rng_f = ChaCha12Rng::seed_from_u64(config.seed ^ SEED_TAG_NEGATIVE);

    let mut ws = Workspace::new(d_in, d_out);
    let mut grad = DMatrix::zeros(d_out, d_in);
    let mut batch_a: Vec<(Pair, f64)> = Vec::with_capacity(q.q_a);
    let mut batch_c: Vec<(Pair, f64)> = Vec::with_capacity(q.q_c + q.q_l);
    let mut batch_l: Vec<(Pair, f64)> = Vec::with_capacity(q.q_l);
    let mut history = Vec::with_capacity(config.epochs as usize);

    for _epoch in 0..config.epochs {
        let mut sums = [0.0f64; 4];
        for _step in 0..steps_per_epoch {
            if config.enable_tsm {
                sample_with_md(&labeled_md, q.q_a, &mut rng_a, &mut batch_a);
            } else {
                batch_a.clear();
            }
            if config.enable_ppm {
                sample_with_md(&close_md, q.q_c, &mut rng_c, &mut batch_c);
                sample_with_md(&loose_md, q.q_l, &mut rng_l, &mut batch_l);
            } else {
                sample_with_md(&collapsed_md, q.q_c + q.q_l, &mut rng_c, &mut batch_c);
                batch_l.clear();
            }
            let negatives = if q.q_f > 0 {
                sample_negatives_with_rng(table, negative_bound, q.q_f, &mut rng_f)?
            } else {
                Vec::new()
            };

            grad.fill(0.0);
            let mut eval_positive = |batch: &[(Pair, f64)], lambda: f64, grad: &mut DMatrix<f64>| {
                let mut sum = 0.0;
                for &((i, j), md) in batch {
                    sum += positive_term(
                        &projector,
                        pool.row(i as usize),
                        pool.row(j as usize),
                        md,
                        lambda,
                        Some(grad),
                        &mut ws,
                    );
                }
                sum
            };
            let l_a = eval_positive(&batch_a, config.lambda1, &mut grad);
            let l_c = eval_positive(&batch_c, config.lambda2, &mut grad);
            let l_l = eval_positive(&batch_l, config.lambda3, &mut grad);
            let mut l_f = 0.0;
            for &(i, j) in &negatives {
                l_f += negative_term(
                    &projector,
                    pool.row(i as usize),
                    pool.row(j as usize),
                    config.margin,
                    Some(&mut grad),
                    &mut ws,
                );
            }

            for (w, g) in projector.weights.iter_mut().zip(grad.iter()) {
                *w -= config.learning_rate * g;
            }

            sums[0] += l_a;
            sums[1] += l_c;
            sums[2] += l_l;
            sums[3] += l_f;
        }
        let steps = steps_per_epoch as f64;
        history.push(LossBreakdown::new(
            sums[0] / steps,
            sums[1] / steps,
            sums[2] / steps,
            sums[3] / steps,
        ));
    }
    Ok((projector, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Role;
    use crate::metric::estimate_metric;
    use crate::metric::Shrinkage;
    use crate::mining::build_neighbor_table;

    fn identity_metric(dim: usize) -> MahalanobisMetric {
        MahalanobisMetric::from_covariance(DMatrix::identity(dim, dim), 0.0).unwrap()
    }

    fn pool_2d(rows: &[[f64; 2]]) -> EmbeddingSet {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingSet::from_rows(Role::UnlabeledMix, &rows, None).unwrap()
    }

    #[test]
    fn identity_init_is_identity() {
        let p = init_projector(3, 3, InitScheme::Identity, 0).unwrap();
        let x = [1.5, -2.0, 0.25];
        assert_eq!(p.apply(&x).as_slice(), &x);
        assert!(init_projector(3, 4, InitScheme::Identity, 0).is_err());
    }

    #[test]
    fn scaled_random_is_seeded_and_has_expected_variance() {
        let a = init_projector(100, 100, InitScheme::ScaledRandom, 42).unwrap();
        let b = init_projector(100, 100, InitScheme::ScaledRandom, 42).unwrap();
        assert_eq!(a, b);
        let entries: Vec<f64> = a.weights().iter().cloned().collect();
        let mean: f64 = entries.iter().sum::<f64>() / entries.len() as f64;
        let var: f64 =
            entries.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / entries.len() as f64;
        let expected = (6.0 / 200.0) / 3.0; // uniform variance = range^2 / 12
        assert!((var - expected).abs() / expected < 0.1, "var {var} vs {expected}");
    }

    #[test]
    fn hinge_values_match_hand_arithmetic() {
        let p = init_projector(2, 2, InitScheme::Identity, 0).unwrap();
        let pool = pool_2d(&[[0.0, 0.0], [2.0, 0.0], [0.0, 1.0]]);
        let metric = identity_metric(2);
        // projected distance 2, MD 2: hinge against lambda * 2.
        let pairs = [(0u32, 1u32)];
        assert!((loss_skeleton(&p, &pool, &pairs, &metric, 0.1) - 1.8).abs() < 1e-12);
        assert!((loss_close(&p, &pool, &pairs, &metric, 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(loss_loose(&p, &pool, &pairs, &metric, 6.0), 0.0);
        // negative pair at distance 1 against margin 3.
        assert!((loss_negative(&p, &pool, &[(0, 2)], 3.0) - 2.0).abs() < 1e-12);
        // empty batches contribute nothing.
        assert_eq!(loss_close(&p, &pool, &[], &metric, 0.5), 0.0);
    }

    #[test]
    fn close_and_loose_share_the_formula() {
        let p = init_projector(2, 2, InitScheme::ScaledRandom, 3).unwrap();
        let pool = pool_2d(&[[0.5, -1.0], [2.0, 0.75], [-1.5, 0.25]]);
        let metric = identity_metric(2);
        let pairs = [(0u32, 1u32), (1, 2)];
        let lambda = 0.8;
        assert_eq!(
            loss_close(&p, &pool, &pairs, &metric, lambda),
            loss_loose(&p, &pool, &pairs, &metric, lambda)
        );
    }

    #[test]
    fn gradient_zero_when_all_hinges_inactive() {
        let p = init_projector(2, 2, InitScheme::Identity, 0).unwrap();
        let pool = pool_2d(&[[0.0, 0.0], [0.0, 10.0]]);
        let metric = identity_metric(2);
        let config = TrainConfig { margin: 3.0, ..TrainConfig::default() };
        // positive hinge slack: lambda3 * MD = 60 > 10; negative: distance 10 > margin.
        let batch = StepBatch {
            labeled: vec![],
            close: vec![],
            loose: vec![(0, 1)],
            negative: vec![(0, 1)],
        };
        let g = gradient(&p, &pool, &metric, &batch, &config);
        assert_eq!(g, DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_negative_pair_gradient_by_hand() {
        // P = I, a - b = (0, 1), margin 3: d/dP of (3 - ||P(a-b)||) is
        // -(0,1)(0,1)^T.
        let p = init_projector(2, 2, InitScheme::Identity, 0).unwrap();
        let pool = pool_2d(&[[0.0, 1.0], [0.0, 0.0]]);
        let metric = identity_metric(2);
        let config = TrainConfig::default();
        let batch = StepBatch { negative: vec![(0, 1)], ..Default::default() };
        let g = gradient(&p, &pool, &metric, &batch, &config);
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]);
        assert_eq!(g, expected);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let dim = 4;
        let rows: Vec<Vec<f64>> =
            (0..12).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let pool = EmbeddingSet::from_rows(Role::UnlabeledMix, &rows, None).unwrap();
        let metric = identity_metric(dim);
        let config = TrainConfig { margin: 2.5, ..TrainConfig::default() };
        let p = init_projector(dim, dim, InitScheme::ScaledRandom, 5).unwrap();
        let batch = StepBatch {
            labeled: vec![(0, 1), (2, 3)],
            close: vec![(4, 5), (6, 7)],
            loose: vec![(8, 9)],
            negative: vec![(10, 11), (0, 5)],
        };
        let analytic = gradient(&p, &pool, &metric, &batch, &config);
        let total = |p: &Projector| {
            loss_skeleton(p, &pool, &batch.labeled, &metric, config.lambda1)
                + loss_close(p, &pool, &batch.close, &metric, config.lambda2)
                + loss_loose(p, &pool, &batch.loose, &metric, config.lambda3)
                + loss_negative(p, &pool, &batch.negative, config.margin)
        };
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for r in 0..dim {
            for c in 0..dim {
                let mut plus = p.clone();
                plus.weights[(r, c)] += h;
                let mut minus = p.clone();
                minus.weights[(r, c)] -= h;
                let numeric = (total(&plus) - total(&minus)) / (2.0 * h);
                let a = analytic[(r, c)];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    fn two_cluster_setup() -> (EmbeddingSet, EmbeddingSet, NeighborTable, PairInventory, MahalanobisMetric)
    {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let mut labeled_rows = Vec::new();
        let mut labels = Vec::new();
        let mut unlabeled_rows = Vec::new();
        for class in 0..2u32 {
            let cx = if class == 0 { -4.0 } else { 4.0 };
            for _ in 0..5 {
                labeled_rows
                    .push(vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
                labels.push(class);
            }
            for _ in 0..20 {
                unlabeled_rows
                    .push(vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            }
        }
        let labeled =
            EmbeddingSet::from_rows(Role::LabeledId, &labeled_rows, Some(labels)).unwrap();
        let unlabeled = EmbeddingSet::from_rows(Role::UnlabeledMix, &unlabeled_rows, None).unwrap();
        let pool = EmbeddingSet::concat_pool(&labeled, &unlabeled).unwrap();
        let metric = estimate_metric(&labeled, Shrinkage::Auto).unwrap();
        let table = build_neighbor_table(&pool, &metric).unwrap();
        let inventory = PairInventory::mine(&table, &labeled, 4, 2, 8).unwrap();
        (pool, labeled, table, inventory, metric)
    }

    #[test]
    fn zero_epochs_returns_initial_projector() {
        let (pool, labeled, table, inventory, metric) = two_cluster_setup();
        let config = TrainConfig { epochs: 0, k: 4, beta: 2, ..TrainConfig::default() };
        let (p, history) = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap();
        assert!(history.is_empty());
        assert_eq!(p, init_projector(2, 2, InitScheme::Identity, config.seed).unwrap());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let (pool, labeled, table, inventory, metric) = two_cluster_setup();
        let config = TrainConfig {
            epochs: 20,
            k: 4,
            beta: 2,
            seed: 77,
            quotas: Quotas::from_batch_size(32),
            ..TrainConfig::default()
        };
        let (p1, h1) = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap();
        let (p2, h2) = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
    }

    #[test]
    fn loss_decreases_on_two_clusters() {
        let (pool, labeled, table, inventory, metric) = two_cluster_setup();
        let config = TrainConfig {
            epochs: 200,
            k: 4,
            beta: 2,
            seed: 3,
            quotas: Quotas::from_batch_size(32),
            ..TrainConfig::default()
        };
        let (_, history) = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap();
        let first = history.first().unwrap().total;
        let last = history.last().unwrap().total;
        assert!(last <= first, "loss went from {first} to {last}");
        for entry in &history {
            assert_eq!(entry.total, entry.l_a + entry.l_c + entry.l_l + entry.l_f);
            assert!(entry.total >= 0.0);
        }
    }

    #[test]
    fn empty_positive_inventories_are_rejected() {
        let (pool, labeled, table, mut inventory, metric) = two_cluster_setup();
        inventory.close.clear();
        inventory.loose.clear();
        let config = TrainConfig { k: 4, beta: 2, ..TrainConfig::default() };
        let err = train(&pool, &labeled, &table, &inventory, &metric, &config).unwrap_err();
        assert!(err.to_string().contains("no positive structure mined"));
    }

    #[test]
    fn lambda_ordering_is_enforced() {
        let config = TrainConfig { lambda1: 0.7, lambda2: 0.5, ..TrainConfig::default() };
        assert!(matches!(config.validate(), Err(TrainError::Lambda12 { .. })));
        let config = TrainConfig { lambda2: 7.0, lambda3: 6.0, ..TrainConfig::default() };
        assert!(matches!(config.validate(), Err(TrainError::Lambda23 { .. })));
    }

    #[test]
    fn coefficient_ordering_shrinks_the_hinge() {
        let p = init_projector(2, 2, InitScheme::ScaledRandom, 11).unwrap();
        let pool = pool_2d(&[[3.0, -2.0], [-1.0, 4.0]]);
        let metric = identity_metric(2);
        let pairs = [(0u32, 1u32)];
        let small = loss_close(&p, &pool, &pairs, &metric, 0.5);
        let large = loss_loose(&p, &pool, &pairs, &metric, 6.0);
        assert!(large <= small);
    }
}
