//! Basis vectors `W_a` (`k_b × d`), the projected representation
//! `r = W_a · f`, and threshold-based mining of confident unlabeled pairs.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::losses::{project_rows, GaussStats, ScoredPair};
use crate::model::EmbeddingBatch;
use crate::numerics::{dot, Matrix};
use crate::rng::{seeded, Stream};

/// Learnable basis vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix(Matrix);

impl BasisMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::InvalidConfig(
                "basis matrix must be non-empty".into(),
            ));
        }
        if !values.is_finite() {
            return Err(Error::NonFinite {
                context: "basis matrix",
            });
        }
        Ok(Self(values))
    }

    /// Rows drawn from `N(0, 1/d)`.
    pub fn random(count: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed, Stream::Basis);
        let scale = 1.0 / (dim.max(1) as f64).sqrt();
        let data = (0..count * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        Self::new(Matrix::from_vec(count, dim, data)?)
    }

    pub fn count(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub(crate) fn check_dim(&self, dim: usize) -> Result<()> {
        if dim != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "basis embedding dim",
                expected: self.dim(),
                found: dim,
            });
        }
        Ok(())
    }

    /// `self - learning_rate · grad`
    pub fn sgd_step(&self, grad: &Matrix, learning_rate: f64) -> Self {
        let mut next = self.0.clone();
        next.add_scaled(-learning_rate, grad);
        Self(next)
    }
}

/// `r = W_a · f`, i.e. `r_i = a_iᵀ f`.
pub fn project(basis: &BasisMatrix, f: &[f64]) -> Result<Vec<f64>> {
    basis.check_dim(f.len())?;
    Ok(basis.matrix().iter_rows().map(|a| dot(a, f)).collect())
}

/// Similarity cut-offs: pairs with `s >= t1` are positives, `s <= t2` negatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningThresholds {
    pub t1: f64,
    pub t2: f64,
}

impl MiningThresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        if t1 <= t2 {
            return Err(Error::NotSeparated {
                mu_pos: t1,
                mu_neg: t2,
            });
        }
        Ok(Self { t1, t2 })
    }
}

/// `t1 = μ+ + c·σ+`, `t2 = μ- - c·σ-`, with `c = sigma_scale` (0 by default,
/// i.e. the thresholds are the running means).
pub fn thresholds_from_stats_scaled(
    stats: &GaussStats,
    sigma_scale: f64,
) -> Result<MiningThresholds> {
    if !stats.is_initialized() {
        return Err(Error::UninitializedStats);
    }
    if stats.mu_pos <= stats.mu_neg {
        return Err(Error::NotSeparated {
            mu_pos: stats.mu_pos,
            mu_neg: stats.mu_neg,
        });
    }
    let t1 = stats.mu_pos + sigma_scale * stats.var_pos.sqrt();
    let t2 = stats.mu_neg - sigma_scale * stats.var_neg.sqrt();
    MiningThresholds::new(t1, t2)
}

pub fn thresholds_from_stats(stats: &GaussStats) -> Result<MiningThresholds> {
    thresholds_from_stats_scaled(stats, 0.0)
}

/// Confident pairs selected from one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct MinedPairs {
    pub positives: Vec<ScoredPair>,
    pub negatives: Vec<ScoredPair>,
    pub thresholds: MiningThresholds,
    pub stats_snapshot: Option<GaussStats>,
    pub degenerate_pairs: usize,
}

impl MinedPairs {
    pub fn to_pair_set(&self) -> crate::losses::PairSet {
        crate::losses::PairSet {
            positive: self.positives.iter().map(|p| (p.i, p.j)).collect(),
            negative: self.negatives.iter().map(|p| (p.i, p.j)).collect(),
        }
    }
}

/// Scores every unordered pair `(i, j)`, `i < j`, by `cos(W f_i, W f_j)` and
/// keeps `s >= t1` as positives and `s <= t2` as negatives. With a cap, only the
/// `cap` most extreme pairs per side survive (ties by lowest pair index).
pub fn mine_pairs(
    basis: &BasisMatrix,
    embeddings: &EmbeddingBatch,
    thresholds: MiningThresholds,
    cap: Option<usize>,
) -> Result<MinedPairs> {
    let n = embeddings.count();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 samples to mine pairs, got {n}"
        )));
    }
    if thresholds.t1 <= thresholds.t2 {
        return Err(Error::NotSeparated {
            mu_pos: thresholds.t1,
            mu_neg: thresholds.t2,
        });
    }
    basis.check_dim(embeddings.dim())?;
    let unit = project_rows(basis, embeddings);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    let mut degenerate_pairs = 0;
    for i in 0..n {
        for j in i + 1..n {
            let (Some(a), Some(b)) = (&unit[i], &unit[j]) else {
                degenerate_pairs += 1;
                continue;
            };
            let s = dot(a, b).clamp(-1.0, 1.0);
            if s >= thresholds.t1 {
                positives.push(ScoredPair { i, j, s });
            } else if s <= thresholds.t2 {
                negatives.push(ScoredPair { i, j, s });
            }
        }
    }
    if let Some(cap) = cap {
        // stable sorts keep enumeration order among equal similarities
        if positives.len() > cap {
            positives.sort_by(|a, b| b.s.total_cmp(&a.s));
            positives.truncate(cap);
            positives.sort_by_key(|p| (p.i, p.j));
        }
        if negatives.len() > cap {
            negatives.sort_by(|a, b| a.s.total_cmp(&b.s));
            negatives.truncate(cap);
            negatives.sort_by_key(|p| (p.i, p.j));
        }
    }
    Ok(MinedPairs {
        positives,
        negatives,
        thresholds,
        stats_snapshot: None,
        degenerate_pairs,
    })
}

/// Fraction of mined positives whose true classes agree and of mined
/// negatives whose true classes differ. `None` for an empty side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningPurity {
    pub positive: Option<f64>,
    pub negative: Option<f64>,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// `true_labels[k]` is the ground-truth class of batch row `k`.
pub fn mining_purity(mined: &MinedPairs, true_labels: &[usize]) -> MiningPurity {
    let frac = |pairs: &[ScoredPair], want_same: bool| {
        (!pairs.is_empty()).then(|| {
            let ok = pairs
                .iter()
                .filter(|p| (true_labels[p.i] == true_labels[p.j]) == want_same)
                .count();
            ok as f64 / pairs.len() as f64
        })
    };
    MiningPurity {
        positive: frac(&mined.positives, true),
        negative: frac(&mined.negatives, false),
        positive_count: mined.positives.len(),
        negative_count: mined.negatives.len(),
    }
}
