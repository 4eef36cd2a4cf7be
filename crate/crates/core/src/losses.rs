//! Differentiable objectives.
//!
//! * [`contrastive_rank_loss`]: pairwise margin loss on embedding distances.
//! * [`basis_ce_loss`]: softmax cross-entropy on basis logits `W·f`.
//! * [`sd_loss`]: hinge on the gap between the running means of the
//!   pseudo-positive and pseudo-negative similarity distributions plus a
//!   variance penalty, over statistics tracked by [`GaussStats`].
//! * [`local_ce_pair_loss`] / [`global_ce_loss`]: cross-entropy baselines
//!   for the similarity-distribution term.
//!
//! Similarity losses return gradients with respect to each similarity value;
//! [`backprop_pair_similarities`] chains those into the basis and embeddings.

use serde::{Deserialize, Serialize};

use crate::basis::BasisMatrix;
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;
use crate::numerics::{axpy, dot, log_sum_exp, norm, sigmoid, softmax, softplus, Matrix};

/// Logistic scale applied to raw similarities by the cross-entropy baselines.
pub const CE_LOGIT_SCALE: f64 = 10.0;

/// Projected vectors shorter than this are treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Hinge margins of the ranking loss, in Euclidean distance units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMargins {
    pub m_pos: f64,
    pub m_neg: f64,
}

impl RankingMargins {
    pub fn new(m_pos: f64, m_neg: f64) -> Result<Self> {
        if !(m_pos >= 0.0 && m_neg >= 0.0 && m_pos < m_neg) {
            return Err(Error::InvalidConfig(format!(
                "ranking margins need 0 <= m_pos < m_neg, got m_pos={m_pos}, m_neg={m_neg}"
            )));
        }
        Ok(Self { m_pos, m_neg })
    }
}

/// Positive and negative index pairs into one batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        for &(i, j) in self.positive.iter().chain(&self.negative) {
            if i == j || i >= count || j >= count {
                return Err(Error::InvalidDataset(format!(
                    "pair ({i}, {j}) invalid for a batch of {count}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss value and gradient with respect to each embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct RankLoss {
    pub loss: f64,
    pub grad_embeddings: Matrix,
    /// Pairs whose hinge is active.
    pub active_pairs: usize,
    /// Set when there were no pairs at all to train on.
    pub starved: bool,
}

#[inline]
pub fn pair_distance(a: &[f64], b: &[f64]) -> f64 {
    crate::numerics::squared_distance(a, b).sqrt()
}

/// Contrastive ranking loss
/// `Σ_P max(d - m_pos, 0) + Σ_N max(m_neg - d, 0)`, divided by `|P| + |N|`,
/// with `d` the Euclidean distance between embeddings.
pub fn contrastive_rank_loss(
    embeddings: &EmbeddingBatch,
    pairs: &PairSet,
    margins: RankingMargins,
) -> Result<RankLoss> {
    let n = embeddings.count();
    pairs.validate(n)?;
    let mut grad = Matrix::zeros(n, embeddings.dim());
    if pairs.is_empty() {
        return Ok(RankLoss {
            loss: 0.0,
            grad_embeddings: grad,
            active_pairs: 0,
            starved: true,
        });
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    let mut active = 0;
    let mut diff = vec![0.0; embeddings.dim()];
    let mut visit = |i: usize, j: usize, positive: bool| {
        let (a, b) = (embeddings.row(i), embeddings.row(j));
        let d = pair_distance(a, b);
        let (value, sign) = if positive {
            (d - margins.m_pos, 1.0)
        } else {
            (margins.m_neg - d, -1.0)
        };
        // zero subgradient at the hinge corner and at d = 0
        if value <= 0.0 {
            return;
        }
        total += value;
        active += 1;
        if d == 0.0 {
            return;
        }
        for ((o, x), y) in diff.iter_mut().zip(a).zip(b) {
            *o = (x - y) / d;
        }
        axpy(sign * scale, &diff, grad.row_mut(i));
        axpy(-sign * scale, &diff, grad.row_mut(j));
    };
    for &(i, j) in &pairs.positive {
        visit(i, j, true);
    }
    for &(i, j) in &pairs.negative {
        visit(i, j, false);
    }
    Ok(RankLoss {
        loss: total * scale,
        grad_embeddings: grad,
        active_pairs: active,
        starved: false,
    })
}

/// Cross-entropy value and gradients for the basis and the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CeLoss {
    pub loss: f64,
    pub grad_basis: Matrix,
    pub grad_embeddings: Matrix,
}

/// Mean over samples of `-log softmax(W·f_i)[y_i]`.
pub fn basis_ce_loss(
    basis: &BasisMatrix,
    embeddings: &EmbeddingBatch,
    labels: &[usize],
) -> Result<CeLoss> {
    let w = basis.matrix();
    let (k, d) = (w.rows(), w.cols());
    if embeddings.dim() != d {
        return Err(Error::DimensionMismatch {
            context: "basis_ce_loss embedding dim",
            expected: d,
            found: embeddings.dim(),
        });
    }
    if labels.len() != embeddings.count() {
        return Err(Error::DimensionMismatch {
            context: "basis_ce_loss labels",
            expected: embeddings.count(),
            found: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let n = labels.len();
    let mut grad_basis = Matrix::zeros(k, d);
    let mut grad_embeddings = Matrix::zeros(n, d);
    if n == 0 {
        return Ok(CeLoss {
            loss: 0.0,
            grad_basis,
            grad_embeddings,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let f = embeddings.row(i);
        let logits = w.matvec(f);
        loss += log_sum_exp(&logits) - logits[y];
        let mut dz = softmax(&logits)?;
        dz[y] -= 1.0;
        dz.iter_mut().for_each(|v| *v *= inv_n);
        grad_basis.add_outer(1.0, &dz, f);
        grad_embeddings
            .row_mut(i)
            .copy_from_slice(&w.transpose_matvec(&dz));
    }
    Ok(CeLoss {
        loss: loss * inv_n,
        grad_basis,
        grad_embeddings,
    })
}

/// One scored in-batch pair, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub i: usize,
    pub j: usize,
    pub s: f64,
}

/// Projected similarities of all in-batch pairs, split by pseudo label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSimilarities {
    pub positives: Vec<ScoredPair>,
    pub negatives: Vec<ScoredPair>,
    pub degenerate_pairs: usize,
}

impl PairSimilarities {
    pub fn pos_values(&self) -> Vec<f64> {
        self.positives.iter().map(|p| p.s).collect()
    }

    pub fn neg_values(&self) -> Vec<f64> {
        self.negatives.iter().map(|p| p.s).collect()
    }
}

/// Projects every embedding row through the basis; `None` for degenerate rows.
pub(crate) fn project_rows(
    basis: &BasisMatrix,
    embeddings: &EmbeddingBatch,
) -> Vec<Option<Vec<f64>>> {
    (0..embeddings.count())
        .map(|i| {
            let r = basis.matrix().matvec(embeddings.row(i));
            let n = norm(&r);
            (n >= DEGENERATE_NORM).then(|| r.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `s = cos(W f_i, W f_j)` for every unordered pair, routed to positives when
/// the pseudo labels match. Pairs touching a degenerate projection are skipped.
pub fn batch_pair_similarities(
    basis: &BasisMatrix,
    embeddings: &EmbeddingBatch,
    pseudo_labels: &[usize],
) -> Result<PairSimilarities> {
    let n = embeddings.count();
    if n < 2 {
        return Err(Error::InvalidDataset(format!(
            "need at least 2 samples to form pairs, got {n}"
        )));
    }
    if pseudo_labels.len() != n {
        return Err(Error::DimensionMismatch {
            context: "batch_pair_similarities labels",
            expected: n,
            found: pseudo_labels.len(),
        });
    }
    basis.check_dim(embeddings.dim())?;
    let unit = project_rows(basis, embeddings);
    let mut out = PairSimilarities::default();
    for i in 0..n {
        for j in i + 1..n {
            let (Some(a), Some(b)) = (&unit[i], &unit[j]) else {
                out.degenerate_pairs += 1;
                continue;
            };
            let pair = ScoredPair {
                i,
                j,
                s: dot(a, b).clamp(-1.0, 1.0),
            };
            if pseudo_labels[i] == pseudo_labels[j] {
                out.positives.push(pair);
            } else {
                out.negatives.push(pair);
            }
        }
    }
    Ok(out)
}

/// Chains `dL/ds` for each scored pair into `dL/dW` and `dL/df`, accumulating
/// into the provided buffers.
pub fn backprop_pair_similarities(
    basis: &BasisMatrix,
    embeddings: &EmbeddingBatch,
    pairs: &[ScoredPair],
    grad_s: &[f64],
    grad_basis: &mut Matrix,
    grad_embeddings: &mut Matrix,
) {
    assert_eq!(pairs.len(), grad_s.len(), "one gradient per pair");
    let w = basis.matrix();
    let n = embeddings.count();
    let projected: Vec<Vec<f64>> = (0..n).map(|i| w.matvec(embeddings.row(i))).collect();
    let norms: Vec<f64> = projected.iter().map(|r| norm(r)).collect();
    let mut grad_r = vec![vec![0.0; w.rows()]; n];
    for (p, &g) in pairs.iter().zip(grad_s) {
        if g == 0.0 || norms[p.i] < DEGENERATE_NORM || norms[p.j] < DEGENERATE_NORM {
            continue;
        }
        let (ni, nj) = (norms[p.i], norms[p.j]);
        let s = dot(&projected[p.i], &projected[p.j]) / (ni * nj);
        // ds/dr_i = (r̂_j - s r̂_i) / |r_i|
        for c in 0..w.rows() {
            let ui = projected[p.i][c] / ni;
            let uj = projected[p.j][c] / nj;
            grad_r[p.i][c] += g * (uj - s * ui) / ni;
            grad_r[p.j][c] += g * (ui - s * uj) / nj;
        }
    }
    for (i, gr) in grad_r.iter().enumerate() {
        if gr.iter().all(|&v| v == 0.0) {
            continue;
        }
        grad_basis.add_outer(1.0, gr, embeddings.row(i));
        axpy(1.0, &w.transpose_matvec(gr), grad_embeddings.row_mut(i));
    }
}

/// Moments of the current batch on one side, kept so that losses can
/// differentiate through the batch's contribution to the running statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMoments {
    pub mean: f64,
    pub var: f64,
    pub count: usize,
    /// Weight of the batch in the updated running value: `1 - beta`, or 1 on
    /// the first update of that side.
    pub weight: f64,
}

/// Running Gaussian statistics of the pseudo-positive and pseudo-negative
/// similarity distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussStats {
    pub mu_pos: f64,
    pub var_pos: f64,
    pub mu_neg: f64,
    pub var_neg: f64,
    pub beta: f64,
    pos_initialized: bool,
    neg_initialized: bool,
    batch_pos: Option<BatchMoments>,
    batch_neg: Option<BatchMoments>,
}

impl GaussStats {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0, 1), got {beta}"
            )));
        }
        Ok(Self {
            mu_pos: 0.0,
            var_pos: 0.0,
            mu_neg: 0.0,
            var_neg: 0.0,
            beta,
            pos_initialized: false,
            neg_initialized: false,
            batch_pos: None,
            batch_neg: None,
        })
    }

    /// Statistics that are already initialized on both sides.
    pub fn with_values(
        beta: f64,
        mu_pos: f64,
        var_pos: f64,
        mu_neg: f64,
        var_neg: f64,
    ) -> Result<Self> {
        let mut s = Self::new(beta)?;
        s.mu_pos = mu_pos;
        s.var_pos = var_pos;
        s.mu_neg = mu_neg;
        s.var_neg = var_neg;
        s.pos_initialized = true;
        s.neg_initialized = true;
        Ok(s)
    }

    pub fn is_initialized(&self) -> bool {
        self.pos_initialized && self.neg_initialized
    }

    pub fn pos_initialized(&self) -> bool {
        self.pos_initialized
    }

    pub fn neg_initialized(&self) -> bool {
        self.neg_initialized
    }

    /// Moments of the most recent batch per side, if that side was updated.
    pub fn last_batch(&self) -> (Option<BatchMoments>, Option<BatchMoments>) {
        (self.batch_pos, self.batch_neg)
    }

    /// Momentum update with one batch of similarities; see [`update_gauss_stats`].
    pub fn update(&self, pos_sims: &[f64], neg_sims: &[f64]) -> Self {
        let mut next = *self;
        next.batch_pos = fold_side(
            self.beta,
            pos_sims,
            &mut next.mu_pos,
            &mut next.var_pos,
            &mut next.pos_initialized,
        );
        next.batch_neg = fold_side(
            self.beta,
            neg_sims,
            &mut next.mu_neg,
            &mut next.var_neg,
            &mut next.neg_initialized,
        );
        next
    }
}

/// Population mean and variance.
pub fn batch_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn fold_side(
    beta: f64,
    sims: &[f64],
    mu: &mut f64,
    var: &mut f64,
    initialized: &mut bool,
) -> Option<BatchMoments> {
    if sims.is_empty() {
        return None;
    }
    let (mean_b, var_b) = batch_moments(sims);
    let weight = if *initialized {
        *mu = (1.0 - beta) * mean_b + beta * *mu;
        *var = (1.0 - beta) * var_b + beta * *var;
        1.0 - beta
    } else {
        *mu = mean_b;
        *var = var_b;
        *initialized = true;
        1.0
    };
    Some(BatchMoments {
        mean: mean_b,
        var: var_b,
        count: sims.len(),
        weight,
    })
}

/// `μ ← (1-β)·μ_b + β·μ`, `υ ← (1-β)·υ_b + β·υ` per side. A side with no
/// similarities is left unchanged; the first update of a side adopts the batch
/// moments directly.
pub fn update_gauss_stats(stats: &GaussStats, pos_sims: &[f64], neg_sims: &[f64]) -> GaussStats {
    stats.update(pos_sims, neg_sims)
}

/// Margin and variance weight of the similarity-distribution loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdConfig {
    pub margin: f64,
    pub lambda_var: f64,
}

impl SdConfig {
    pub fn new(margin: f64, lambda_var: f64) -> Result<Self> {
        if !(margin > 0.0 && margin <= 2.0 && lambda_var >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sd loss needs 0 < margin <= 2 and lambda >= 0, got margin={margin}, lambda={lambda_var}"
            )));
        }
        Ok(Self { margin, lambda_var })
    }
}

/// Loss value and gradient with respect to each input similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityLoss {
    pub loss: f64,
    pub grad_pos: Vec<f64>,
    pub grad_neg: Vec<f64>,
    /// Set when there was nothing to evaluate.
    pub empty: bool,
}

impl SimilarityLoss {
    fn empty(pos: usize, neg: usize) -> Self {
        Self {
            loss: 0.0,
            grad_pos: vec![0.0; pos],
            grad_neg: vec![0.0; neg],
            empty: true,
        }
    }
}

/// Gradient of the running mean and variance of one side with respect to
/// each of that batch's similarities, scaled by `d_mu` and `d_var`.
fn chain_side(batch: Option<BatchMoments>, sims: &[f64], d_mu: f64, d_var: f64) -> Vec<f64> {
    match batch {
        Some(m) if m.count == sims.len() && !sims.is_empty() => {
            let n = m.count as f64;
            sims.iter()
                .map(|s| m.weight * (d_mu / n + d_var * 2.0 * (s - m.mean) / n))
                .collect()
        }
        _ => vec![0.0; sims.len()],
    }
}

/// `max(μ- - μ+ + m, 0) + λ(υ+ + υ-)` on statistics already updated with this
/// batch. Only the batch's weighted contribution is differentiated.
pub fn sd_loss(
    stats: &GaussStats,
    pos_sims: &[f64],
    neg_sims: &[f64],
    cfg: SdConfig,
) -> SimilarityLoss {
    if pos_sims.is_empty() && neg_sims.is_empty() {
        return SimilarityLoss::empty(0, 0);
    }
    let mut loss = 0.0;
    let (mut d_mu_pos, mut d_mu_neg) = (0.0, 0.0);
    if stats.is_initialized() {
        let gap = stats.mu_neg - stats.mu_pos + cfg.margin;
        if gap > 0.0 {
            loss += gap;
            d_mu_pos = -1.0;
            d_mu_neg = 1.0;
        }
    }
    if stats.pos_initialized {
        loss += cfg.lambda_var * stats.var_pos;
    }
    if stats.neg_initialized {
        loss += cfg.lambda_var * stats.var_neg;
    }
    SimilarityLoss {
        loss,
        grad_pos: chain_side(stats.batch_pos, pos_sims, d_mu_pos, cfg.lambda_var),
        grad_neg: chain_side(stats.batch_neg, neg_sims, d_mu_neg, cfg.lambda_var),
        empty: false,
    }
}

/// Binary cross-entropy of `sigmoid(CE_LOGIT_SCALE · s)` against 1 for
/// pseudo-positive pairs and 0 for pseudo-negative pairs, averaged over pairs.
pub fn local_ce_pair_loss(pos_sims: &[f64], neg_sims: &[f64]) -> SimilarityLoss {
    let total = pos_sims.len() + neg_sims.len();
    if total == 0 {
        return SimilarityLoss::empty(0, 0);
    }
    let inv = 1.0 / total as f64;
    let k = CE_LOGIT_SCALE;
    let mut loss = 0.0;
    let grad_pos = pos_sims
        .iter()
        .map(|&s| {
            loss += softplus(-k * s);
            -k * sigmoid(-k * s) * inv
        })
        .collect();
    let grad_neg = neg_sims
        .iter()
        .map(|&s| {
            loss += softplus(k * s);
            k * sigmoid(k * s) * inv
        })
        .collect();
    SimilarityLoss {
        loss: loss * inv,
        grad_pos,
        grad_neg,
        empty: false,
    }
}

/// Binary cross-entropy of `sigmoid(CE_LOGIT_SCALE · μ+)` against 1 plus
/// `sigmoid(CE_LOGIT_SCALE · μ-)` against 0, on updated running means.
pub fn global_ce_loss(
    stats: &GaussStats,
    pos_sims: &[f64],
    neg_sims: &[f64],
) -> Result<SimilarityLoss> {
    if !stats.is_initialized() {
        return Err(Error::UninitializedStats);
    }
    let k = CE_LOGIT_SCALE;
    let loss = softplus(-k * stats.mu_pos) + softplus(k * stats.mu_neg);
    let d_mu_pos = -k * sigmoid(-k * stats.mu_pos);
    let d_mu_neg = k * sigmoid(k * stats.mu_neg);
    Ok(SimilarityLoss {
        loss,
        grad_pos: chain_side(stats.batch_pos, pos_sims, d_mu_pos, 0.0),
        grad_neg: chain_side(stats.batch_neg, neg_sims, d_mu_neg, 0.0),
        empty: false,
    })
}

/// Which objective trains the basis on unlabeled pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityObjective {
    #[default]
    Sd,
    LocalCe,
    GlobalCe,
}

impl SimilarityObjective {
    /// Evaluates the selected objective on statistics already updated with
    /// this batch. Uninitialized statistics yield an empty loss.
    pub fn evaluate(
        self,
        stats: &GaussStats,
        pos: &[f64],
        neg: &[f64],
        cfg: SdConfig,
    ) -> SimilarityLoss {
        match self {
            Self::Sd => sd_loss(stats, pos, neg, cfg),
            Self::LocalCe => local_ce_pair_loss(pos, neg),
            Self::GlobalCe => global_ce_loss(stats, pos, neg)
                .unwrap_or_else(|_| SimilarityLoss::empty(pos.len(), neg.len())),
        }
    }
}
