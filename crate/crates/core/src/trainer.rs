//! Teacher training, pseudo labelling, basis warm-up, joint student/basis
//! training and the self-training and fold loops.
//!
//! One student step combines a labeled batch with an unlabeled batch:
//!
//! ```text
//! L = rank(labeled) + λ1·rank(mined unlabeled) + λ2·(CE(labeled) + sim(unlabeled))
//! ```
//!
//! where `sim` is the configured similarity objective and the mined pairs come
//! from thresholds on the running similarity statistics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{mine_pairs, thresholds_from_stats_scaled, BasisMatrix};
use crate::cluster::{assign, kmeans_fit_restarts, ClusterModel};
use crate::config::{StudentInit, TrainConfig};
use crate::data::{LabeledSet, PseudoLabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::formats::checkpoint_id;
use crate::losses::{
    backprop_pair_similarities, basis_ce_loss, batch_pair_similarities, contrastive_rank_loss,
    GaussStats, PairSet, PairSimilarities, ScoredPair,
};
use crate::model::{EmbeddingBatch, EmbeddingParams, ParamGrads};
use crate::numerics::{norm, Matrix};
use crate::retrieval::{evaluate_leave_one_out, RetrievalIndex, RetrievalReport};
use crate::rng::{seeded, Stream};

/// Forward batch of labeled rows: anchors followed by their sampled
/// partners, with the ranking pairs indexing into `inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Matrix,
    pub pairs: PairSet,
    /// Basis row of each input's class.
    pub class_index: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    pub inputs: Matrix,
    pub pseudo_labels: Vec<usize>,
}

/// Loss components of one optimization step. `total` is the weighted sum
/// that was differentiated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub labeled_rank: f64,
    pub unlabeled_rank: f64,
    pub basis_ce: f64,
    pub basis_sim: f64,
    pub total: f64,
    pub mined_positive: usize,
    pub mined_negative: usize,
    pub mining_skipped: bool,
}

impl StepRecord {
    pub fn weighted_total(&self, lambda1: f64, lambda2: f64) -> f64 {
        self.labeled_rank
            + lambda1 * self.unlabeled_rank
            + lambda2 * (self.basis_ce + self.basis_sim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Warmup,
    Student,
}

/// Mean step losses over one epoch (or over the whole warm-up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub round: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub steps: usize,
    pub total: f64,
    pub labeled_rank: f64,
    pub unlabeled_rank: f64,
    pub basis_ce: f64,
    pub basis_sim: f64,
    pub mining_skipped_steps: usize,
}

impl EpochRecord {
    fn summarize(round: usize, phase: Phase, epoch: usize, steps: &[StepRecord]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>() / n;
        Self {
            round,
            phase,
            epoch,
            steps: steps.len(),
            total: mean(|s| s.total),
            labeled_rank: mean(|s| s.labeled_rank),
            unlabeled_rank: mean(|s| s.unlabeled_rank),
            basis_ce: mean(|s| s.basis_ce),
            basis_sim: mean(|s| s.basis_sim),
            mining_skipped_steps: steps.iter().filter(|s| s.mining_skipped).count(),
        }
    }
}

/// Running statistics as plain numbers for reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub mu_pos: f64,
    pub var_pos: f64,
    pub mu_neg: f64,
    pub var_neg: f64,
}

impl From<&GaussStats> for StatsSnapshot {
    fn from(s: &GaussStats) -> Self {
        Self {
            mu_pos: s.mu_pos,
            var_pos: s.var_pos,
            mu_neg: s.mu_neg,
            var_neg: s.var_neg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub teacher_id: String,
    pub student_id: String,
    pub clusters: usize,
    pub stats: StatsSnapshot,
    pub teacher_eval: Option<RetrievalReport>,
    pub student_eval: Option<RetrievalReport>,
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    epochs: Vec<EpochRecord>,
    rounds: Vec<RoundRecord>,
    warnings: Vec<String>,
}

impl History {
    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn rounds(&self) -> &[RoundRecord] {
        &self.rounds
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn push_epoch(&mut self, record: EpochRecord) {
        self.epochs.push(record);
    }

    pub fn push_round(&mut self, record: RoundRecord) {
        self.rounds.push(record);
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    fn extend(&mut self, epochs: Vec<EpochRecord>, warnings: Vec<String>) {
        self.epochs.extend(epochs);
        self.warnings.extend(warnings);
    }
}

/// Outcome of a supervised or joint training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained {
    pub params: EmbeddingParams,
    pub basis: Option<BasisMatrix>,
    pub stats: GaussStats,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Class membership lookups for pair sampling.
struct ClassIndex {
    members: BTreeMap<usize, Vec<usize>>,
    /// Position of each sample within its class's member list.
    slot: Vec<usize>,
    /// Basis row of each class id.
    row_of: BTreeMap<usize, usize>,
}

impl ClassIndex {
    fn new(set: &LabeledSet) -> Self {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut slot = Vec::with_capacity(set.len());
        for (i, &c) in set.labels().iter().enumerate() {
            let list = members.entry(c).or_default();
            slot.push(list.len());
            list.push(i);
        }
        let row_of = members.keys().enumerate().map(|(r, &c)| (c, r)).collect();
        Self {
            members,
            slot,
            row_of,
        }
    }

    fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.members.len() < 2 {
            out.push(
                "labeled data has a single class; no negative pairs can be sampled".to_string(),
            );
        }
        for (c, m) in &self.members {
            if m.len() == 1 {
                out.push(format!(
                    "class {c} has a single sample and contributes no positive pairs"
                ));
            }
        }
        out
    }
}

/// Draws, for every anchor, one same-class and one different-class partner.
pub fn sample_labeled_batch(
    set: &LabeledSet,
    anchors: &[usize],
    rng: &mut impl Rng,
) -> LabeledBatch {
    sample_with_index(set, &ClassIndex::new(set), anchors, rng)
}

fn sample_with_index(
    set: &LabeledSet,
    index: &ClassIndex,
    anchors: &[usize],
    rng: &mut impl Rng,
) -> LabeledBatch {
    let labels = set.labels();
    let n = set.len();
    let mut rows = Vec::with_capacity(anchors.len() * 3);
    let mut pairs = PairSet::default();
    for &a in anchors {
        let ai = rows.len();
        rows.push(a);
        let same = &index.members[&labels[a]];
        if same.len() > 1 {
            let mut k = rng.random_range(0..same.len() - 1);
            if k >= index.slot[a] {
                k += 1;
            }
            pairs.positive.push((ai, rows.len()));
            rows.push(same[k]);
        }
        if same.len() < n {
            let other = loop {
                let j = rng.random_range(0..n);
                if labels[j] != labels[a] {
                    break j;
                }
            };
            pairs.negative.push((ai, rows.len()));
            rows.push(other);
        }
    }
    LabeledBatch {
        inputs: set.features().select_rows(&rows),
        class_index: rows.iter().map(|&r| index.row_of[&labels[r]]).collect(),
        pairs,
    }
}

/// Endless shuffled pass over `0..len`, reshuffling instead of emitting a
/// short final batch.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        out
    }
}

fn epoch_batches(len: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn unlabeled_batch(pseudo: &PseudoLabeledSet, idx: &[usize]) -> UnlabeledBatch {
    UnlabeledBatch {
        inputs: pseudo.samples.features().select_rows(idx),
        pseudo_labels: idx.iter().map(|&i| pseudo.labels[i]).collect(),
    }
}

/// Value and gradients of `CE(labeled) + sim(unlabeled)` for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisObjective {
    pub ce: f64,
    pub sim: f64,
    pub grad_basis: Matrix,
    pub grad_labeled: Matrix,
    pub grad_unlabeled: Option<Matrix>,
    /// Statistics after folding in this batch's similarities.
    pub stats: GaussStats,
    pub similarities: Option<PairSimilarities>,
}

impl BasisObjective {
    pub fn loss(&self) -> f64 {
        self.ce + self.sim
    }
}

/// Basis loss on given embeddings: cross-entropy of the labeled rows plus
/// the configured similarity objective on the unlabeled pairs, evaluated on
/// statistics updated with this batch.
pub fn basis_objective(
    basis: &BasisMatrix,
    stats: &GaussStats,
    labeled: &EmbeddingBatch,
    class_index: &[usize],
    unlabeled: Option<(&EmbeddingBatch, &[usize])>,
    cfg: &TrainConfig,
) -> Result<BasisObjective> {
    let ce = basis_ce_loss(basis, labeled, class_index)?;
    let mut grad_basis = ce.grad_basis;
    let mut out_stats = *stats;
    let mut sim = 0.0;
    let mut grad_unlabeled = None;
    let mut similarities = None;
    if let Some((emb, pseudo)) = unlabeled {
        let sims = batch_pair_similarities(basis, emb, pseudo)?;
        let (pos, neg) = (sims.pos_values(), sims.neg_values());
        out_stats = stats.update(&pos, &neg);
        let loss = cfg
            .sd_variant
            .evaluate(&out_stats, &pos, &neg, cfg.sd_config());
        sim = loss.loss;
        let pairs: Vec<ScoredPair> = sims
            .positives
            .iter()
            .chain(&sims.negatives)
            .copied()
            .collect();
        let grads: Vec<f64> = loss
            .grad_pos
            .iter()
            .chain(&loss.grad_neg)
            .copied()
            .collect();
        let mut g = Matrix::zeros(emb.count(), emb.dim());
        backprop_pair_similarities(basis, emb, &pairs, &grads, &mut grad_basis, &mut g);
        grad_unlabeled = Some(g);
        similarities = Some(sims);
    }
    Ok(BasisObjective {
        ce: ce.loss,
        sim,
        grad_basis,
        grad_labeled: ce.grad_embeddings,
        grad_unlabeled,
        stats: out_stats,
        similarities,
    })
}

/// Gradients and bookkeeping of one joint step; nothing is applied yet.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub param_grads: ParamGrads,
    /// Present when the basis receives gradient (`λ2 > 0`).
    pub basis_grad: Option<Matrix>,
    pub stats: GaussStats,
}

/// Pairs for the unlabeled ranking term: basis-mined pairs, or all
/// pseudo-labeled pairs when mining is off. `None` when mining is on but the
/// statistics are not yet separated.
fn unlabeled_pairs(
    basis: Option<&BasisMatrix>,
    stats: &GaussStats,
    emb: &EmbeddingBatch,
    pseudo: &[usize],
    cfg: &TrainConfig,
) -> Result<Option<PairSet>> {
    if !cfg.use_mining {
        let mut pairs = PairSet::default();
        for i in 0..pseudo.len() {
            for j in i + 1..pseudo.len() {
                if pseudo[i] == pseudo[j] {
                    pairs.positive.push((i, j));
                } else {
                    pairs.negative.push((i, j));
                }
            }
        }
        return Ok(Some(pairs));
    }
    let basis =
        basis.ok_or_else(|| Error::InvalidConfig("use_mining requires use_basis".into()))?;
    match thresholds_from_stats_scaled(stats, cfg.threshold_sigma) {
        Ok(t) => Ok(Some(
            mine_pairs(basis, emb, t, cfg.pair_cap())?.to_pair_set(),
        )),
        Err(Error::NotSeparated { .. } | Error::UninitializedStats) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates the joint objective on one labeled and (optionally) one
/// unlabeled batch and returns gradients for the student and the basis.
pub fn joint_step(
    params: &EmbeddingParams,
    basis: Option<&BasisMatrix>,
    stats: &GaussStats,
    labeled: &LabeledBatch,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let margins = cfg.margins();
    let f_l = params.forward(&labeled.inputs)?;
    let rank_l = contrastive_rank_loss(&f_l, &labeled.pairs, margins)?;
    let mut g_l = rank_l.grad_embeddings;
    let mut record = StepRecord {
        labeled_rank: rank_l.loss,
        ..StepRecord::default()
    };
    let f_u = unlabeled.map(|u| params.forward(&u.inputs)).transpose()?;
    let mut g_u = f_u.as_ref().map(|f| Matrix::zeros(f.count(), f.dim()));
    let mut next_stats = *stats;
    let mut basis_grad = None;

    if let Some(b) = basis {
        let unl = f_u
            .as_ref()
            .zip(unlabeled)
            .map(|(f, u)| (f, u.pseudo_labels.as_slice()));
        let obj = basis_objective(b, stats, &f_l, &labeled.class_index, unl, cfg)?;
        next_stats = obj.stats;
        record.basis_ce = obj.ce;
        record.basis_sim = obj.sim;
        if cfg.lambda2 > 0.0 {
            g_l.add_scaled(cfg.lambda2, &obj.grad_labeled);
            if let (Some(g), Some(gu)) = (g_u.as_mut(), obj.grad_unlabeled.as_ref()) {
                g.add_scaled(cfg.lambda2, gu);
            }
            let mut gw = obj.grad_basis;
            gw.as_mut_slice().iter_mut().for_each(|v| *v *= cfg.lambda2);
            basis_grad = Some(gw);
        }
    }

    if let (Some(f), Some(u), true) = (f_u.as_ref(), unlabeled, cfg.lambda1 > 0.0) {
        match unlabeled_pairs(basis, &next_stats, f, &u.pseudo_labels, cfg)? {
            Some(pairs) => {
                record.mined_positive = pairs.positive.len();
                record.mined_negative = pairs.negative.len();
                let rank_u = contrastive_rank_loss(f, &pairs, margins)?;
                record.unlabeled_rank = rank_u.loss;
                if let Some(g) = g_u.as_mut() {
                    g.add_scaled(cfg.lambda1, &rank_u.grad_embeddings);
                }
            }
            None => record.mining_skipped = true,
        }
    }
    record.total = record.weighted_total(cfg.lambda1, cfg.lambda2);

    let mut param_grads = params.backward(&labeled.inputs, &g_l)?;
    if let (Some(u), Some(g)) = (unlabeled, g_u.as_ref()) {
        param_grads.add_scaled(1.0, &params.backward(&u.inputs, g)?);
    }
    Ok(StepOutcome {
        record,
        param_grads,
        basis_grad,
        stats: next_stats,
    })
}

/// Seeded initialization for an embedding of `out_dim` over `input_dim`
/// features.
pub fn init_params(cfg: &TrainConfig, input_dim: usize, out_dim: usize) -> Result<EmbeddingParams> {
    EmbeddingParams::init(cfg.seed, &cfg.layer_dims(input_dim, out_dim), true)
}

/// Number of basis rows and a check that every labeled class has one.
pub fn basis_rows(cfg: &TrainConfig, labeled: &LabeledSet) -> Result<usize> {
    let classes = labeled.classes().len();
    let rows = if cfg.basis_count == 0 {
        classes
    } else {
        cfg.basis_count
    };
    if rows < classes {
        return Err(Error::InvalidConfig(format!(
            "basis_count {rows} is smaller than the {classes} labeled classes"
        )));
    }
    Ok(rows)
}

fn check_labeled(labeled: &LabeledSet, params: &EmbeddingParams) -> Result<()> {
    if labeled.is_empty() {
        return Err(Error::InvalidDataset("labeled set is empty".into()));
    }
    if labeled.dim() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "labeled feature dim",
            expected: params.input_dim(),
            found: labeled.dim(),
        });
    }
    Ok(())
}

struct FitSpec<'a> {
    labeled: &'a LabeledSet,
    pseudo: Option<&'a PseudoLabeledSet>,
    init: &'a EmbeddingParams,
    basis: Option<BasisMatrix>,
    stats: GaussStats,
    epochs: usize,
    phase: Phase,
    round: usize,
}

fn fit(spec: FitSpec<'_>, cfg: &TrainConfig) -> Result<Trained> {
    check_labeled(spec.labeled, spec.init)?;
    let index = ClassIndex::new(spec.labeled);
    let mut warnings = index.warnings();
    let mut labeled_rng = seeded(cfg.seed, Stream::LabeledBatches);
    let mut unlabeled_rng = seeded(cfg.seed, Stream::UnlabeledBatches);

    let unlabeled_active = cfg.lambda1 > 0.0 || (spec.basis.is_some() && cfg.lambda2 > 0.0);
    let pseudo = spec.pseudo.filter(|_| unlabeled_active);
    if let Some(p) = pseudo {
        if p.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 pseudo-labeled samples, got {}",
                p.len()
            )));
        }
        if p.samples.dim() != spec.init.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "unlabeled feature dim",
                expected: spec.init.input_dim(),
                found: p.samples.dim(),
            });
        }
    } else if cfg.lambda1 > 0.0 && spec.phase == Phase::Student {
        return Err(Error::InvalidDataset(
            "lambda1 > 0 needs pseudo-labeled data".into(),
        ));
    }
    let mut cycler = pseudo.map(|p| Cycler::new(p.len(), &mut unlabeled_rng));

    let mut params = spec.init.clone();
    let mut basis = spec.basis;
    let mut stats = spec.stats;
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(spec.epochs);
    for epoch in 0..spec.epochs {
        let first = steps.len();
        for anchors in epoch_batches(spec.labeled.len(), cfg.batch_size, &mut labeled_rng) {
            let lb = sample_with_index(spec.labeled, &index, &anchors, &mut labeled_rng);
            let ub = match (pseudo, cycler.as_mut()) {
                (Some(p), Some(c)) => Some(unlabeled_batch(
                    p,
                    &c.next(cfg.batch_size, &mut unlabeled_rng),
                )),
                _ => None,
            };
            let out = joint_step(&params, basis.as_ref(), &stats, &lb, ub.as_ref(), cfg)?;
            params = params.sgd_step(&out.param_grads, cfg.learning_rate);
            if let (Some(b), Some(g)) = (basis.as_mut(), out.basis_grad.as_ref()) {
                *b = b.sgd_step(g, cfg.basis_learning_rate);
            }
            stats = out.stats;
            steps.push(out.record);
        }
        let rec = EpochRecord::summarize(spec.round, spec.phase, epoch, &steps[first..]);
        if rec.steps > 0 && rec.mining_skipped_steps == rec.steps {
            warnings.push(format!(
                "round {} epoch {epoch}: statistics never separated (mu_pos={}, mu_neg={}); mined ranking term skipped all epoch",
                spec.round, stats.mu_pos, stats.mu_neg
            ));
        }
        epochs.push(rec);
    }
    Ok(Trained {
        params,
        basis,
        stats,
        steps,
        epochs,
        warnings,
    })
}

/// Fits a teacher from its seeded initialization with the ranking loss on
/// sampled ground-truth pairs.
pub fn train_teacher(labeled: &LabeledSet, cfg: &TrainConfig) -> Result<Trained> {
    let init = init_params(cfg, labeled.dim(), cfg.embedding_dim)?;
    train_teacher_from(labeled, cfg, &init)
}

pub fn train_teacher_from(
    labeled: &LabeledSet,
    cfg: &TrainConfig,
    init: &EmbeddingParams,
) -> Result<Trained> {
    fit(
        FitSpec {
            labeled,
            pseudo: None,
            init,
            basis: None,
            stats: GaussStats::new(cfg.beta)?,
            epochs: cfg.epochs_teacher,
            phase: Phase::Teacher,
            round: 0,
        },
        cfg,
    )
}

/// k-means settings for pseudo labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoLabelOptions {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl PseudoLabelOptions {
    pub fn from_config(cfg: &TrainConfig, seed: u64) -> Self {
        Self {
            k: cfg.clusters,
            restarts: cfg.kmeans_restarts,
            max_iter: cfg.kmeans_max_iter,
            seed,
        }
    }
}

/// Clusters teacher embeddings of the unlabeled pool and attaches the cluster
/// ids as pseudo labels.
pub fn generate_pseudo_labels(
    teacher: &EmbeddingParams,
    unlabeled: &UnlabeledSet,
    opts: PseudoLabelOptions,
) -> Result<(PseudoLabeledSet, ClusterModel)> {
    if unlabeled.len() < opts.k {
        return Err(Error::InvalidClusterCount {
            k: opts.k,
            samples: unlabeled.len(),
        });
    }
    let emb = teacher.forward(unlabeled.features())?.into_matrix();
    let model = kmeans_fit_restarts(&emb, opts.k, opts.max_iter, opts.seed, opts.restarts)?;
    let labels = assign(&model, &emb)?;
    let set = PseudoLabeledSet::new(unlabeled.clone(), labels, opts.k, checkpoint_id(teacher))?;
    Ok((set, model))
}

/// Warm-up result: the trained basis, initialized statistics and per-step
/// losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Warmup {
    pub basis: BasisMatrix,
    pub stats: GaussStats,
    pub steps: Vec<StepRecord>,
}

/// Trains the basis alone on `CE + sim` with the student held fixed.
pub fn warmup_basis(
    student: &EmbeddingParams,
    basis: BasisMatrix,
    stats: GaussStats,
    labeled: &LabeledSet,
    pseudo: Option<&PseudoLabeledSet>,
    iters: usize,
    cfg: &TrainConfig,
) -> Result<Warmup> {
    if iters == 0 {
        return Ok(Warmup {
            basis,
            stats,
            steps: Vec::new(),
        });
    }
    check_labeled(labeled, student)?;
    let index = ClassIndex::new(labeled);
    let class_rows: Vec<usize> = labeled.labels().iter().map(|c| index.row_of[c]).collect();
    let f_l = student.forward(labeled.features())?.into_matrix();
    let pseudo = pseudo.filter(|p| p.len() >= 2);
    let f_u = pseudo
        .map(|p| student.forward(p.samples.features()))
        .transpose()?;

    let mut rng = seeded(cfg.seed, Stream::Warmup);
    let mut l_cycle = Cycler::new(labeled.len(), &mut rng);
    let mut u_cycle = pseudo.map(|p| Cycler::new(p.len(), &mut rng));
    let mut basis = basis;
    let mut stats = stats;
    let mut steps = Vec::with_capacity(iters);
    for _ in 0..iters {
        let li = l_cycle.next(cfg.batch_size, &mut rng);
        let lb = EmbeddingBatch::new(f_l.select_rows(&li), true)?;
        let rows: Vec<usize> = li.iter().map(|&i| class_rows[i]).collect();
        let ub = match (pseudo, f_u.as_ref(), u_cycle.as_mut()) {
            (Some(p), Some(f), Some(c)) => {
                let ui = c.next(cfg.batch_size, &mut rng);
                let emb = EmbeddingBatch::new(f.matrix().select_rows(&ui), true)?;
                Some((emb, ui.iter().map(|&i| p.labels[i]).collect::<Vec<_>>()))
            }
            _ => None,
        };
        let obj = basis_objective(
            &basis,
            &stats,
            &lb,
            &rows,
            ub.as_ref().map(|(e, l)| (e, l.as_slice())),
            cfg,
        )?;
        basis = basis.sgd_step(&obj.grad_basis, cfg.basis_learning_rate);
        stats = obj.stats;
        steps.push(StepRecord {
            basis_ce: obj.ce,
            basis_sim: obj.sim,
            total: obj.loss(),
            ..StepRecord::default()
        });
    }
    Ok(Warmup {
        basis,
        stats,
        steps,
    })
}

/// Joint student/basis training from `init_from`. Without a basis (or with
/// `use_basis` off) only the ranking terms are trained.
pub fn train_student(
    labeled: &LabeledSet,
    pseudo: Option<&PseudoLabeledSet>,
    cfg: &TrainConfig,
    init_from: &EmbeddingParams,
    basis: Option<BasisMatrix>,
    stats: GaussStats,
) -> Result<Trained> {
    train_student_round(labeled, pseudo, cfg, init_from, basis, stats, 0)
}

fn train_student_round(
    labeled: &LabeledSet,
    pseudo: Option<&PseudoLabeledSet>,
    cfg: &TrainConfig,
    init_from: &EmbeddingParams,
    basis: Option<BasisMatrix>,
    stats: GaussStats,
    round: usize,
) -> Result<Trained> {
    if let Some(b) = &basis {
        if b.dim() != init_from.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "basis dim",
                expected: init_from.output_dim(),
                found: b.dim(),
            });
        }
    }
    fit(
        FitSpec {
            labeled,
            pseudo,
            init: init_from,
            basis: basis.filter(|_| cfg.use_basis),
            stats,
            epochs: cfg.epochs_student,
            phase: Phase::Student,
            round,
        },
        cfg,
    )
}

/// Leave-one-out retrieval metrics of `params` on a labeled set.
pub fn evaluate_model(
    params: &EmbeddingParams,
    set: &LabeledSet,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let emb = params.forward(set.features())?;
    let index = RetrievalIndex::new(emb.into_matrix(), set.labels().to_vec())?;
    evaluate_leave_one_out(&index, ks)
}

/// Models and log of a self-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    /// Teacher of the last round.
    pub teacher: EmbeddingParams,
    /// The retrieval model.
    pub student: EmbeddingParams,
    /// Student of every round, in order.
    pub round_students: Vec<EmbeddingParams>,
    pub basis: Option<BasisMatrix>,
    pub stats: GaussStats,
    pub pseudo: Option<PseudoLabeledSet>,
    pub round: usize,
    pub history: History,
}

/// Teacher fit, then `self_train_rounds` rounds of pseudo labelling, basis
/// warm-up and student training, each student becoming the next teacher.
/// Held-out metrics are recorded per round when `eval` is given.
pub fn self_train(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    eval: Option<&LabeledSet>,
    cfg: &TrainConfig,
) -> Result<PipelineState> {
    self_train_from(labeled, unlabeled, eval, cfg, None)
}

/// As [`self_train`], optionally starting from an already trained teacher.
pub fn self_train_from(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    eval: Option<&LabeledSet>,
    cfg: &TrainConfig,
    teacher: Option<EmbeddingParams>,
) -> Result<PipelineState> {
    cfg.validate()?;
    let mut history = History::default();
    let mut teacher = match teacher {
        Some(t) => t,
        None => {
            let t = train_teacher(labeled, cfg)?;
            history.extend(t.epochs, t.warnings);
            t.params
        }
    };
    let eval_of =
        |p: &EmbeddingParams| eval.map(|e| evaluate_model(p, e, &cfg.eval_ks)).transpose();
    let rows = basis_rows(cfg, labeled)?;
    let mut state_basis = None;
    let mut stats = GaussStats::new(cfg.beta)?;
    let mut last_pseudo = None;
    let mut round_students = Vec::with_capacity(cfg.self_train_rounds);
    let mut teacher_eval = eval_of(&teacher)?;

    for round in 0..cfg.self_train_rounds {
        let round_seed = cfg.seed.wrapping_add(round as u64);
        let (pseudo, _) = generate_pseudo_labels(
            &teacher,
            unlabeled,
            PseudoLabelOptions::from_config(cfg, round_seed),
        )?;
        let student_init = match cfg.student_init {
            StudentInit::Teacher => teacher.clone(),
            StudentInit::Scratch => init_params(cfg, labeled.dim(), teacher.output_dim())?,
        };
        let mut basis = None;
        stats = GaussStats::new(cfg.beta)?;
        if cfg.use_basis {
            let init = BasisMatrix::random(rows, teacher.output_dim(), round_seed)?;
            let w = warmup_basis(
                &student_init,
                init,
                stats,
                labeled,
                Some(&pseudo),
                cfg.basis_warmup_iters,
                cfg,
            )?;
            history.push_epoch(EpochRecord::summarize(round, Phase::Warmup, 0, &w.steps));
            basis = Some(w.basis);
            stats = w.stats;
        }
        let trained = train_student_round(
            labeled,
            Some(&pseudo),
            cfg,
            &student_init,
            basis,
            stats,
            round,
        )?;
        history.extend(trained.epochs, trained.warnings);
        stats = trained.stats;
        let student_eval = eval_of(&trained.params)?;
        history.push_round(RoundRecord {
            round,
            teacher_id: pseudo.teacher_id.clone(),
            student_id: checkpoint_id(&trained.params),
            clusters: pseudo.k,
            stats: StatsSnapshot::from(&stats),
            teacher_eval: teacher_eval.take(),
            student_eval: student_eval.clone(),
        });
        teacher_eval = student_eval;
        state_basis = trained.basis;
        last_pseudo = Some(pseudo);
        round_students.push(trained.params.clone());
        if round + 1 < cfg.self_train_rounds {
            teacher = trained.params;
        }
    }
    let student = round_students.last().cloned().expect("at least one round");
    Ok(PipelineState {
        teacher,
        student,
        round_students,
        basis: state_basis,
        stats,
        pseudo: last_pseudo,
        round: cfg.self_train_rounds,
        history,
    })
}

/// Concatenation of several embedding networks over the same input, each
/// part unit-normalized and the result re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatEmbedding {
    pub parts: Vec<EmbeddingParams>,
}

impl ConcatEmbedding {
    pub fn output_dim(&self) -> usize {
        self.parts.iter().map(EmbeddingParams::output_dim).sum()
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        let outs = self
            .parts
            .iter()
            .map(|p| p.forward(inputs).map(EmbeddingBatch::into_matrix))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Matrix> = outs.iter().collect();
        let mut m = Matrix::hcat(&refs)?;
        for r in 0..m.rows() {
            let row = m.row_mut(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DeadEmbedding { row: r });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(m)
    }

    pub fn evaluate(&self, set: &LabeledSet, ks: &[usize]) -> Result<RetrievalReport> {
        let index = RetrievalIndex::new(self.embed(set.features())?, set.labels().to_vec())?;
        evaluate_leave_one_out(&index, ks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutcome {
    pub model: ConcatEmbedding,
    pub folds: Vec<PipelineState>,
    /// Held-out metrics of each fold's student alone.
    pub fold_evals: Vec<Option<RetrievalReport>>,
    pub concat_eval: Option<RetrievalReport>,
}

/// Labeled classes of the training split of fold `f`: every class whose
/// position in sorted class order is not `f` modulo `folds`.
pub fn fold_training_set(labeled: &LabeledSet, folds: usize, f: usize) -> LabeledSet {
    let classes = labeled.classes();
    let held: Vec<usize> = classes
        .iter()
        .enumerate()
        .filter(|(i, _)| i % folds == f)
        .map(|(_, &c)| c)
        .collect();
    labeled.filter_classes(|c| !held.contains(&c))
}

/// One student per fold, each of dimension `embedding_dim / folds` and
/// trained without that fold's classes; each fold's student is the next
/// fold's teacher. With a single fold this is [`self_train`].
pub fn run_folds(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    eval: Option<&LabeledSet>,
    cfg: &TrainConfig,
) -> Result<FoldOutcome> {
    cfg.validate()?;
    if cfg.folds == 1 {
        let state = self_train(labeled, unlabeled, eval, cfg)?;
        let model = ConcatEmbedding {
            parts: vec![state.student.clone()],
        };
        let concat_eval = eval.map(|e| model.evaluate(e, &cfg.eval_ks)).transpose()?;
        return Ok(FoldOutcome {
            model,
            fold_evals: vec![concat_eval.clone()],
            folds: vec![state],
            concat_eval,
        });
    }
    let classes = labeled.classes().len();
    if classes < cfg.folds + 1 {
        return Err(Error::InvalidConfig(format!(
            "{} folds need at least {} labeled classes, got {classes}",
            cfg.folds,
            cfg.folds + 1
        )));
    }
    let fold_cfg = TrainConfig {
        embedding_dim: cfg.embedding_dim / cfg.folds,
        folds: 1,
        ..cfg.clone()
    };
    let mut teacher: Option<EmbeddingParams> = None;
    let mut states = Vec::with_capacity(cfg.folds);
    let mut fold_evals = Vec::with_capacity(cfg.folds);
    for f in 0..cfg.folds {
        let train = fold_training_set(labeled, cfg.folds, f);
        let state = self_train_from(&train, unlabeled, eval, &fold_cfg, teacher.take())?;
        fold_evals.push(
            eval.map(|e| evaluate_model(&state.student, e, &cfg.eval_ks))
                .transpose()?,
        );
        teacher = Some(state.student.clone());
        states.push(state);
    }
    let model = ConcatEmbedding {
        parts: states.iter().map(|s| s.student.clone()).collect(),
    };
    let concat_eval = eval.map(|e| model.evaluate(e, &cfg.eval_ks)).transpose()?;
    Ok(FoldOutcome {
        model,
        folds: states,
        fold_evals,
        concat_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synth, SynthSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs_teacher: 5,
            epochs_student: 5,
            basis_warmup_iters: 10,
            clusters: 4,
            hidden_dims: vec![16],
            embedding_dim: 4,
            batch_size: 16,
            ..TrainConfig::default()
        }
    }

    fn small_data(seed: u64) -> crate::synth::SynthData {
        generate_synth(&SynthSpec {
            seen_classes: 4,
            unseen_classes: 4,
            samples_per_class: 10,
            dim: 6,
            center_separation: 4.0,
            within_std: 0.7,
            seed,
            overlap_classes: 0,
            test_samples_per_class: None,
        })
        .unwrap()
    }

    #[test]
    fn labeled_batch_pairs_respect_classes() {
        let d = small_data(1);
        let mut rng = seeded(3, Stream::LabeledBatches);
        let anchors: Vec<usize> = (0..12).collect();
        let b = sample_labeled_batch(&d.labeled, &anchors, &mut rng);
        assert_eq!(b.pairs.positive.len(), 12);
        assert_eq!(b.pairs.negative.len(), 12);
        assert_eq!(b.inputs.rows(), 36);
        for &(i, j) in &b.pairs.positive {
            assert_eq!(b.class_index[i], b.class_index[j]);
            assert_ne!(b.inputs.row(i), b.inputs.row(j));
        }
        for &(i, j) in &b.pairs.negative {
            assert_ne!(b.class_index[i], b.class_index[j]);
        }
    }

    #[test]
    fn singleton_class_yields_no_positive() {
        let set = LabeledSet::new(
            Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap(),
            vec![0, 0, 1],
        )
        .unwrap();
        let mut rng = seeded(0, Stream::LabeledBatches);
        let b = sample_labeled_batch(&set, &[2], &mut rng);
        assert!(b.pairs.positive.is_empty());
        assert_eq!(b.pairs.negative.len(), 1);
        assert!(ClassIndex::new(&set).warnings()[0].contains("class 1"));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = small_data(2);
        let cfg = TrainConfig {
            epochs_teacher: 0,
            ..small_cfg()
        };
        let t = train_teacher(&d.labeled, &cfg).unwrap();
        assert_eq!(t.params, init_params(&cfg, 6, 4).unwrap());
        assert!(t.steps.is_empty());
    }

    #[test]
    fn step_total_matches_components() {
        let d = small_data(3);
        let cfg = small_cfg();
        let s = self_train(&d.labeled, &d.unlabeled, None, &cfg).unwrap();
        assert!(!s.history.epochs().is_empty());
        let t = train_teacher(&d.labeled, &cfg).unwrap();
        let (pseudo, _) = generate_pseudo_labels(
            &t.params,
            &d.unlabeled,
            PseudoLabelOptions::from_config(&cfg, 0),
        )
        .unwrap();
        let b = BasisMatrix::random(4, 4, 0).unwrap();
        let w = warmup_basis(
            &t.params,
            b,
            GaussStats::new(0.99).unwrap(),
            &d.labeled,
            Some(&pseudo),
            10,
            &cfg,
        )
        .unwrap();
        let st = train_student(
            &d.labeled,
            Some(&pseudo),
            &cfg,
            &t.params,
            Some(w.basis),
            w.stats,
        )
        .unwrap();
        for r in &st.steps {
            assert!((r.total - r.weighted_total(cfg.lambda1, cfg.lambda2)).abs() <= 1e-10);
        }
    }

    #[test]
    fn lambda_zero_student_reproduces_teacher() {
        let d = small_data(4);
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..small_cfg()
        };
        let teacher = train_teacher(&d.labeled, &cfg).unwrap();
        let init = init_params(&cfg, 6, 4).unwrap();
        let (pseudo, _) = generate_pseudo_labels(
            &teacher.params,
            &d.unlabeled,
            PseudoLabelOptions::from_config(&cfg, 0),
        )
        .unwrap();
        let b = BasisMatrix::random(4, 4, 0).unwrap();
        let st = train_student(
            &d.labeled,
            Some(&pseudo),
            &cfg,
            &init,
            Some(b),
            GaussStats::new(0.99).unwrap(),
        )
        .unwrap();
        assert_eq!(st.params, teacher.params);
        let a: Vec<f64> = st.steps.iter().map(|s| s.labeled_rank).collect();
        let b: Vec<f64> = teacher.steps.iter().map(|s| s.labeled_rank).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn k1_pseudo_labels_all_zero_and_deterministic() {
        let d = small_data(5);
        let t = init_params(&small_cfg(), 6, 4).unwrap();
        let opts = PseudoLabelOptions {
            k: 1,
            restarts: 1,
            max_iter: 10,
            seed: 0,
        };
        let (p, _) = generate_pseudo_labels(&t, &d.unlabeled, opts).unwrap();
        assert!(p.labels.iter().all(|&l| l == 0));
        let opts3 = PseudoLabelOptions { k: 3, ..opts };
        assert_eq!(
            generate_pseudo_labels(&t, &d.unlabeled, opts3).unwrap(),
            generate_pseudo_labels(&t, &d.unlabeled, opts3).unwrap()
        );
        let too_many = PseudoLabelOptions { k: 1000, ..opts };
        assert!(generate_pseudo_labels(&t, &d.unlabeled, too_many).is_err());
    }

    #[test]
    fn warmup_zero_iters_is_identity() {
        let d = small_data(6);
        let t = init_params(&small_cfg(), 6, 4).unwrap();
        let b = BasisMatrix::random(4, 4, 1).unwrap();
        let st = GaussStats::new(0.9).unwrap();
        let w = warmup_basis(&t, b.clone(), st, &d.labeled, None, 0, &small_cfg()).unwrap();
        assert_eq!(w.basis, b);
        assert_eq!(w.stats, st);
    }

    #[test]
    fn rounds_chain_teacher_ids() {
        let d = small_data(7);
        let cfg = TrainConfig {
            self_train_rounds: 2,
            ..small_cfg()
        };
        let s = self_train(&d.labeled, &d.unlabeled, Some(&d.test), &cfg).unwrap();
        let r = s.history.rounds();
        assert_eq!(r.len(), 2);
        assert_eq!(r[1].teacher_id, r[0].student_id);
        assert_eq!(s.round_students.len(), 2);
        assert_eq!(checkpoint_id(&s.round_students[0]), r[0].student_id);
        assert_eq!(s.student, s.round_students[1]);
        assert!(r[0].teacher_eval.is_some() && r[1].student_eval.is_some());
        assert_eq!(r[1].teacher_eval, r[0].student_eval);
    }

    #[test]
    fn one_round_fits_one_teacher_and_one_student() {
        let d = small_data(8);
        let s = self_train(&d.labeled, &d.unlabeled, None, &small_cfg()).unwrap();
        let phases: Vec<Phase> = s.history.epochs().iter().map(|e| e.phase).collect();
        assert_eq!(phases.iter().filter(|&&p| p == Phase::Teacher).count(), 5);
        assert_eq!(phases.iter().filter(|&&p| p == Phase::Warmup).count(), 1);
        assert_eq!(phases.iter().filter(|&&p| p == Phase::Student).count(), 5);
        assert_eq!(s.history.rounds().len(), 1);
    }

    #[test]
    fn folds_shape_contract() {
        let d = small_data(9);
        let cfg = TrainConfig {
            folds: 2,
            embedding_dim: 8,
            ..small_cfg()
        };
        let out = run_folds(&d.labeled, &d.unlabeled, Some(&d.test), &cfg).unwrap();
        assert_eq!(out.model.parts.len(), 2);
        assert!(out.model.parts.iter().all(|p| p.output_dim() == 4));
        assert_eq!(out.model.output_dim(), 8);
        let e = out.model.embed(d.test.features()).unwrap();
        assert_eq!(e.cols(), 8);
        for r in e.iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-12);
        }
        assert_eq!(
            out.folds[1].history.rounds()[0].teacher_id,
            checkpoint_id(&out.folds[0].student)
        );
        let train0 = fold_training_set(&d.labeled, 2, 0);
        assert_eq!(train0.classes(), vec![1, 3]);
    }

    #[test]
    fn single_fold_is_self_train() {
        let d = small_data(10);
        let cfg = small_cfg();
        let f = run_folds(&d.labeled, &d.unlabeled, None, &cfg).unwrap();
        let s = self_train(&d.labeled, &d.unlabeled, None, &cfg).unwrap();
        assert_eq!(f.model.parts, vec![s.student]);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let d = small_data(11);
        let cfg = small_cfg();
        let a = self_train(&d.labeled, &d.unlabeled, Some(&d.test), &cfg).unwrap();
        let b = self_train(&d.labeled, &d.unlabeled, Some(&d.test), &cfg).unwrap();
        assert_eq!(a, b);
    }
}
