//! Finite-difference audit of every analytic gradient in the crate.
//!
//! Each check draws random instances until it has compared at least the
//! requested number of coordinates. Instances that sit within a few `eps` of
//! a hinge corner are redrawn, since central differences are meaningless
//! across a kink.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::basis::BasisMatrix;
use crate::error::Result;
use crate::losses::{
    backprop_pair_similarities, basis_ce_loss, batch_pair_similarities, contrastive_rank_loss,
    global_ce_loss, local_ce_pair_loss, pair_distance, sd_loss, GaussStats, PairSet,
    RankingMargins, ScoredPair, SdConfig, SimilarityLoss,
};
use crate::model::{EmbeddingBatch, EmbeddingParams};
use crate::numerics::{finite_diff_gradient, l2_normalize, relative_error, Matrix};
use crate::rng::{seeded, Stream};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_PROBES: usize = 100;

/// Distance kept between any hinge argument and its corner.
const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub probes: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            probes: DEFAULT_PROBES,
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tolerance: f64,
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct Tally {
    probes: usize,
    worst: f64,
}

impl Tally {
    fn new() -> Self {
        Self {
            probes: 0,
            worst: 0.0,
        }
    }

    fn compare(&mut self, analytic: &[f64], numeric: &[f64]) {
        debug_assert_eq!(analytic.len(), numeric.len());
        for (a, n) in analytic.iter().zip(numeric) {
            self.worst = self.worst.max(relative_error(*a, *n));
            self.probes += 1;
        }
    }

    fn finish(self, name: &str, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            probes: self.probes,
            max_relative_error: self.worst,
            passed: self.worst < tolerance && self.worst.is_finite(),
        }
    }
}

fn uniform_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn uniform_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<Matrix> {
    Matrix::from_rows(&uniform_rows(rng, n, d))
}

fn unit_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Result<EmbeddingBatch> {
    let rows = uniform_rows(rng, n, d)
        .iter()
        .map(|r| l2_normalize(r))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingBatch::new(Matrix::from_rows(&rows)?, true)
}

fn raw(m: Matrix) -> EmbeddingBatch {
    EmbeddingBatch::new(m, false).expect("finite probe matrix")
}

fn similarities(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-0.95..0.95)).collect()
}

/// Ranking loss on raw (not normalized) embeddings. The loss itself treats
/// rows as points, so perturbing one coordinate is a valid probe.
fn check_ranking(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let margins = RankingMargins::new(0.2, 1.0)?;
    let mut tally = Tally::new();
    while tally.probes < opts.probes {
        let (n, d) = (6, 4);
        let batch = unit_batch(rng, n, d)?;
        let mut pairs = PairSet::default();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    pairs.positive.push((i, j));
                } else {
                    pairs.negative.push((i, j));
                }
            }
        }
        let near_kink = pairs.positive.iter().any(|&(i, j)| {
            (pair_distance(batch.row(i), batch.row(j)) - margins.m_pos).abs() < KINK_CLEARANCE
        }) || pairs.negative.iter().any(|&(i, j)| {
            (margins.m_neg - pair_distance(batch.row(i), batch.row(j))).abs() < KINK_CLEARANCE
        });
        if near_kink {
            continue;
        }
        let analytic = contrastive_rank_loss(&batch, &pairs, margins)?.grad_embeddings;
        let numeric = finite_diff_gradient(
            |v| {
                let e = raw(Matrix::from_vec(n, d, v.to_vec()).expect("shape"));
                contrastive_rank_loss(&e, &pairs, margins)
                    .expect("valid pairs")
                    .loss
            },
            batch.matrix().as_slice(),
            opts.eps,
        );
        tally.compare(analytic.as_slice(), &numeric);
    }
    Ok(tally.finish("ranking", opts.tolerance))
}

fn check_basis_ce(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut tally = Tally::new();
    while tally.probes < opts.probes {
        let (n, d, k) = (4, 3, 5);
        let batch = unit_batch(rng, n, d)?;
        let w = uniform_matrix(rng, k, d)?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let basis = BasisMatrix::new(w.clone())?;
        let out = basis_ce_loss(&basis, &batch, &labels)?;
        let numeric_w = finite_diff_gradient(
            |v| {
                let b = BasisMatrix::new(Matrix::from_vec(k, d, v.to_vec()).expect("shape"))
                    .expect("finite");
                basis_ce_loss(&b, &batch, &labels)
                    .expect("valid labels")
                    .loss
            },
            w.as_slice(),
            opts.eps,
        );
        tally.compare(out.grad_basis.as_slice(), &numeric_w);
        let numeric_f = finite_diff_gradient(
            |v| {
                let e = raw(Matrix::from_vec(n, d, v.to_vec()).expect("shape"));
                basis_ce_loss(&basis, &e, &labels)
                    .expect("valid labels")
                    .loss
            },
            batch.matrix().as_slice(),
            opts.eps,
        );
        tally.compare(out.grad_embeddings.as_slice(), &numeric_f);
    }
    Ok(tally.finish("basis_ce", opts.tolerance))
}

/// Projected cosine similarities, probed through a random linear readout.
fn check_pair_similarity(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut tally = Tally::new();
    while tally.probes < opts.probes {
        let (n, d, k) = (5, 4, 3);
        let batch = unit_batch(rng, n, d)?;
        let w = uniform_matrix(rng, k, d)?;
        let basis = BasisMatrix::new(w.clone())?;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let sims = batch_pair_similarities(&basis, &batch, &labels)?;
        let all: Vec<ScoredPair> = sims
            .positives
            .iter()
            .chain(&sims.negatives)
            .copied()
            .collect();
        let weights: Vec<f64> = (0..all.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let objective = |b: &BasisMatrix, e: &EmbeddingBatch| {
            let s = batch_pair_similarities(b, e, &labels).expect("valid batch");
            s.positives
                .iter()
                .chain(&s.negatives)
                .zip(&weights)
                .map(|(p, w)| p.s * w)
                .sum::<f64>()
        };
        let mut gw = Matrix::zeros(k, d);
        let mut gf = Matrix::zeros(n, d);
        backprop_pair_similarities(&basis, &batch, &all, &weights, &mut gw, &mut gf);
        let nw = finite_diff_gradient(
            |v| {
                objective(
                    &BasisMatrix::new(Matrix::from_vec(k, d, v.to_vec()).expect("shape"))
                        .expect("finite"),
                    &batch,
                )
            },
            w.as_slice(),
            opts.eps,
        );
        tally.compare(gw.as_slice(), &nw);
        let nf = finite_diff_gradient(
            |v| {
                objective(
                    &basis,
                    &raw(Matrix::from_vec(n, d, v.to_vec()).expect("shape")),
                )
            },
            batch.matrix().as_slice(),
            opts.eps,
        );
        tally.compare(gf.as_slice(), &nf);
    }
    Ok(tally.finish("pair_similarity", opts.tolerance))
}

/// Checks an objective over similarities, recomputing the running statistics
/// inside the probed function so the batch contribution is differentiated.
fn check_similarity_objective(
    name: &str,
    opts: &GradcheckOptions,
    rng: &mut ChaCha8Rng,
    eval: impl Fn(&GaussStats, &[f64], &[f64]) -> Option<SimilarityLoss>,
) -> Result<CheckResult> {
    let mut tally = Tally::new();
    while tally.probes < opts.probes {
        let beta = [0.0, 0.5, 0.9][rng.random_range(0..3)];
        let prior = if rng.random_bool(0.25) {
            GaussStats::new(beta)?
        } else {
            GaussStats::with_values(
                beta,
                rng.random_range(-0.5..0.9),
                rng.random_range(0.0..0.2),
                rng.random_range(-0.9..0.5),
                rng.random_range(0.0..0.2),
            )?
        };
        let (pos, neg) = (similarities(rng, 8), similarities(rng, 8));
        let updated = prior.update(&pos, &neg);
        let Some(out) = eval(&updated, &pos, &neg) else {
            continue;
        };
        let np = pos.len();
        let mut x = pos.clone();
        x.extend_from_slice(&neg);
        let numeric = finite_diff_gradient(
            |v| {
                let (p, n) = v.split_at(np);
                eval(&prior.update(p, n), p, n).map_or(f64::NAN, |l| l.loss)
            },
            &x,
            opts.eps,
        );
        let mut analytic = out.grad_pos;
        analytic.extend_from_slice(&out.grad_neg);
        tally.compare(&analytic, &numeric);
    }
    Ok(tally.finish(name, opts.tolerance))
}

fn check_embedding_backward(opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<CheckResult> {
    let mut tally = Tally::new();
    while tally.probes < opts.probes {
        let normalize = rng.random_bool(0.5);
        let dims = [3, 5, 4, 2];
        let params = EmbeddingParams::init(rng.random(), &dims, normalize)?;
        let x = uniform_matrix(rng, 3, dims[0])?;
        let readout = uniform_matrix(rng, 3, dims[3])?;
        let objective = |p: &EmbeddingParams| -> f64 {
            match p.forward(&x) {
                Ok(e) => e
                    .matrix()
                    .as_slice()
                    .iter()
                    .zip(readout.as_slice())
                    .map(|(a, b)| a * b)
                    .sum(),
                Err(_) => f64::NAN,
            }
        };
        if !objective(&params).is_finite() {
            continue;
        }
        let analytic = params.backward(&x, &readout)?.to_flat();
        let numeric = finite_diff_gradient(
            |flat| objective(&params.with_flat(flat)),
            &params.to_flat(),
            opts.eps,
        );
        tally.compare(&analytic, &numeric);
    }
    Ok(tally.finish("embedding_backward", opts.tolerance))
}

/// Runs every check with its own random stream derived from `opts.seed`.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = seeded(opts.seed, Stream::Gradcheck);
    let sd_cfg = SdConfig::new(0.5, 0.25)?;
    let hinge_clear = |s: &GaussStats| (s.mu_neg - s.mu_pos + sd_cfg.margin).abs() > KINK_CLEARANCE;
    let checks = vec![
        check_ranking(opts, &mut rng)?,
        check_basis_ce(opts, &mut rng)?,
        check_pair_similarity(opts, &mut rng)?,
        check_similarity_objective("sd", opts, &mut rng, |s, p, n| {
            hinge_clear(s).then(|| sd_loss(s, p, n, sd_cfg))
        })?,
        check_similarity_objective("local_ce", opts, &mut rng, |_, p, n| {
            Some(local_ce_pair_loss(p, n))
        })?,
        check_similarity_objective("global_ce", opts, &mut rng, |s, p, n| {
            global_ce_loss(s, p, n).ok()
        })?,
        check_embedding_backward(opts, &mut rng)?,
    ];
    Ok(GradcheckReport {
        eps: opts.eps,
        tolerance: opts.tolerance,
        checks,
    })
}
