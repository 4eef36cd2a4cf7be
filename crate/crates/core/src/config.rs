//! Training configuration: a flat `key = value` TOML document. Unknown keys
//! are rejected, and missing keys take the defaults below.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{RankingMargins, SdConfig, SimilarityObjective};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the ranking loss on mined unlabeled pairs.
    pub lambda1: f64,
    /// Weight of the basis loss (labeled CE plus the similarity objective).
    pub lambda2: f64,
    /// Momentum of the running similarity statistics.
    pub beta: f64,
    pub sd_margin: f64,
    pub sd_lambda: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// k-means cluster count for pseudo labels.
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    /// Basis rows; 0 means one per labeled class.
    pub basis_count: usize,
    pub basis_warmup_iters: usize,
    pub basis_learning_rate: f64,
    pub epochs_teacher: usize,
    pub epochs_student: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub self_train_rounds: usize,
    pub seed: u64,
    pub folds: usize,
    /// Per-side cap on mined pairs per batch; 0 disables the cap.
    pub pair_cap: usize,
    pub sd_variant: SimilarityObjective,
    /// Thresholds become `μ+ + c·σ+` and `μ- - c·σ-`.
    pub threshold_sigma: f64,
    /// Train the basis jointly with the student.
    pub use_basis: bool,
    /// Restrict unlabeled ranking pairs to basis-mined pairs; otherwise every
    /// pseudo-labeled pair in the batch is used.
    pub use_mining: bool,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub eval_ks: Vec<usize>,
    pub student_init: StudentInit,
}

/// Starting weights for each round's student.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// The round's teacher.
    #[default]
    Teacher,
    /// The seeded initialization the first teacher started from.
    Scratch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.25,
            beta: 0.99,
            sd_margin: 0.5,
            sd_lambda: 0.1,
            margin_pos: 0.2,
            margin_neg: 1.0,
            clusters: 10,
            kmeans_restarts: 5,
            kmeans_max_iter: 100,
            basis_count: 0,
            basis_warmup_iters: 50,
            basis_learning_rate: 0.5,
            epochs_teacher: 30,
            epochs_student: 30,
            batch_size: 32,
            learning_rate: 0.1,
            self_train_rounds: 1,
            seed: 0,
            folds: 1,
            pair_cap: 0,
            sd_variant: SimilarityObjective::Sd,
            threshold_sigma: 0.0,
            use_basis: true,
            use_mining: true,
            hidden_dims: vec![32],
            embedding_dim: 16,
            eval_ks: vec![1, 2, 4, 8],
            student_init: StudentInit::Teacher,
        }
    }
}

impl TrainConfig {
    /// Parses and validates a config document.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical form with every key spelled out; `parse` of this text
    /// returns an equal config.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.lambda1) || !finite_nonneg(self.lambda2) {
            return bad(format!(
                "lambda1/lambda2 must be >= 0, got {}/{}",
                self.lambda1, self.lambda2
            ));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1), got {}", self.beta));
        }
        SdConfig::new(self.sd_margin, self.sd_lambda)?;
        RankingMargins::new(self.margin_pos, self.margin_neg)?;
        if self.clusters == 0 {
            return bad("clusters must be >= 1".into());
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, lr) in [
            ("learning_rate", self.learning_rate),
            ("basis_learning_rate", self.basis_learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if self.self_train_rounds == 0 {
            return bad("self_train_rounds must be >= 1".into());
        }
        if self.folds == 0 {
            return bad("folds must be >= 1".into());
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return bad("layer widths must be >= 1".into());
        }
        if self.embedding_dim % self.folds != 0 {
            return bad(format!(
                "embedding_dim {} is not divisible by folds {}",
                self.embedding_dim, self.folds
            ));
        }
        if !finite_nonneg(self.threshold_sigma) {
            return bad(format!(
                "threshold_sigma must be >= 0, got {}",
                self.threshold_sigma
            ));
        }
        if self.use_mining && !self.use_basis {
            return bad("use_mining requires use_basis".into());
        }
        if self.eval_ks.contains(&0) {
            return bad("eval_ks entries must be >= 1".into());
        }
        Ok(())
    }

    pub fn margins(&self) -> RankingMargins {
        RankingMargins {
            m_pos: self.margin_pos,
            m_neg: self.margin_neg,
        }
    }

    pub fn sd_config(&self) -> SdConfig {
        SdConfig {
            margin: self.sd_margin,
            lambda_var: self.sd_lambda,
        }
    }

    /// Layer widths from input to an embedding of `out_dim`.
    pub fn layer_dims(&self, input_dim: usize, out_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(out_dim);
        dims
    }

    pub fn pair_cap(&self) -> Option<usize> {
        (self.pair_cap > 0).then_some(self.pair_cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = TrainConfig::parse("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(
            (cfg.lambda1, cfg.lambda2, cfg.beta, cfg.batch_size),
            (1.0, 0.25, 0.99, 32)
        );
    }

    #[test]
    fn unknown_key_rejected() {
        let err = TrainConfig::parse("lamda1 = 1.0\n").unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("lamda1"), "{err}");
    }

    #[test]
    fn nested_table_rejected() {
        assert!(TrainConfig::parse("[trainer]\nseed = 1\n").is_err());
    }

    #[test]
    fn canonical_round_trip_is_stable() {
        let cfg =
            TrainConfig::parse("seed = 7\nsd_variant = \"global_ce\"\nlambda2 = 0.1\n").unwrap();
        let text = cfg.to_canonical();
        let again = TrainConfig::parse(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical(), text);
    }

    #[test]
    fn invalid_values_rejected() {
        for doc in [
            "beta = 1.0",
            "lambda1 = -0.5",
            "margin_pos = 1.0\nmargin_neg = 0.5",
            "folds = 3",
            "batch_size = 1",
            "use_basis = false",
            "sd_variant = \"mystery\"",
            "self_train_rounds = 0",
        ] {
            assert!(TrainConfig::parse(doc).is_err(), "{doc}");
        }
        assert!(TrainConfig::parse("use_basis = false\nuse_mining = false").is_ok());
    }
}
