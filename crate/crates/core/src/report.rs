//! Run reports: a TOML record of the config, per-epoch losses, per-round
//! checkpoints and evaluations of one pipeline run.
//!
//! Reports hold no wall-clock times or file paths, so two runs with the same
//! inputs and config serialize to identical bytes.

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::retrieval::RetrievalReport;
use crate::trainer::{EpochRecord, FoldOutcome, History, PipelineState, RoundRecord};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub student_id: String,
    pub eval: Option<RetrievalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub command: String,
    pub seed: u64,
    pub final_eval: Option<RetrievalReport>,
    pub warnings: Vec<String>,
    pub config: TrainConfig,
    pub rounds: Vec<RoundRecord>,
    pub folds: Vec<FoldRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunReport {
    pub fn new(command: &str, cfg: &TrainConfig) -> Self {
        Self {
            version: REPORT_VERSION,
            command: command.to_string(),
            seed: cfg.seed,
            final_eval: None,
            warnings: Vec::new(),
            config: cfg.clone(),
            rounds: Vec::new(),
            folds: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn add_history(&mut self, history: &History) {
        self.epochs.extend_from_slice(history.epochs());
        self.rounds.extend_from_slice(history.rounds());
        self.warnings.extend_from_slice(history.warnings());
    }

    pub fn from_pipeline(command: &str, cfg: &TrainConfig, state: &PipelineState) -> Self {
        let mut r = Self::new(command, cfg);
        r.add_history(&state.history);
        r.final_eval = state
            .history
            .rounds()
            .last()
            .and_then(|x| x.student_eval.clone());
        r
    }

    pub fn from_folds(command: &str, cfg: &TrainConfig, outcome: &FoldOutcome) -> Self {
        let mut r = Self::new(command, cfg);
        for state in &outcome.folds {
            r.add_history(&state.history);
        }
        r.folds = outcome
            .folds
            .iter()
            .zip(&outcome.fold_evals)
            .enumerate()
            .map(|(fold, (state, eval))| FoldRecord {
                fold,
                student_id: crate::formats::checkpoint_id(&state.student),
                eval: eval.clone(),
            })
            .collect();
        r.final_eval = outcome.concat_eval.clone();
        r
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report fields always serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text)
            .map_err(|e| Error::InvalidDataset(format!("run report: {}", e.message())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synth, SynthSpec};
    use crate::trainer::self_train;

    #[test]
    fn report_round_trips_and_is_reproducible() {
        let data = generate_synth(&SynthSpec {
            seen_classes: 3,
            unseen_classes: 2,
            samples_per_class: 8,
            dim: 4,
            center_separation: 4.0,
            within_std: 0.5,
            seed: 9,
            overlap_classes: 0,
            test_samples_per_class: Some(4),
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs_teacher: 2,
            epochs_student: 2,
            basis_warmup_iters: 3,
            clusters: 2,
            hidden_dims: vec![16],
            embedding_dim: 4,
            batch_size: 8,
            self_train_rounds: 2,
            ..TrainConfig::default()
        };
        let run = || {
            let state = self_train(&data.labeled, &data.unlabeled, Some(&data.test), &cfg).unwrap();
            RunReport::from_pipeline("self-train", &cfg, &state).to_toml()
        };
        let text = run();
        assert_eq!(text, run());
        let back = RunReport::from_toml(&text).unwrap();
        assert_eq!(back.rounds.len(), 2);
        assert_eq!(back.config, cfg);
        assert_eq!(back.to_toml(), text);
        assert!(back.final_eval.is_some());
    }

    #[test]
    fn garbage_report_is_rejected() {
        assert!(RunReport::from_toml("version = \"x\"").is_err());
    }
}
