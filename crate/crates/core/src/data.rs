//! In-memory datasets. Training entry points take [`LabeledSet`] and
//! [`UnlabeledSet`] only; true labels of unlabeled samples live in a separate
//! [`GroundTruth`] that no training function accepts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Feature rows with an optional class id each, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<Option<usize>>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "dataset labels",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                context: "dataset features",
            });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// True when every row carries a class id (an empty set counts as labeled).
    pub fn is_labeled(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn into_labeled(self) -> Result<LabeledSet> {
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::InvalidDataset(format!("row {i} is unlabeled"))))
            .collect::<Result<Vec<_>>>()?;
        LabeledSet::new(self.features, labels)
    }

    /// Drops any class ids.
    pub fn into_unlabeled(self) -> UnlabeledSet {
        UnlabeledSet {
            features: self.features,
        }
    }
}

impl From<LabeledSet> for Dataset {
    fn from(set: LabeledSet) -> Self {
        let labels = set.labels.into_iter().map(Some).collect();
        Self {
            features: set.features,
            labels,
        }
    }
}

impl From<UnlabeledSet> for Dataset {
    fn from(set: UnlabeledSet) -> Self {
        let labels = vec![None; set.features.rows()];
        Self {
            features: set.features,
            labels,
        }
    }
}

/// Samples with ground-truth class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "labeled set labels",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                context: "labeled features",
            });
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Sorted distinct class ids.
    pub fn classes(&self) -> Vec<usize> {
        self.class_sizes().into_keys().collect()
    }

    pub fn class_sizes(&self) -> BTreeMap<usize, usize> {
        let mut sizes = BTreeMap::new();
        for &l in &self.labels {
            *sizes.entry(l).or_insert(0) += 1;
        }
        sizes
    }

    /// Rows whose class satisfies `keep`, in original order.
    pub fn filter_classes(&self, keep: impl Fn(usize) -> bool) -> LabeledSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        LabeledSet {
            features: self.features.select_rows(&idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Samples without class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    features: Matrix,
}

impl UnlabeledSet {
    pub fn new(features: Matrix) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::NonFinite {
                context: "unlabeled features",
            });
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Unlabeled samples annotated with cluster ids, plus the checkpoint id of the
/// teacher that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    pub samples: UnlabeledSet,
    pub labels: Vec<usize>,
    pub k: usize,
    pub teacher_id: String,
}

impl PseudoLabeledSet {
    pub fn new(
        samples: UnlabeledSet,
        labels: Vec<usize>,
        k: usize,
        teacher_id: String,
    ) -> Result<Self> {
        if labels.len() != samples.len() {
            return Err(Error::DimensionMismatch {
                context: "pseudo labels",
                expected: samples.len(),
                found: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        Ok(Self {
            samples,
            labels,
            k,
            teacher_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// True class ids of an unlabeled set, used only for scoring purity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(pub Vec<usize>);

impl GroundTruth {
    pub fn labels(&self) -> &[usize] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_and_classes() {
        let m = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let d = Dataset::new(m.clone(), vec![Some(4), Some(1), Some(4)]).unwrap();
        assert!(d.is_labeled());
        let l = d.into_labeled().unwrap();
        assert_eq!(l.classes(), vec![1, 4]);
        assert_eq!(l.class_sizes()[&4], 2);
        let only4 = l.filter_classes(|c| c == 4);
        assert_eq!(only4.features().as_slice(), &[0.0, 2.0]);

        let partial = Dataset::new(m, vec![Some(0), None, Some(1)]).unwrap();
        assert!(!partial.is_labeled());
        assert!(partial.clone().into_labeled().is_err());
        assert_eq!(partial.into_unlabeled().len(), 3);
    }

    #[test]
    fn pseudo_labels_checked_against_k() {
        let u = UnlabeledSet::new(Matrix::zeros(2, 1)).unwrap();
        assert!(PseudoLabeledSet::new(u.clone(), vec![0, 2], 2, "x".into()).is_err());
        assert!(PseudoLabeledSet::new(u, vec![0, 1], 2, "x".into()).is_ok());
    }
}
