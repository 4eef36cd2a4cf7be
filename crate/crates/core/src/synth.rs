//! Synthetic seen/unseen class benchmark: isotropic Gaussian blobs around
//! centers placed on a sphere.
//!
//! Class ids `0..seen` are seen (labeled) classes and `seen..seen+unseen` are
//! unseen. The unlabeled set mixes every unseen class with the first
//! `overlap_classes` seen classes. The held-out test set holds fresh samples
//! of the unseen classes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{GroundTruth, LabeledSet, UnlabeledSet};
use crate::error::{Error, Result};
use crate::numerics::{norm, squared_distance, Matrix};
use crate::rng::{seeded, Stream};

/// Rejection-sampling attempts per center.
const CENTER_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub center_separation: f64,
    pub within_std: f64,
    pub seed: u64,
    /// Seen classes that also appear in the unlabeled set.
    #[serde(default)]
    pub overlap_classes: usize,
    /// Test samples per unseen class; defaults to `samples_per_class`.
    #[serde(default)]
    pub test_samples_per_class: Option<usize>,
}

impl SynthSpec {
    /// 10 seen and 10 unseen classes, 30 samples each, in 16 dimensions with
    /// centers 6 standard deviations apart.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seen_classes: 10,
            unseen_classes: 10,
            samples_per_class: 30,
            dim: 16,
            center_separation: 6.0,
            within_std: 1.0,
            seed,
            overlap_classes: 0,
            test_samples_per_class: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.center_separation > 0.0 && self.center_separation.is_finite()) {
            return bad(format!(
                "center_separation must be > 0, got {}",
                self.center_separation
            ));
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return bad(format!("within_std must be > 0, got {}", self.within_std));
        }
        if self.dim == 0 {
            return bad("dim must be >= 1".into());
        }
        if self.overlap_classes > self.seen_classes {
            return bad(format!(
                "overlap_classes {} exceeds seen_classes {}",
                self.overlap_classes, self.seen_classes
            ));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.seen_classes + self.unseen_classes
    }

    /// Distinct true classes present in the unlabeled set.
    pub fn unlabeled_class_count(&self) -> usize {
        self.unseen_classes + self.overlap_classes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub centers: Matrix,
    pub labeled: LabeledSet,
    pub unlabeled: UnlabeledSet,
    pub truth: GroundTruth,
    pub test: LabeledSet,
}

/// Centers at radius `separation` with pairwise distance at least
/// `separation`.
pub fn sample_centers(
    count: usize,
    dim: usize,
    separation: f64,
    rng: &mut impl Rng,
) -> Result<Matrix> {
    let min_sq = separation * separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(count);
    while centers.len() < count {
        let mut placed = false;
        for _ in 0..CENTER_RETRIES {
            let g: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let n = norm(&g);
            if n == 0.0 {
                continue;
            }
            let c: Vec<f64> = g.iter().map(|v| v * separation / n).collect();
            if centers.iter().all(|o| squared_distance(o, &c) >= min_sq) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::SeparationInfeasible(format!(
                "separation infeasible at this dim: placed {} of {count} centers in {dim} dimensions",
                centers.len()
            )));
        }
    }
    if centers.is_empty() {
        return Ok(Matrix::zeros(0, dim));
    }
    Matrix::from_rows(&centers)
}

fn draw(center: &[f64], std: f64, rng: &mut impl Rng) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<Matrix> {
    if rows.is_empty() {
        Ok(Matrix::zeros(0, dim))
    } else {
        Matrix::from_rows(rows)
    }
}

pub fn generate_synth(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, Stream::Synth);
    let centers = sample_centers(
        spec.class_count(),
        spec.dim,
        spec.center_separation,
        &mut rng,
    )?;
    let spc = spec.samples_per_class;

    let mut labeled_rows = Vec::new();
    let mut labeled_ids = Vec::new();
    for c in 0..spec.seen_classes {
        for _ in 0..spc {
            labeled_rows.push(draw(centers.row(c), spec.within_std, &mut rng));
            labeled_ids.push(c);
        }
    }

    let mut unlabeled: Vec<(Vec<f64>, usize)> = Vec::new();
    let unlabeled_classes = (0..spec.overlap_classes).chain(spec.seen_classes..spec.class_count());
    for c in unlabeled_classes {
        for _ in 0..spc {
            unlabeled.push((draw(centers.row(c), spec.within_std, &mut rng), c));
        }
    }
    unlabeled.shuffle(&mut rng);

    let test_spc = spec.test_samples_per_class.unwrap_or(spc);
    let mut test_rows = Vec::new();
    let mut test_ids = Vec::new();
    for c in spec.seen_classes..spec.class_count() {
        for _ in 0..test_spc {
            test_rows.push(draw(centers.row(c), spec.within_std, &mut rng));
            test_ids.push(c);
        }
    }

    let (u_rows, u_ids): (Vec<Vec<f64>>, Vec<usize>) = unlabeled.into_iter().unzip();
    Ok(SynthData {
        labeled: LabeledSet::new(rows_to_matrix(&labeled_rows, spec.dim)?, labeled_ids)?,
        unlabeled: UnlabeledSet::new(rows_to_matrix(&u_rows, spec.dim)?)?,
        truth: GroundTruth(u_ids),
        test: LabeledSet::new(rows_to_matrix(&test_rows, spec.dim)?, test_ids)?,
        centers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            seen_classes: 2,
            unseen_classes: 0,
            samples_per_class: 5,
            dim: 2,
            center_separation: 3.0,
            within_std: 0.5,
            seed: 1,
            overlap_classes: 0,
            test_samples_per_class: None,
        }
    }

    #[test]
    fn seen_only_spec_has_empty_unlabeled() {
        let d = generate_synth(&small()).unwrap();
        assert_eq!(d.labeled.len(), 10);
        assert!(d.unlabeled.is_empty());
        assert!(d.test.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let s = SynthSpec::benchmark(5);
        assert_eq!(generate_synth(&s).unwrap(), generate_synth(&s).unwrap());
        let other = SynthSpec::benchmark(6);
        assert_ne!(
            generate_synth(&s).unwrap().labeled,
            generate_synth(&other).unwrap().labeled
        );
    }

    #[test]
    fn centers_respect_separation() {
        let d = generate_synth(&SynthSpec::benchmark(2)).unwrap();
        let c = &d.centers;
        for i in 0..c.rows() {
            assert!((norm(c.row(i)) - 6.0).abs() < 1e-12);
            for j in 0..i {
                assert!(squared_distance(c.row(i), c.row(j)).sqrt() >= 6.0);
            }
        }
    }

    #[test]
    fn crowded_low_dim_sphere_is_infeasible() {
        let s = SynthSpec {
            seen_classes: 8,
            ..small()
        };
        let err = generate_synth(&s).unwrap_err();
        assert!(err
            .to_string()
            .contains("separation infeasible at this dim"));
    }

    #[test]
    fn benchmark_split_shapes_and_nearest_centroid() {
        let s = SynthSpec {
            overlap_classes: 2,
            ..SynthSpec::benchmark(3)
        };
        let d = generate_synth(&s).unwrap();
        assert_eq!(d.labeled.len(), 300);
        assert_eq!(d.unlabeled.len(), 360);
        assert_eq!(d.test.len(), 300);
        assert!(d.truth.labels().iter().all(|&c| !(2..10).contains(&c)));
        let mut correct = 0;
        let mut total = 0;
        let sets = [
            (d.labeled.features(), d.labeled.labels()),
            (d.unlabeled.features(), d.truth.labels()),
            (d.test.features(), d.test.labels()),
        ];
        for (x, y) in sets {
            for (row, &label) in x.iter_rows().zip(y) {
                let best = (0..d.centers.rows())
                    .min_by(|&a, &b| {
                        squared_distance(row, d.centers.row(a))
                            .total_cmp(&squared_distance(row, d.centers.row(b)))
                    })
                    .unwrap();
                correct += usize::from(best == label);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.99);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate_synth(&SynthSpec {
            within_std: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate_synth(&SynthSpec {
            center_separation: -1.0,
            ..small()
        })
        .is_err());
        assert!(generate_synth(&SynthSpec {
            overlap_classes: 3,
            ..small()
        })
        .is_err());
    }
}
