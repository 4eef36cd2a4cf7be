//! k-means with k-means++ seeding over (normalized) teacher embeddings. The
//! cluster ids become pseudo labels for the unlabeled pool.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};
use crate::rng::{seeded, Stream};

/// Fitted centers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub centers: Matrix,
    /// Sum of squared distances from each fitted point to its nearest center.
    pub inertia: f64,
}

/// Diagnostics of one Lloyd run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansTrace {
    /// Inertia of the current assignment before each center update, then the
    /// final inertia.
    pub inertia: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub empty_repairs: usize,
}

/// Nearest center by squared Euclidean distance, lowest index on ties.
fn nearest(centers: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter_rows().enumerate() {
        let d = squared_distance(center, x);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_dims(centers: &Matrix, points: &Matrix) -> Result<()> {
    if points.cols() != centers.cols() {
        return Err(Error::DimensionMismatch {
            context: "cluster embedding dim",
            expected: centers.cols(),
            found: points.cols(),
        });
    }
    Ok(())
}

/// Maps each row to its nearest center.
pub fn assign(model: &ClusterModel, points: &Matrix) -> Result<Vec<usize>> {
    check_dims(&model.centers, points)?;
    Ok(points
        .iter_rows()
        .map(|x| nearest(&model.centers, x).0)
        .collect())
}

fn kmeans_plus_plus<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Result<Matrix> {
    let n = points.rows();
    let mut centers = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|x| squared_distance(x, points.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidClusterCount { k, samples: c });
        }
        let mut target = rng.random::<f64>() * total;
        // fall back to the last point with positive mass if rounding overshoots
        let mut pick = d2.iter().rposition(|&d| d > 0.0).unwrap();
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        centers.row_mut(c).copy_from_slice(points.row(pick));
        for (i, x) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(squared_distance(x, centers.row(c)));
        }
    }
    Ok(centers)
}

/// Re-seeds every empty cluster with the point farthest from its assigned
/// center (taken from a cluster with at least two members; lowest index on
/// ties). Returns the number of repairs.
fn repair_empty(points: &Matrix, centers: &mut Matrix, assignment: &mut [usize]) -> Result<usize> {
    let k = centers.rows();
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a] += 1;
    }
    let mut repairs = 0;
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, x) in points.iter_rows().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = squared_distance(x, centers.row(assignment[i]));
            if d > best.map_or(0.0, |b| b.1) {
                best = Some((i, d));
            }
        }
        let Some((p, _)) = best else {
            return Err(Error::InvalidClusterCount {
                k,
                samples: points.rows(),
            });
        };
        sizes[assignment[p]] -= 1;
        assignment[p] = c;
        sizes[c] = 1;
        centers.row_mut(c).copy_from_slice(points.row(p));
        repairs += 1;
    }
    Ok(repairs)
}

fn assignment_inertia(points: &Matrix, centers: &Matrix, assignment: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(x, &a)| squared_distance(x, centers.row(a)))
        .sum()
}

fn lloyd<R: Rng>(
    points: &Matrix,
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> Result<(ClusterModel, KMeansTrace)> {
    let mut centers = kmeans_plus_plus(points, k, rng)?;
    let mut assignment: Vec<usize> = points.iter_rows().map(|x| nearest(&centers, x).0).collect();
    let mut trace = KMeansTrace {
        inertia: Vec::new(),
        iterations: 0,
        converged: false,
        empty_repairs: 0,
    };
    for _ in 0..max_iter {
        trace.iterations += 1;
        trace.empty_repairs += repair_empty(points, &mut centers, &mut assignment)?;
        let before = assignment_inertia(points, &centers, &assignment);
        if let Some(&prev) = trace.inertia.last() {
            debug_assert!(
                before <= prev + 1e-9 * prev.max(1.0),
                "inertia rose: {prev} -> {before}"
            );
        }
        trace.inertia.push(before);

        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (x, &a) in points.iter_rows().zip(&assignment) {
            crate::numerics::axpy(1.0, x, sums.row_mut(a));
            counts[a] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            let inv = 1.0 / count as f64;
            for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
        let next: Vec<usize> = points.iter_rows().map(|x| nearest(&centers, x).0).collect();
        if next == assignment {
            trace.converged = true;
            break;
        }
        assignment = next;
    }
    let inertia: f64 = points.iter_rows().map(|x| nearest(&centers, x).1).sum();
    trace.inertia.push(inertia);
    Ok((
        ClusterModel {
            k,
            centers,
            inertia,
        },
        trace,
    ))
}

fn validate(points: &Matrix, k: usize, max_iter: usize) -> Result<()> {
    if k == 0 || k > points.rows() {
        return Err(Error::InvalidClusterCount {
            k,
            samples: points.rows(),
        });
    }
    if max_iter == 0 {
        return Err(Error::InvalidConfig("k-means needs max_iter >= 1".into()));
    }
    Ok(())
}

/// Single k-means++ seeded Lloyd run.
pub fn kmeans_fit(points: &Matrix, k: usize, max_iter: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_fit_traced(points, k, max_iter, seed).map(|(m, _)| m)
}

pub fn kmeans_fit_traced(
    points: &Matrix,
    k: usize,
    max_iter: usize,
    seed: u64,
) -> Result<(ClusterModel, KMeansTrace)> {
    validate(points, k, max_iter)?;
    lloyd(points, k, max_iter, &mut seeded(seed, Stream::Clustering))
}

/// Best (lowest inertia) of `restarts` runs drawn from one seeded stream;
/// the earliest run wins ties.
pub fn kmeans_fit_restarts(
    points: &Matrix,
    k: usize,
    max_iter: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterModel> {
    validate(points, k, max_iter)?;
    let mut rng = seeded(seed, Stream::Clustering);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let (model, _) = lloyd(points, k, max_iter, &mut rng)?;
        if best.as_ref().is_none_or(|b| model.inertia < b.inertia) {
            best = Some(model);
        }
    }
    Ok(best.unwrap())
}
