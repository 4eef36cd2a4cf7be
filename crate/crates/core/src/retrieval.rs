//! Exact retrieval evaluation: MAP@R, R-Precision, P@1 and Recall@K over a
//! cosine-similarity ranking.
//!
//! For a query with `R` relevant gallery items (same class, self excluded):
//!
//! * `P@1` is 1 when the top-ranked item is relevant.
//! * `RP` is the fraction of the top `R` items that are relevant.
//! * `MAP@R = (1/R) Σ_{i=1..R} P(i)`, where `P(i)` is the precision over the
//!   top `i` when item `i` is relevant and 0 otherwise.
//! * `Recall@K` is 1 when any of the top `K` items is relevant.
//!
//! Report fields are means over the evaluated queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix};

/// Gallery of unit-norm embeddings with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    embeddings: Matrix,
    labels: Vec<usize>,
}

impl RetrievalIndex {
    pub fn new(embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "retrieval labels",
                expected: embeddings.rows(),
                found: labels.len(),
            });
        }
        for (i, r) in embeddings.iter_rows().enumerate() {
            if (norm(r) - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidDataset(format!(
                    "gallery row {i} is not unit-normalized"
                )));
            }
        }
        Ok(Self { embeddings, labels })
    }

    /// Normalizes every row first.
    pub fn from_raw(mut embeddings: Matrix, labels: Vec<usize>) -> Result<Self> {
        for r in 0..embeddings.rows() {
            let row = embeddings.row_mut(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::DeadEmbedding { row: r });
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Self::new(embeddings, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }
}

/// Gallery indices by descending cosine similarity to `query`, ties by
/// ascending index, with `exclude` omitted.
pub fn rank_gallery(
    index: &RetrievalIndex,
    query: &[f64],
    exclude: Option<usize>,
) -> Result<Vec<usize>> {
    if query.len() != index.embeddings.cols() {
        return Err(Error::DimensionMismatch {
            context: "query dim",
            expected: index.embeddings.cols(),
            found: query.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = index
        .embeddings
        .iter_rows()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, g)| (dot(g, query), i))
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyGallery);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

/// Mean retrieval metrics over a query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map_at_r: f64,
    pub r_precision: f64,
    pub p_at_1: f64,
    pub query_count: usize,
    pub skipped_queries: usize,
    #[serde(with = "recall_table")]
    pub recall_at_k: BTreeMap<usize, f64>,
}

/// Metrics of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryMetrics {
    pub map_at_r: f64,
    pub r_precision: f64,
    pub p_at_1: f64,
}

/// Where queries come from.
#[derive(Debug, Clone, Copy)]
pub enum Queries<'a> {
    /// Every gallery row queries the rest of the gallery.
    LeaveOneOut,
    /// Separate queries; the gallery is searched in full.
    External {
        embeddings: &'a Matrix,
        labels: &'a [usize],
    },
}

fn score_ranking(
    ranking: &[usize],
    labels: &[usize],
    label: usize,
    relevant: usize,
) -> QueryMetrics {
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (pos, &g) in ranking.iter().take(relevant).enumerate() {
        if labels[g] == label {
            hits += 1;
            ap += hits as f64 / (pos + 1) as f64;
        }
    }
    let r = relevant as f64;
    QueryMetrics {
        map_at_r: ap / r,
        r_precision: hits as f64 / r,
        p_at_1: f64::from(u8::from(labels[ranking[0]] == label)),
    }
}

/// Evaluates every query; queries whose class has no other gallery member
/// are skipped and counted.
pub fn evaluate(
    index: &RetrievalIndex,
    queries: Queries<'_>,
    ks: &[usize],
) -> Result<RetrievalReport> {
    let (qm, qlabels, leave_one_out) = match queries {
        Queries::LeaveOneOut => (&index.embeddings, index.labels.as_slice(), true),
        Queries::External { embeddings, labels } => (embeddings, labels, false),
    };
    if qm.rows() != qlabels.len() {
        return Err(Error::DimensionMismatch {
            context: "query labels",
            expected: qm.rows(),
            found: qlabels.len(),
        });
    }
    let mut class_sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &index.labels {
        *class_sizes.entry(l).or_default() += 1;
    }

    let mut sums = (0.0, 0.0, 0.0);
    let mut recall_hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (q, &label) in qlabels.iter().enumerate() {
        let in_gallery = class_sizes.get(&label).copied().unwrap_or(0);
        let relevant = if leave_one_out {
            in_gallery - 1
        } else {
            in_gallery
        };
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        let exclude = leave_one_out.then_some(q);
        let ranking = rank_gallery(index, qm.row(q), exclude)?;
        let m = score_ranking(&ranking, &index.labels, label, relevant);
        sums.0 += m.map_at_r;
        sums.1 += m.r_precision;
        sums.2 += m.p_at_1;
        let first_hit = ranking.iter().position(|&g| index.labels[g] == label);
        for (&k, hits) in recall_hits.iter_mut() {
            if first_hit.is_some_and(|p| p < k) {
                *hits += 1;
            }
        }
        evaluated += 1;
    }
    let denom = evaluated.max(1) as f64;
    let report = RetrievalReport {
        map_at_r: sums.0 / denom,
        r_precision: sums.1 / denom,
        p_at_1: sums.2 / denom,
        query_count: evaluated,
        skipped_queries: skipped,
        recall_at_k: recall_hits
            .into_iter()
            .map(|(k, h)| (k, h as f64 / denom))
            .collect(),
    };
    if let Some(&r1) = report.recall_at_k.get(&1) {
        debug_assert_eq!(r1, report.p_at_1, "Recall@1 must equal P@1");
    }
    Ok(report)
}

/// Leave-one-out evaluation of a labeled embedding set.
pub fn evaluate_leave_one_out(index: &RetrievalIndex, ks: &[usize]) -> Result<RetrievalReport> {
    evaluate(index, Queries::LeaveOneOut, ks)
}

mod recall_table {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<usize, f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k.to_string(), *v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| D::Error::custom(format!("recall key `{k}` is not an integer")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;

    fn index(rows: &[Vec<f64>], labels: &[usize]) -> RetrievalIndex {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| l2_normalize(r).unwrap()).collect();
        RetrievalIndex::new(Matrix::from_rows(&rows).unwrap(), labels.to_vec()).unwrap()
    }

    #[test]
    fn rank_examples() {
        let idx = index(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        assert_eq!(rank_gallery(&idx, &[1.0, 0.0], None).unwrap(), vec![0, 1]);
        let tied = index(
            &[vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]],
            &[0, 1, 1],
        );
        assert_eq!(
            rank_gallery(&tied, &[1.0, 0.0], None).unwrap(),
            vec![1, 2, 0]
        );
        assert_eq!(
            rank_gallery(&tied, &[1.0, 0.0], Some(1)).unwrap(),
            vec![2, 0]
        );
        let single = index(&[vec![1.0, 0.0]], &[0]);
        assert!(matches!(
            rank_gallery(&single, &[1.0, 0.0], Some(0)),
            Err(Error::EmptyGallery)
        ));
    }

    #[test]
    fn perfect_embedding_scores_one() {
        let idx = index(
            &[
                vec![1.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ],
            &[3, 3, 7, 7, 7],
        );
        let r = evaluate_leave_one_out(&idx, &[1, 2, 4]).unwrap();
        assert_eq!((r.map_at_r, r.r_precision, r.p_at_1), (1.0, 1.0, 1.0));
        assert!(r.recall_at_k.values().all(|&v| v == 1.0));
        assert_eq!(r.query_count, 5);
    }

    #[test]
    fn definitional_fixture_r2() {
        // ranking for the query: correct, wrong, correct
        let m = score_ranking(&[0, 1, 2], &[5, 6, 5], 5, 2);
        assert_eq!(m.r_precision, 0.5);
        assert_eq!(m.map_at_r, 0.5);
        assert_eq!(m.p_at_1, 1.0);
    }

    #[test]
    fn singleton_classes_are_skipped() {
        let idx = index(
            &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]],
            &[0, 0, 1],
        );
        let r = evaluate_leave_one_out(&idx, &[1]).unwrap();
        assert_eq!(r.skipped_queries, 1);
        assert_eq!(r.query_count, 2);
    }

    #[test]
    fn external_queries_search_full_gallery() {
        let idx = index(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1]);
        let q = Matrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let r = evaluate(
            &idx,
            Queries::External {
                embeddings: &q,
                labels: &[1],
            },
            &[1],
        )
        .unwrap();
        assert_eq!(r.map_at_r, 1.0);
        assert_eq!(r.recall_at_k[&1], r.p_at_1);
    }

    #[test]
    fn report_toml_round_trip() {
        let r = RetrievalReport {
            map_at_r: 0.25,
            r_precision: 0.5,
            p_at_1: 1.0,
            query_count: 4,
            skipped_queries: 0,
            recall_at_k: [(1, 1.0), (2, 1.0), (10, 1.0)].into_iter().collect(),
        };
        let text = toml::to_string(&r).unwrap();
        assert!(text.contains("[recall_at_k]"));
        let back: RetrievalReport = toml::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
