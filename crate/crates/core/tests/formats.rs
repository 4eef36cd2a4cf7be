//! Round trips of every text format over generated values: reading a written
//! value gives it back bit for bit, and writing it again reproduces the file.

use proptest::prelude::*;
use slade_core::basis::BasisMatrix;
use slade_core::cluster::ClusterModel;
use slade_core::data::{Dataset, GroundTruth, PseudoLabeledSet, UnlabeledSet};
use slade_core::formats::*;
use slade_core::model::EmbeddingParams;
use slade_core::numerics::Matrix;

fn real() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
    ]
}

fn matrix(max_rows: usize, max_cols: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(real(), r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
    })
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #[test]
    fn dataset_round_trip(
        (features, labels) in matrix(12, 6).prop_flat_map(|m| {
            let n = m.rows();
            (Just(m), prop::collection::vec(prop::option::of(0usize..50), n))
        })
    ) {
        let data = Dataset::new(features, labels).unwrap();
        let text = write_dataset(&data);
        let back = read_dataset(&text).unwrap();
        prop_assert_eq!(bits(&back.features), bits(&data.features));
        prop_assert_eq!(&back.labels, &data.labels);
        prop_assert_eq!(write_dataset(&back), text);
    }

    #[test]
    fn params_round_trip(
        seed in any::<u64>(),
        dims in prop::collection::vec(1usize..6, 2..5),
        normalize in any::<bool>(),
    ) {
        let params = EmbeddingParams::init(seed, &dims, normalize).unwrap();
        let text = write_params(&params);
        let back = read_params(&text).unwrap();
        prop_assert_eq!(&back, &params);
        prop_assert_eq!(checkpoint_id(&back), checkpoint_id(&params));
        prop_assert_eq!(write_params(&back), text);
    }

    #[test]
    fn basis_round_trip(m in matrix(8, 6)) {
        let basis = BasisMatrix::new(m).unwrap();
        let text = write_basis(&basis);
        let back = read_basis(&text).unwrap();
        prop_assert_eq!(bits(back.matrix()), bits(basis.matrix()));
        prop_assert_eq!(write_basis(&back), text);
    }

    #[test]
    fn kmeans_round_trip(centers in matrix(6, 4), inertia in 0.0..1e9f64) {
        let model = ClusterModel { k: centers.rows(), centers, inertia };
        let text = write_kmeans(&model);
        let back = read_kmeans(&text).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(write_kmeans(&back), text);
    }

    #[test]
    fn pseudo_labels_round_trip(
        (features, k, labels) in matrix(10, 3).prop_flat_map(|m| {
            let n = m.rows();
            (Just(m), 1usize..5).prop_flat_map(move |(m, k)| (Just(m), Just(k), prop::collection::vec(0..k, n)))
        }),
        id in "[0-9a-f]{16}",
    ) {
        let samples = UnlabeledSet::new(features).unwrap();
        let set = PseudoLabeledSet::new(samples.clone(), labels, k, id).unwrap();
        let text = write_pseudo_labels(&set);
        let back = read_pseudo_labels(&text, samples).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(write_pseudo_labels(&back), text);
    }

    #[test]
    fn truth_round_trip(labels in prop::collection::vec(0usize..1000, 0..40)) {
        let truth = GroundTruth(labels);
        let text = write_truth(&truth);
        prop_assert_eq!(read_truth(&text).unwrap(), truth);
    }
}

#[test]
fn files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/params.txt");
    let params = EmbeddingParams::init(5, &[3, 4, 2], true).unwrap();
    write_text(&path, &write_params(&params)).unwrap();
    assert_eq!(load_params(&path).unwrap(), params);
}

#[test]
fn every_reader_rejects_a_foreign_header() {
    let params = write_params(&EmbeddingParams::init(1, &[2, 2], true).unwrap());
    assert!(read_dataset(&params).is_err());
    assert!(read_basis(&params).is_err());
    assert!(read_kmeans(&params).is_err());
    assert!(read_truth(&params).is_err());
    let samples = UnlabeledSet::new(Matrix::zeros(1, 2)).unwrap();
    assert!(read_pseudo_labels(&params, samples).is_err());
}
