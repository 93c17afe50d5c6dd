mod common;

use pointsmile::eval::{self, Split};
use pointsmile::geometry::{self, PointCloud};
use pointsmile::loss::{self, SimilarityAxis};
use pointsmile::tensor::{Graph, Tensor};
use rand::Rng;

#[test]
fn knn_matches_exhaustive_sort() {
    let mut r = common::rng(1);
    for t in 0..80 {
        let n = r.random_range(2..=50usize);
        let cloud = if t % 2 == 0 {
            common::random_cloud(&mut r, n)
        } else {
            common::lattice_cloud(&mut r, n)
        };
        let k = r.random_range(1..n);
        let got = geometry::knn(&cloud, k).unwrap();
        assert_eq!(got.rows(), n);
        for (i, want) in common::knn_oracle(&cloud, k).iter().enumerate() {
            assert_eq!(got.row(i), &want[..], "instance {t} point {i}");
        }
    }
}

#[test]
fn knn_rejects_bad_k() {
    let cloud = common::random_cloud(&mut common::rng(2), 5);
    assert!(geometry::knn(&cloud, 0).is_err());
    assert!(geometry::knn(&cloud, 5).is_err());
}

#[test]
fn fps_matches_recomputed_greedy() {
    let mut r = common::rng(3);
    for t in 0..80 {
        let n = r.random_range(1..=40usize);
        let cloud = if t % 2 == 0 {
            common::random_cloud(&mut r, n)
        } else {
            common::lattice_cloud(&mut r, n)
        };
        let m = r.random_range(1..=n);
        let start = r.random_range(0..n);
        assert_eq!(
            geometry::fps(&cloud, m, start).unwrap(),
            common::fps_oracle(&cloud, m, start),
            "instance {t}"
        );
    }
}

#[test]
fn fps_on_duplicates_and_bad_arguments() {
    let cloud = PointCloud::new(vec![[0.0; 3]; 4]).unwrap();
    assert_eq!(geometry::fps(&cloud, 4, 2).unwrap(), vec![2, 0, 1, 3]);
    assert!(geometry::fps(&cloud, 5, 0).is_err());
    assert!(geometry::fps(&cloud, 2, 4).is_err());
}

#[test]
fn knn_probe_matches_exhaustive_vote() {
    let mut r = common::rng(4);
    for t in 0..80 {
        let rows = r.random_range(6..=60usize);
        let width = r.random_range(1..=8usize);
        let classes = r.random_range(2..=4usize);
        let table = common::random_table(&mut r, rows, width, classes);
        let (train, test) = common::split_halves(&table);
        let k = r.random_range(1..=train.len().min(9));
        let got = eval::knn_probe(&train, &test, k).unwrap();
        assert_eq!(got, common::knn_probe_oracle(&train, &test, k), "instance {t}");
    }
}

#[test]
fn knn_vote_tie_goes_to_smaller_label() {
    let train = eval::FeatureTable::new(1, vec![1.0, 1.0], vec![1, 0]).unwrap().subset(&[0, 1], Split::Train);
    let test = eval::FeatureTable::new(1, vec![1.0], vec![0]).unwrap();
    assert_eq!(eval::knn_predict(&train, &test, 2).unwrap(), vec![0]);
}

#[test]
fn feature_similarity_matches_direct_cosine() {
    let mut r = common::rng(5);
    for t in 0..80 {
        let b = r.random_range(1..=12usize);
        let p = r.random_range(1..=10usize);
        let tau = r.random_range(0.05..2.0);
        let (za, zb) = (common::random_matrix(&mut r, b, p), common::random_matrix(&mut r, b, p));
        let want = common::similarity_oracle(&za, &zb, tau);
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::from_rows(&za).unwrap());
        let vb = g.constant(Tensor::from_rows(&zb).unwrap());
        let s = loss::feature_similarity(&mut g, va, vb, tau).unwrap();
        let value = loss::similarity_matrix(
            &Tensor::from_rows(&za).unwrap(),
            &Tensor::from_rows(&zb).unwrap(),
            tau,
            SimilarityAxis::FeatureRows,
        )
        .unwrap();
        for i in 0..b {
            for j in 0..b {
                let got = g.value(s).data()[i * b + j];
                assert!((got - want[i][j]).abs() <= 1e-6, "instance {t} ({i},{j})");
                assert_eq!(got, value.values.data()[i * b + j]);
            }
        }
    }
}

#[test]
fn class_similarity_uses_columns() {
    let mut r = common::rng(6);
    let (ya, yb) = (common::random_matrix(&mut r, 5, 3), common::random_matrix(&mut r, 5, 3));
    let cols = |m: &[Vec<f64>]| -> Vec<Vec<f64>> { (0..3).map(|c| m.iter().map(|row| row[c]).collect()).collect() };
    let want = common::similarity_oracle(&cols(&ya), &cols(&yb), 1.0);
    let s = loss::similarity_matrix(
        &Tensor::from_rows(&ya).unwrap(),
        &Tensor::from_rows(&yb).unwrap(),
        1.0,
        SimilarityAxis::ClassColumns,
    )
    .unwrap();
    assert_eq!(s.values.shape(), &[3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            assert!((s.values.data()[i * 3 + j] - want[i][j]).abs() <= 1e-12);
        }
    }
}
