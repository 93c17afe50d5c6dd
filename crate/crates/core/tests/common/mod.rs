//! Brute-force oracles and random instance builders shared by the test targets.
#![allow(dead_code)]

use pointsmile::eval::{FeatureTable, Split};
use pointsmile::geometry::PointCloud;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cloud(r: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect();
    PointCloud::new(pts).unwrap()
}

/// Integer lattice points, so many pairwise distances tie exactly.
pub fn lattice_cloud(r: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let pts = (0..n)
        .map(|_| [0, 1, 2].map(|_| r.random_range(-2i32..=2) as f64))
        .collect();
    PointCloud::new(pts).unwrap()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Full sort of every other point by (distance, index).
pub fn knn_oracle(cloud: &PointCloud, k: usize) -> Vec<Vec<usize>> {
    let p = cloud.points();
    (0..p.len())
        .map(|i| {
            let mut all: Vec<usize> = (0..p.len()).filter(|&j| j != i).collect();
            all.sort_by(|&a, &b| d2(&p[i], &p[a]).total_cmp(&d2(&p[i], &p[b])).then(a.cmp(&b)));
            all.truncate(k);
            all
        })
        .collect()
}

/// Recomputes every distance to the chosen set at each pick.
pub fn fps_oracle(cloud: &PointCloud, m: usize, start: usize) -> Vec<usize> {
    let p = cloud.points();
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = None::<(f64, usize)>;
        for j in 0..p.len() {
            if chosen.contains(&j) {
                continue;
            }
            let d = chosen.iter().map(|&c| d2(&p[j], &p[c])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, j));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

pub fn random_table(r: &mut ChaCha8Rng, rows: usize, width: usize, classes: usize) -> FeatureTable {
    let labels: Vec<usize> = (0..rows).map(|i| i % classes).collect();
    let features = labels
        .iter()
        .flat_map(|&l| (0..width).map(move |c| if c % classes == l { 1.0 } else { 0.0 }).collect::<Vec<_>>())
        .map(|v| v + r.random_range(-1.0..1.0))
        .collect();
    FeatureTable::new(width, features, labels).unwrap()
}

/// Cosine-distance kNN accuracy by exhaustive sort and explicit vote count.
pub fn knn_probe_oracle(train: &FeatureTable, test: &FeatureTable, k: usize) -> f64 {
    let classes = train.labels.iter().max().unwrap() + 1;
    let mut hits = 0;
    for i in 0..test.len() {
        let mut idx: Vec<usize> = (0..train.len()).collect();
        let dist = |j: usize| 1.0 - cosine(train.row(j), test.row(i));
        idx.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
        let mut votes = vec![0; classes];
        for &j in &idx[..k] {
            votes[train.labels[j]] += 1;
        }
        let top = *votes.iter().max().unwrap();
        let pred = votes.iter().position(|&v| v == top).unwrap();
        hits += usize::from(pred == test.labels[i]);
    }
    hits as f64 / test.len() as f64
}

pub fn split_halves(t: &FeatureTable) -> (FeatureTable, FeatureTable) {
    let n = t.len();
    let train: Vec<usize> = (0..n).filter(|i| i % 3 != 0).collect();
    let test: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
    (t.subset(&train, Split::Train), t.subset(&test, Split::Test))
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
}

/// `S_ij = cos(a_i, b_j) / tau` evaluated directly.
pub fn similarity_oracle(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    a.iter().map(|ai| b.iter().map(|bj| cosine(ai, bj) / tau).collect()).collect()
}

/// Median of an odd-length sample.
pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}
