//! Frozen-feature probes: feature extraction, linear and kNN classifiers,
//! stratified splitting and CSV export.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{fmt_sig, LabeledCloud};
use crate::model::{self, ModelError, ModelParams};
use crate::{par, rng};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("feature widths differ: train {train}, test {test}")]
    DimensionMismatch { train: usize, test: usize },
    #[error("training table contains a single class")]
    SingleClass,
    #[error("k = {k} is invalid for {rows} training rows")]
    InvalidK { k: usize, rows: usize },
    #[error("feature table is empty")]
    Empty,
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Multinomial logistic regression.
    #[default]
    Linear,
    /// One-vs-rest linear SVM.
    Hinge,
    Knn,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Linear => "linear",
            ProbeKind::Hinge => "hinge",
            ProbeKind::Knn => "knn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearVariant {
    Logistic,
    /// Squared hinge, one classifier per class.
    HingeOvr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeKind,
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub knn_k: usize,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe: ProbeKind::Linear,
            epochs: 500,
            lr: 1.0,
            l2: 1e-4,
            knn_k: 5,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(EvalError::InvalidConfig("test_fraction must be in (0, 1)".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.l2 >= 0.0) {
            return Err(EvalError::InvalidConfig("need lr > 0 and l2 >= 0".into()));
        }
        if self.knn_k == 0 {
            return Err(EvalError::InvalidConfig("knn_k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    All,
    Train,
    Test,
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub width: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl FeatureTable {
    pub fn new(width: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() || width == 0 {
            return Err(EvalError::Empty);
        }
        if features.len() != width * labels.len() {
            return Err(EvalError::DimensionMismatch {
                train: width * labels.len(),
                test: features.len(),
            });
        }
        Ok(Self {
            width,
            features,
            labels,
            split: Split::All,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Self {
        Self {
            width: self.width,
            features: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }
}

/// Encoder features `f` of every cloud, no augmentation.
pub fn extract(params: &ModelParams<f32>, clouds: &[LabeledCloud]) -> Result<FeatureTable> {
    let rows = par::map(clouds, |_, c| model::features(params, &c.cloud));
    let mut features = Vec::with_capacity(clouds.len() * params.dims().k);
    for r in rows {
        features.extend(r?.into_iter().map(f64::from));
    }
    FeatureTable::new(params.dims().k, features, clouds.iter().map(|c| c.label).collect())
}

/// Stratified split: within each class a seeded shuffle puts
/// `round(fraction · count)` rows into the test set.
pub fn train_test_split(table: &FeatureTable, seed: u64, test_fraction: f64) -> (FeatureTable, FeatureTable) {
    let classes = table.labels.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..table.len()).filter(|&i| table.labels[i] == c).collect();
        idx.shuffle(&mut rng::stream(&[rng::tag::SPLIT, seed, c as u64]));
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (table.subset(&train, Split::Train), table.subset(&test, Split::Test))
}

fn check_pair(train: &FeatureTable, test: &FeatureTable) -> Result<()> {
    if train.width != test.width {
        return Err(EvalError::DimensionMismatch {
            train: train.width,
            test: test.width,
        });
    }
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Column standardisation from the training rows, scaled by `1/sqrt(width)`
/// so every row has unit mean square norm.
fn standardizer(train: &FeatureTable) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (train.len() as f64, train.width);
    let mut mean = vec![0.0; d];
    for i in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for i in 0..train.len() {
        for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let norm = (d as f64).sqrt();
    let inv = var
        .iter()
        .map(|&s| if s.sqrt() > 1e-12 { 1.0 / (s.sqrt() * norm) } else { 0.0 })
        .collect();
    (mean, inv)
}

fn standardize(t: &FeatureTable, mean: &[f64], inv: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.features.len());
    for i in 0..t.len() {
        out.extend(t.row(i).iter().zip(mean).zip(inv).map(|((v, m), s)| (v - m) * s));
    }
    out
}

/// Trains one affine layer on frozen features by full-batch gradient descent
/// from zero, returning test accuracy.
pub fn linear_probe(
    train: &FeatureTable,
    test: &FeatureTable,
    variant: LinearVariant,
    epochs: usize,
    lr: f64,
    l2: f64,
) -> Result<f64> {
    check_pair(train, test)?;
    let first = train.labels[0];
    if train.labels.iter().all(|&l| l == first) {
        return Err(EvalError::SingleClass);
    }
    let classes = train.labels.iter().chain(&test.labels).max().expect("non-empty") + 1;
    let d = train.width;
    let (mean, inv) = standardizer(train);
    let x = standardize(train, &mean, &inv);
    let n = train.len();
    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let mut scores = vec![0.0; classes];
    for _ in 0..epochs {
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            for c in 0..classes {
                scores[c] = b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
            }
            let y = train.labels[i];
            match variant {
                LinearVariant::Logistic => {
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for c in 0..classes {
                        scores[c] = (scores[c] - mx).exp() / z - if c == y { 1.0 } else { 0.0 };
                    }
                }
                LinearVariant::HingeOvr => {
                    for c in 0..classes {
                        let t = if c == y { 1.0 } else { -1.0 };
                        let margin = 1.0 - t * scores[c];
                        scores[c] = if margin > 0.0 { -2.0 * t * margin } else { 0.0 };
                    }
                }
            }
            for c in 0..classes {
                let r = scores[c] / n as f64;
                if r != 0.0 {
                    gb[c] += r;
                    for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(xi) {
                        *g += r * v;
                    }
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + l2 * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    let xt = standardize(test, &mean, &inv);
    let pred: Vec<usize> = (0..test.len())
        .map(|i| {
            let xi = &xt[i * d..(i + 1) * d];
            let s: Vec<f64> = (0..classes)
                .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(xi).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            argmax(&s)
        })
        .collect();
    Ok(accuracy(&pred, &test.labels))
}

fn unit_rows(t: &FeatureTable) -> Vec<f64> {
    let mut out = Vec::with_capacity(t.features.len());
    for i in 0..t.len() {
        let r = t.row(i);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(r.iter().map(|v| if norm > 0.0 { v / norm } else { 0.0 }));
    }
    out
}

/// Majority vote of the `k` nearest training rows under cosine distance.
/// Distance ties go to the lower training index, vote ties to the smaller label.
pub fn knn_predict(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<Vec<usize>> {
    check_pair(train, test)?;
    if k == 0 || k > train.len() {
        return Err(EvalError::InvalidK { k, rows: train.len() });
    }
    let d = train.width;
    let (a, q) = (unit_rows(train), unit_rows(test));
    let classes = train.labels.iter().max().expect("non-empty") + 1;
    Ok(par::map_range(test.len(), |i| {
        let qi = &q[i * d..(i + 1) * d];
        let mut cand: Vec<(f64, usize)> = (0..train.len())
            .map(|j| {
                let dot: f64 = a[j * d..(j + 1) * d].iter().zip(qi).map(|(x, y)| x * y).sum();
                (1.0 - dot, j)
            })
            .collect();
        cand.sort_unstable_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut votes = vec![0usize; classes];
        for &(_, j) in &cand[..k] {
            votes[train.labels[j]] += 1;
        }
        let mut best = 0;
        for (c, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = c;
            }
        }
        best
    }))
}

pub fn knn_probe(train: &FeatureTable, test: &FeatureTable, k: usize) -> Result<f64> {
    Ok(accuracy(&knn_predict(train, test, k)?, &test.labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: String,
    pub accuracy: f64,
}

/// Splits `table` per `cfg` and runs the configured probe.
pub fn run_probe(table: &FeatureTable, cfg: &EvalConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let (train, test) = train_test_split(table, cfg.seed, cfg.test_fraction);
    let accuracy = match cfg.probe {
        ProbeKind::Linear => linear_probe(&train, &test, LinearVariant::Logistic, cfg.epochs, cfg.lr, cfg.l2)?,
        ProbeKind::Hinge => linear_probe(&train, &test, LinearVariant::HingeOvr, cfg.epochs, cfg.lr, cfg.l2)?,
        ProbeKind::Knn => knn_probe(&train, &test, cfg.knn_k.min(train.len()))?,
    };
    Ok(ProbeResult {
        probe: cfg.probe.name().into(),
        accuracy,
    })
}

/// Writes `label,f0,...` rows with 9 significant digits.
pub fn export_features(table: &FeatureTable, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let header: Vec<String> = (0..table.width).map(|i| format!("f{i}")).collect();
    writeln!(w, "label,{}", header.join(","))?;
    for i in 0..table.len() {
        let vals: Vec<String> = table.row(i).iter().map(|&v| fmt_sig(v, 9)).collect();
        writeln!(w, "{},{}", table.labels[i], vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}
