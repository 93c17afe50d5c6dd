//! Feature-wise and class-wise curriculum mutual-information objectives.
//!
//! Both objectives are symmetric InfoNCE losses over a scaled-cosine
//! similarity matrix. For the feature objective the anchors are the rows of
//! the projected embeddings (one per sample); for the class objective they
//! are the columns of the class-head output (one per class). Every loss here
//! is a non-negative minimisation target, so `log N - loss` is the InfoNCE
//! estimate of the mutual information and never exceeds `log N`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

/// Regulariser used in all norm denominators.
pub const NORM_EPS: f64 = 1e-8;
const ENTROPY_EPS: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("row {row} of the class distribution sums to {sum}, not 1")]
    NotStochastic { row: usize, sum: f64 },
    #[error("contrastive loss needs at least 2 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Form of the class-collapse regulariser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrVariant {
    /// `Σ p_i log p_i + log M` of the batch class marginal `p`.
    #[default]
    NegEntropy,
    /// Mean over the batch of the column l2 norms.
    GroupLasso,
    /// Grand sum of `y` divided by the batch size (constant on stochastic rows).
    Literal,
}

/// Which terms enter the optimised objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Joint,
    /// Feature-wise term only.
    Feature,
    /// Class-wise term plus the regulariser.
    Class,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub beta: f64,
    pub cr_variant: CrVariant,
    pub objective: Objective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau1: 0.5,
            tau2: 1.0,
            beta: 1.0,
            cr_variant: CrVariant::NegEntropy,
            objective: Objective::Joint,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1.is_finite()) {
            return Err(LossError::InvalidConfig("tau1 must be > 0".into()));
        }
        if !(self.tau2 > 0.0 && self.tau2.is_finite()) {
            return Err(LossError::InvalidConfig("tau2 must be > 0".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(LossError::InvalidConfig("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Which vectors a similarity matrix compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityAxis {
    FeatureRows,
    ClassColumns,
}

/// Scaled cosine similarities between two sets of anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor<f64>,
    pub tau: f64,
    pub axis: SimilarityAxis,
}

/// Per-batch loss values and InfoNCE estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_fea: f64,
    pub l_cls: f64,
    pub l_cr: f64,
    pub l_overall: f64,
    pub mi_fea_estimate: f64,
    pub mi_cls_estimate: f64,
}

/// Graph handles of the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_fea: Var,
    pub l_cls: Var,
    pub l_cr: Var,
    pub l_overall: Var,
}

/// `S_ij = cos(a_i, b_j) / tau` for rows `a_i`, `b_j`.
fn scaled_cosine<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "similarity",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        }
        .into());
    }
    let eps = T::lit(NORM_EPS);
    let na = g.l2_normalize_rows(a, eps)?;
    let nb = g.l2_normalize_rows(b, eps)?;
    let nbt = g.transpose2d(nb)?;
    let s = g.matmul(na, nbt)?;
    Ok(g.scale(s, T::lit(1.0 / tau)))
}

/// Symmetric InfoNCE over row anchors: mean of the row-wise and column-wise
/// negative log-softmax at the diagonal.
fn symmetric_info_nce<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let (rows, _) = g.value(a).dims2()?;
    if rows < 2 {
        return Err(LossError::TooFewAnchors(rows));
    }
    let s = scaled_cosine(g, a, b, tau)?;
    let lse_rows = g.log_sum_exp_rows(s)?;
    let st = g.transpose2d(s)?;
    let lse_cols = g.log_sum_exp_rows(st)?;
    let diag = g.diag(s)?;
    let sum_rows = g.sum(lse_rows);
    let sum_cols = g.sum(lse_cols);
    let sum_diag = g.sum(diag);
    let both = g.add(sum_rows, sum_cols)?;
    let twice_diag = g.scale(sum_diag, T::lit(2.0));
    let total = g.sub(both, twice_diag)?;
    Ok(g.scale(total, T::lit(1.0 / (2.0 * rows as f64))))
}

fn check_stochastic<T: Scalar>(y: &Tensor<T>) -> Result<()> {
    let (_, cols) = y.dims2()?;
    for (row, r) in y.data().chunks(cols).enumerate() {
        let sum: f64 = r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum();
        if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
            return Err(LossError::NotStochastic { row, sum });
        }
    }
    Ok(())
}

/// Feature-wise similarity matrix `S^f` (B×B) recorded on the graph.
pub fn feature_similarity<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, tau1: f64) -> Result<Var> {
    scaled_cosine(g, za, zb, tau1)
}

/// Value-only similarity matrix, for inspection and reporting.
pub fn similarity_matrix(
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    tau: f64,
    axis: SimilarityAxis,
) -> Result<SimilarityMatrix> {
    let mut g = Graph::new();
    let (mut va, mut vb) = (g.constant(a.clone()), g.constant(b.clone()));
    if axis == SimilarityAxis::ClassColumns {
        va = g.transpose2d(va)?;
        vb = g.transpose2d(vb)?;
    }
    let s = scaled_cosine(&mut g, va, vb, tau)?;
    Ok(SimilarityMatrix {
        values: g.value(s).clone(),
        tau,
        axis,
    })
}

/// Feature loss over projected embeddings `z_a`, `z_b` (B×P).
pub fn feature_loss<T: Scalar>(g: &mut Graph<T>, za: Var, zb: Var, tau1: f64) -> Result<Var> {
    symmetric_info_nce(g, za, zb, tau1)
}

/// Class loss over class-probability matrices `y_a`, `y_b` (B×M), using the
/// M columns as anchors.
pub fn class_loss<T: Scalar>(g: &mut Graph<T>, ya: Var, yb: Var, tau2: f64) -> Result<Var> {
    check_stochastic(g.value(ya))?;
    check_stochastic(g.value(yb))?;
    let (_, m) = g.value(ya).dims2()?;
    if m < 2 {
        return Err(LossError::TooFewAnchors(m));
    }
    let ca = g.transpose2d(ya)?;
    let cb = g.transpose2d(yb)?;
    symmetric_info_nce(g, ca, cb, tau2)
}

/// Class-collapse penalty on one class-probability matrix `y` (B×M).
pub fn class_regularizer<T: Scalar>(g: &mut Graph<T>, y: Var, variant: CrVariant) -> Result<Var> {
    check_stochastic(g.value(y))?;
    let (b, m) = g.value(y).dims2()?;
    let inv_b = T::lit(1.0 / b as f64);
    match variant {
        CrVariant::NegEntropy => {
            let col = g.sum_over_axis(y, 0)?;
            let p = g.scale(col, inv_b);
            let logp = g.log(p, T::lit(ENTROPY_EPS));
            let plogp = g.mul(p, logp)?;
            let s = g.sum(plogp);
            Ok(g.add_scalar(s, T::lit((m as f64).ln())))
        }
        CrVariant::GroupLasso => {
            let yt = g.transpose2d(y)?;
            let norms = g.row_norms(yt, T::lit(NORM_EPS))?;
            let s = g.sum(norms);
            Ok(g.scale(s, inv_b))
        }
        CrVariant::Literal => {
            let s = g.sum(y);
            Ok(g.scale(s, inv_b))
        }
    }
}

/// The overall objective and its report. The regulariser is averaged over
/// the two views.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    za: Var,
    zb: Var,
    ya: Var,
    yb: Var,
    cfg: &LossConfig,
) -> Result<(LossVars, LossReport)> {
    cfg.validate()?;
    let (bz, _) = g.value(za).dims2()?;
    let (by, m) = g.value(ya).dims2()?;
    if bz != by {
        return Err(TensorError::ShapeMismatch {
            op: "total_loss",
            lhs: g.shape(za).to_vec(),
            rhs: g.shape(ya).to_vec(),
        }
        .into());
    }
    let l_fea = feature_loss(g, za, zb, cfg.tau1)?;
    let l_cls = class_loss(g, ya, yb, cfg.tau2)?;
    let cr_a = class_regularizer(g, ya, cfg.cr_variant)?;
    let cr_b = class_regularizer(g, yb, cfg.cr_variant)?;
    let cr_sum = g.add(cr_a, cr_b)?;
    let l_cr = g.scale(cr_sum, T::lit(0.5));
    let weighted_cr = g.scale(l_cr, T::lit(cfg.beta));
    let l_overall = match cfg.objective {
        Objective::Joint => {
            let fc = g.add(l_fea, l_cls)?;
            g.add(fc, weighted_cr)?
        }
        Objective::Feature => g.scale(l_fea, T::one()),
        Objective::Class => g.add(l_cls, weighted_cr)?,
    };
    let val = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    let report = LossReport {
        l_fea: val(g, l_fea),
        l_cls: val(g, l_cls),
        l_cr: val(g, l_cr),
        l_overall: val(g, l_overall),
        mi_fea_estimate: (bz as f64).ln() - val(g, l_fea),
        mi_cls_estimate: (m as f64).ln() - val(g, l_cls),
    };
    Ok((
        LossVars {
            l_fea,
            l_cls,
            l_cr,
            l_overall,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<const N: usize>(rows: &[[f64; N]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn eval2(
        a: &Tensor<f64>,
        b: &Tensor<f64>,
        f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
    ) -> f64 {
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let l = f(&mut g, va, vb).unwrap();
        g.value(l).item()
    }

    const TWO_BY_TWO: f64 = 0.313_261_687_518_222_8; // -ln(e / (e + 1))

    #[test]
    fn orthonormal_pair_feature_loss() {
        let z = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = eval2(&z, &z, |g, a, b| feature_loss(g, a, b, 1.0));
        assert!((l - TWO_BY_TWO).abs() < 1e-12, "{l}");
    }

    #[test]
    fn collapsed_feature_loss_is_log_batch() {
        let z = t(&[[0.3, -0.2, 1.0]; 4]);
        let l = eval2(&z, &z, |g, a, b| feature_loss(g, a, b, 0.5));
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_class_split() {
        let y = t(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = eval2(&y, &y, |g, a, b| class_loss(g, a, b, 1.0));
        assert!((l - TWO_BY_TWO).abs() < 1e-12);
        let u = t(&[[0.25; 4]; 3]);
        let l = eval2(&u, &u, |g, a, b| class_loss(g, a, b, 1.0));
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn orthonormal_similarity_is_identity() {
        let z = t(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let s = similarity_matrix(&z, &z, 1.0, SimilarityAxis::FeatureRows).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((s.values.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn not_stochastic_is_rejected() {
        let y = t(&[[0.5, 0.6], [0.5, 0.5]]);
        let mut g = Graph::new();
        let v = g.constant(y);
        assert!(matches!(
            class_loss(&mut g, v, v, 1.0),
            Err(LossError::NotStochastic { row: 0, .. })
        ));
        assert!(class_regularizer(&mut g, v, CrVariant::NegEntropy).is_err());
    }

    #[test]
    fn regularizer_values() {
        let mut g = Graph::new();
        let uniform = g.constant(t(&[[0.25; 4]; 5]));
        let r = class_regularizer(&mut g, uniform, CrVariant::NegEntropy).unwrap();
        assert!(g.value(r).item().abs() < 1e-10);
        let point = g.constant(t(&[[1.0, 0.0, 0.0, 0.0]; 3]));
        let r = class_regularizer(&mut g, point, CrVariant::NegEntropy).unwrap();
        assert!((g.value(r).item() - 4f64.ln()).abs() < 1e-9);
        let any = g.constant(t(&[[0.1, 0.2, 0.7], [0.5, 0.25, 0.25]]));
        let r = class_regularizer(&mut g, any, CrVariant::Literal).unwrap();
        assert!((g.value(r).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_composition() {
        let z = t(&[[1.0, 2.0]; 4]);
        let y = t(&[[0.25; 4]; 4]);
        let mut g = Graph::new();
        let (za, zb, ya, yb) = (
            g.constant(z.clone()),
            g.constant(z),
            g.constant(y.clone()),
            g.constant(y),
        );
        let (_, rep) = total_loss(&mut g, za, zb, ya, yb, &LossConfig::default()).unwrap();
        assert!((rep.l_overall - 2.0 * 4f64.ln()).abs() < 1e-9);
        assert!(rep.mi_fea_estimate.abs() < 1e-9);
        let cfg = LossConfig {
            beta: 0.0,
            ..Default::default()
        };
        let (_, rep) = total_loss(&mut g, za, zb, ya, yb, &cfg).unwrap();
        assert_eq!(rep.l_overall, rep.l_fea + rep.l_cls);
    }

    #[test]
    fn single_anchor_is_rejected() {
        let z = t(&[[1.0, 2.0]]);
        let mut g = Graph::new();
        let v = g.constant(z);
        assert_eq!(
            feature_loss(&mut g, v, v, 0.5).unwrap_err(),
            LossError::TooFewAnchors(1)
        );
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = LossConfig {
            tau1: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
