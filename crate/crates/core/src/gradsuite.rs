//! Finite-difference checks of every graph op, every loss and the model
//! pipeline at random points, in `f64`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::loss::{self, CrVariant, LossConfig, Objective};
use crate::model::{self, ModelConfig, ModelParams, PARAM_NAMES};
use crate::rng;
use crate::tensor::{gradcheck, Graph, GradcheckReport, Result, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Worst result of one case over all trials.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub excluded: usize,
    pub passed: bool,
}

type CaseFn = fn(&mut Graph<f64>, Var, &Fixed) -> Result<Var>;

/// Constant inputs of one trial.
pub struct Fixed {
    pub mats: Vec<Tensor<f64>>,
    pub idx: Vec<usize>,
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Reduces `v` against fixed random weights so no gradient is trivially uniform.
fn probe(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone().reshape(g.shape(v))?);
    let p = g.mul(v, w)?;
    Ok(g.sum(p))
}

fn lift<T>(r: loss::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        loss::LossError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    })
}

fn stochastic(g: &mut Graph<f64>, logits: Var) -> Result<Var> {
    g.softmax_rows(logits)
}

struct Case {
    name: &'static str,
    point: &'static [usize],
    /// Shapes of the fixed tensors; the last is the probe weight.
    fixed: &'static [&'static [usize]],
    run: CaseFn,
}

const R: usize = 4;
const C: usize = 5;

fn cases() -> Vec<Case> {
    vec![
        Case { name: "matmul", point: &[R, C], fixed: &[&[C, 3], &[R, 3]], run: |g, x, f| {
            let b = g.constant(f.mats[0].clone());
            let y = g.matmul(x, b)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "matmul_rhs", point: &[C, 3], fixed: &[&[R, C], &[R, 3]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let y = g.matmul(a, x)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "add_broadcast", point: &[C], fixed: &[&[R, C], &[R, C]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let y = g.add(a, x)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "sub", point: &[R, C], fixed: &[&[R, C], &[R, C]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let y = g.sub(a, x)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "mul", point: &[R, C], fixed: &[&[R, C], &[R, C]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let y = g.mul(a, x)?;
            let y = g.mul(y, x)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "scale_add_scalar", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let y = g.scale(x, -1.7);
            let y = g.add_scalar(y, 0.4);
            let y = g.mul(y, x)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "relu", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let y = g.relu(x);
            probe(g, y, &f.mats[0])
        }},
        Case { name: "log", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let sq = g.mul(x, x)?;
            let y = g.log(sq, 1e-3);
            probe(g, y, &f.mats[0])
        }},
        Case { name: "max_over_axis", point: &[R, C, 3], fixed: &[&[R, 3]], run: |g, x, f| {
            let (y, _) = g.max_over_axis(x, 1)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "sum_over_axis", point: &[R, C], fixed: &[&[C]], run: |g, x, f| {
            let y = g.sum_over_axis(x, 0)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "sum_mean", point: &[R, C], fixed: &[], run: |g, x, _| {
            let sq = g.mul(x, x)?;
            let s = g.sum(sq);
            let m = g.mean(x);
            let mm = g.mul(m, m)?;
            g.add(s, mm)
        }},
        Case { name: "softmax_rows", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let y = g.softmax_rows(x)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "log_sum_exp_rows", point: &[R, C], fixed: &[&[R]], run: |g, x, f| {
            let y = g.log_sum_exp_rows(x)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "l2_normalize_rows", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let y = g.l2_normalize_rows(x, 1e-8)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "row_norms", point: &[R, C], fixed: &[&[R]], run: |g, x, f| {
            let y = g.row_norms(x, 1e-8)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "concat_last_axis", point: &[R, C], fixed: &[&[R, 2], &[R, C + 2 + C]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let sq = g.mul(x, x)?;
            let y = g.concat_last_axis(&[x, a, sq])?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "transpose2d", point: &[R, C], fixed: &[&[C, C]], run: |g, x, f| {
            let t = g.transpose2d(x)?;
            let y = g.matmul(t, x)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "affine", point: &[R, C], fixed: &[&[C], &[C], &[R, C]], run: |g, x, f| {
            let s = g.constant(f.mats[0].clone());
            let b = g.constant(f.mats[1].clone());
            let y = g.affine(x, s, b)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[2])
        }},
        Case { name: "affine_params", point: &[C], fixed: &[&[R, C], &[R, C]], run: |g, x, f| {
            let a = g.constant(f.mats[0].clone());
            let y = g.affine(a, x, x)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[1])
        }},
        Case { name: "diag", point: &[R, R], fixed: &[&[R]], run: |g, x, f| {
            let y = g.diag(x)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "reshape", point: &[R, C], fixed: &[&[C, R]], run: |g, x, f| {
            let sq = g.mul(x, x)?;
            let y = g.reshape(sq, &[C, R])?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "gather_rows", point: &[R, C], fixed: &[&[6, C]], run: |g, x, f| {
            let y = g.gather_rows(x, &f.idx)?;
            let y = g.mul(y, y)?;
            probe(g, y, &f.mats[0])
        }},
        Case { name: "feature_loss", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let b = g.constant(f.mats[0].clone());
            lift(loss::feature_loss(g, x, b, 0.5))
        }},
        Case { name: "feature_loss_both_views", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let n = g.constant(f.mats[0].clone());
            let b = g.add(x, n)?;
            lift(loss::feature_loss(g, x, b, 0.3))
        }},
        Case { name: "class_loss", point: &[R, C], fixed: &[&[R, C]], run: |g, x, f| {
            let ya = stochastic(g, x)?;
            let other = g.constant(f.mats[0].clone());
            let yb = stochastic(g, other)?;
            lift(loss::class_loss(g, ya, yb, 1.0))
        }},
        Case { name: "cr_neg_entropy", point: &[R, C], fixed: &[], run: |g, x, _| {
            let y = stochastic(g, x)?;
            lift(loss::class_regularizer(g, y, CrVariant::NegEntropy))
        }},
        Case { name: "cr_group_lasso", point: &[R, C], fixed: &[], run: |g, x, _| {
            let y = stochastic(g, x)?;
            lift(loss::class_regularizer(g, y, CrVariant::GroupLasso))
        }},
        Case { name: "cr_literal", point: &[R, C], fixed: &[], run: |g, x, _| {
            let y = stochastic(g, x)?;
            lift(loss::class_regularizer(g, y, CrVariant::Literal))
        }},
        Case { name: "total_loss", point: &[R, C], fixed: &[&[R, C], &[R, 3], &[R, 3]], run: |g, x, f| {
            let zb = g.constant(f.mats[0].clone());
            let la = g.constant(f.mats[1].clone());
            let mix = mixing(g, C, 3);
            let proj = g.matmul(x, mix)?;
            let logits_a = g.add(la, proj)?;
            let ya = stochastic(g, logits_a)?;
            let lb = g.constant(f.mats[2].clone());
            let yb = stochastic(g, lb)?;
            let cfg = LossConfig { beta: 0.7, objective: Objective::Joint, ..LossConfig::default() };
            Ok(lift(loss::total_loss(g, x, zb, ya, yb, &cfg))?.0.l_overall)
        }},
    ]
}

/// Fixed `rows × cols` map so the class logits also depend on the point.
fn mixing(g: &mut Graph<f64>, rows: usize, cols: usize) -> Var {
    let mut t = Tensor::zeros(&[rows, cols]);
    for i in 0..rows.min(cols) {
        t.data_mut()[i * cols + i] = 1.0;
    }
    t.data_mut()[(rows - 1) * cols] = 0.5;
    g.constant(t)
}

fn fold(name: &'static str, trials: usize, reports: &[GradcheckReport]) -> CaseResult {
    CaseResult {
        name,
        trials,
        max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
        max_abs_err: reports.iter().map(|r| r.max_abs_err).fold(0.0, f64::max),
        checked: reports.iter().map(|r| r.checked).sum(),
        excluded: reports.iter().map(|r| r.excluded).sum(),
        passed: reports.iter().all(|r| r.passed),
    }
}

const MODEL_POINTS: usize = 6;

fn tiny_model(edge: bool) -> ModelConfig {
    ModelConfig {
        k: 6,
        p: 4,
        m: 3,
        edge_conv: edge,
        edge_k: 3,
    }
}

/// Gradient of the pipeline with respect to one parameter tensor or, when
/// `param` is `None`, the input coordinates.
fn model_case(
    params: &ModelParams<f64>,
    cloud: &Tensor<f64>,
    param: Option<usize>,
    head: fn(&mut Graph<f64>, &model::Bound, Var) -> Result<Var>,
    w: &Tensor<f64>,
) -> Result<GradcheckReport> {
    let batch = cloud.shape()[0] / MODEL_POINTS;
    let dims = *params.dims();
    let point = match param {
        Some(i) => params.tensors()[i].clone(),
        None => cloud.clone(),
    };
    gradcheck(
        |g, x| {
            let vars: Vec<Var> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| if Some(i) == param { x } else { g.constant(t.clone()) })
                .collect();
            let bound = model::Bound::from_vars(dims, vars);
            let input = if param.is_none() { x } else { g.constant(cloud.clone()) };
            let f = model::encode(g, &bound, input, batch, MODEL_POINTS)
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            let out = head(g, &bound, f)?;
            probe(g, out, w)
        },
        &point,
        STEP,
        TOLERANCE,
    )
}

fn project_head(g: &mut Graph<f64>, b: &model::Bound, f: Var) -> Result<Var> {
    model::project(g, b, f).map_err(|e| TensorError::Invalid(e.to_string()))
}

fn classify_head(g: &mut Graph<f64>, b: &model::Bound, f: Var) -> Result<Var> {
    model::classify(g, b, f).map_err(|e| TensorError::Invalid(e.to_string()))
}

/// Runs every case at `trials` random points. Relative errors use
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (ci, case) in cases().into_iter().enumerate() {
        let mut reports = Vec::with_capacity(trials);
        for t in 0..trials {
            let mut r = rng::stream(&[rng::tag::PROBE, seed, ci as u64, t as u64]);
            let point = rand_tensor(&mut r, case.point);
            let fixed = Fixed {
                mats: case.fixed.iter().map(|s| rand_tensor(&mut r, s)).collect(),
                idx: (0..6).map(|_| r.random_range(0..R)).collect(),
            };
            let run = case.run;
            reports.push(gradcheck(|g, x| run(g, x, &fixed), &point, STEP, TOLERANCE)?);
        }
        out.push(fold(case.name, trials, &reports));
    }
    let pipelines: [(&'static str, bool, fn(&mut Graph<f64>, &model::Bound, Var) -> Result<Var>, usize); 4] = [
        ("encode_project", false, project_head, 4),
        ("encode_classify", false, classify_head, 3),
        ("edge_encode_project", true, project_head, 4),
        ("edge_encode_classify", true, classify_head, 3),
    ];
    for (pi, (name, edge, head, width)) in pipelines.into_iter().enumerate() {
        let mut reports = Vec::new();
        for t in 0..trials {
            let key = 1000 + pi as u64;
            let params = ModelParams::<f64>::init(tiny_model(edge), seed ^ key.wrapping_mul(31) ^ t as u64)
                .map_err(|e| TensorError::Invalid(e.to_string()))?;
            let mut r = rng::stream(&[rng::tag::PROBE, seed, key, t as u64]);
            let cloud = rand_tensor(&mut r, &[2 * MODEL_POINTS, 3]);
            let w = rand_tensor(&mut r, &[2, width]);
            // input coordinates, then one parameter tensor per trial in rotation
            reports.push(model_case(&params, &cloud, None, head, &w)?);
            let which = t % PARAM_NAMES.len();
            reports.push(model_case(&params, &cloud, Some(which), head, &w)?);
        }
        out.push(fold(name, trials, &reports));
    }
    Ok(out)
}
