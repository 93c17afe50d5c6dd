//! Shared point encoder, projection head and class head.
//!
//! The encoder is a per-point MLP `3 -> 64 -> 128 -> K` whose layers are a
//! matmul, a per-feature affine map and a relu, followed by max pooling over
//! the points of each cloud. The optional edge variant replaces the first
//! layer by an edge convolution on `[x_i, x_j - x_i]` over the k nearest
//! neighbours of each point, pooled by max over the neighbours.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION, MAGIC};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError, PointCloud};
use crate::rng;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

const HIDDEN1: usize = 64;
const HIDDEN2: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model dims: {0}")]
    InvalidDims(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Model widths and encoder variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder feature width.
    pub k: usize,
    /// Projection width.
    pub p: usize,
    /// Number of class-head outputs.
    pub m: usize,
    pub edge_conv: bool,
    /// Neighbourhood size of the edge layer.
    pub edge_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 256,
            p: 256,
            m: 16,
            edge_conv: false,
            edge_k: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.p == 0 {
            return Err(ModelError::InvalidDims("k and p must be positive".into()));
        }
        if self.m < 2 {
            return Err(ModelError::InvalidDims(format!("m = {} must be at least 2", self.m)));
        }
        if self.edge_conv && self.edge_k == 0 {
            return Err(ModelError::InvalidDims("edge_k must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter names in storage order.
pub const PARAM_NAMES: [&str; 17] = [
    "enc.l1.w",
    "enc.l1.scale",
    "enc.l1.shift",
    "enc.l2.w",
    "enc.l2.scale",
    "enc.l2.shift",
    "enc.l3.w",
    "enc.l3.scale",
    "enc.l3.shift",
    "proj.l1.w",
    "proj.l1.b",
    "proj.l2.w",
    "proj.l2.b",
    "cls.l1.w",
    "cls.l1.b",
    "cls.l2.w",
    "cls.l2.b",
];

#[derive(Clone, Copy, PartialEq)]
enum Init {
    FanIn,
    Zero,
    One,
}

fn layout(dims: &ModelConfig) -> [(Vec<usize>, Init); 17] {
    let (k, p, m) = (dims.k, dims.p, dims.m);
    let in1 = if dims.edge_conv { 6 } else { 3 };
    use Init::*;
    [
        (vec![in1, HIDDEN1], FanIn),
        (vec![HIDDEN1], One),
        (vec![HIDDEN1], Zero),
        (vec![HIDDEN1, HIDDEN2], FanIn),
        (vec![HIDDEN2], One),
        (vec![HIDDEN2], Zero),
        (vec![HIDDEN2, k], FanIn),
        (vec![k], One),
        (vec![k], Zero),
        (vec![k, k], FanIn),
        (vec![k], Zero),
        (vec![k, p], FanIn),
        (vec![p], Zero),
        (vec![k, k], FanIn),
        (vec![k], Zero),
        (vec![k, m], FanIn),
        (vec![m], Zero),
    ]
}

/// Expected shape of every parameter, in storage order.
pub fn param_shapes(dims: &ModelConfig) -> Vec<Vec<usize>> {
    layout(dims).into_iter().map(|(s, _)| s).collect()
}

/// Named parameter tensors of the encoder and both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    dims: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Weights `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases and shifts,
    /// unit scales. Each tensor draws from its own stream.
    pub fn init(dims: ModelConfig, seed: u64) -> Result<Self> {
        dims.validate()?;
        let tensors = layout(&dims)
            .into_iter()
            .enumerate()
            .map(|(i, (shape, init))| match init {
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::full(&shape, T::one()),
                Init::FanIn => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    let mut r = rng::stream(&[rng::tag::INIT, seed, i as u64]);
                    let len = shape.iter().product();
                    let data = (0..len).map(|_| T::lit(r.random_range(-bound..bound))).collect();
                    Tensor::new(shape, data).expect("layout shape")
                }
            })
            .collect();
        Ok(Self { dims, tensors })
    }

    pub fn from_tensors(dims: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        dims.validate()?;
        let shapes = param_shapes(&dims);
        if tensors.len() != shapes.len() {
            return Err(ModelError::InvalidDims(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((t, s), name) in tensors.iter().zip(&shapes).zip(PARAM_NAMES) {
            if t.shape() != &s[..] {
                return Err(TensorError::ShapeMismatch {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: s.clone(),
                }
                .into());
            }
        }
        Ok(Self { dims, tensors })
    }

    pub fn dims(&self) -> &ModelConfig {
        &self.dims
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        PARAM_NAMES.iter().position(|n| *n == name).map(|i| &mut self.tensors[i])
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Places every tensor on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars: Vec<Var> = self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        Bound::from_vars(self.dims, vars)
    }
}

/// Graph handles of the parameters, in [`PARAM_NAMES`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    dims: ModelConfig,
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps externally created vars given in [`PARAM_NAMES`] order.
    pub fn from_vars(dims: ModelConfig, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), PARAM_NAMES.len(), "one var per parameter");
        Self { dims, vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn dims(&self) -> &ModelConfig {
        &self.dims
    }
}

fn conv_layer<T: Scalar>(g: &mut Graph<T>, x: Var, p: &[Var]) -> Result<Var> {
    let h = g.matmul(x, p[0])?;
    let h = g.affine(h, p[1], p[2])?;
    Ok(g.relu(h))
}

/// Edge-layer rows `[x_i, x_j - x_i]` for every point and each of its
/// neighbours, cloud by cloud.
fn edge_rows<T: Scalar>(g: &Graph<T>, x: Var, batch: usize, points: usize, k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let flat = g.value(x).data();
    let mut centers = Vec::with_capacity(batch * points * k);
    let mut nbrs = Vec::with_capacity(batch * points * k);
    for c in 0..batch {
        let pts = (0..points)
            .map(|i| {
                let r = &flat[(c * points + i) * 3..(c * points + i) * 3 + 3];
                [r[0], r[1], r[2]].map(|v| v.to_f64().unwrap_or(f64::NAN))
            })
            .collect();
        let nb = geometry::knn(&PointCloud::new(pts)?, k)?;
        for i in 0..points {
            for &j in nb.row(i) {
                centers.push(c * points + i);
                nbrs.push(c * points + j);
            }
        }
    }
    Ok((centers, nbrs))
}

/// Encodes `batch` clouds of `points` points stacked as a `(batch·points) × 3`
/// matrix into a `batch × K` feature matrix.
pub fn encode<T: Scalar>(g: &mut Graph<T>, bound: &Bound, x: Var, batch: usize, points: usize) -> Result<Var> {
    let want = [batch * points, 3];
    if batch == 0 || points == 0 || g.shape(x) != want {
        return Err(TensorError::ShapeMismatch {
            op: "encode",
            lhs: g.shape(x).to_vec(),
            rhs: want.to_vec(),
        }
        .into());
    }
    let p = &bound.vars;
    let dims = bound.dims;
    let h1 = if dims.edge_conv {
        let k = dims.edge_k.min(points.saturating_sub(1));
        if k == 0 {
            return Err(ModelError::InvalidDims("edge layer needs at least 2 points per cloud".into()));
        }
        let (centers, nbrs) = edge_rows(g, x, batch, points, k)?;
        let xi = g.gather_rows(x, &centers)?;
        let xj = g.gather_rows(x, &nbrs)?;
        let diff = g.sub(xj, xi)?;
        let e = g.concat_last_axis(&[xi, diff])?;
        let h = conv_layer(g, e, &p[0..3])?;
        let h = g.reshape(h, &[batch * points, k, HIDDEN1])?;
        g.max_over_axis(h, 1)?.0
    } else {
        conv_layer(g, x, &p[0..3])?
    };
    let h2 = conv_layer(g, h1, &p[3..6])?;
    let h3 = conv_layer(g, h2, &p[6..9])?;
    let h3 = g.reshape(h3, &[batch, points, dims.k])?;
    Ok(g.max_over_axis(h3, 1)?.0)
}

fn two_layer<T: Scalar>(g: &mut Graph<T>, f: Var, p: &[Var]) -> Result<Var> {
    let h = g.matmul(f, p[0])?;
    let h = g.add(h, p[1])?;
    let h = g.relu(h);
    let out = g.matmul(h, p[2])?;
    Ok(g.add(out, p[3])?)
}

/// `z = W2 relu(W1 f + b1) + b2`.
pub fn project<T: Scalar>(g: &mut Graph<T>, bound: &Bound, f: Var) -> Result<Var> {
    two_layer(g, f, &bound.vars[9..13])
}

/// Row-stochastic class distribution `softmax(W2 relu(W1 f + b1) + b2)`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, bound: &Bound, f: Var) -> Result<Var> {
    let logits = two_layer(g, f, &bound.vars[13..17])?;
    Ok(g.softmax_rows(logits)?)
}

/// Stacks clouds of equal size into a `(B·n) × 3` tensor.
pub fn stack_clouds<T: Scalar>(clouds: &[&PointCloud]) -> Result<Tensor<T>> {
    let n = clouds.first().map_or(0, |c| c.len());
    if let Some(bad) = clouds.iter().find(|c| c.len() != n) {
        return Err(TensorError::ShapeMismatch {
            op: "stack_clouds",
            lhs: vec![n, 3],
            rhs: vec![bad.len(), 3],
        }
        .into());
    }
    let data: Vec<T> = clouds.iter().flat_map(|c| c.to_flat::<T>()).collect();
    Ok(Tensor::new(vec![clouds.len() * n, 3], data)?)
}

/// Inference-mode encoder features of one cloud.
pub fn features<T: Scalar>(params: &ModelParams<T>, cloud: &PointCloud) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(stack_clouds(&[cloud])?);
    let f = encode(&mut g, &bound, x, 1, cloud.len())?;
    Ok(g.value(f).data().to_vec())
}
