//! Point clouds and the geometric primitives used by augmentation and the
//! edge-convolution encoder.

mod io;
pub mod shapes;

pub use io::{fmt_sig, load_dataset, read_xyz, write_xyz, DatasetManifest, ManifestEntry};
pub use shapes::{generate_shapes, GeneratedSet, PoseMode, ShapeConfig, ShapeKind};

use thiserror::Error;

use crate::par;

pub type Point = [f64; 3];

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud must contain at least one point")]
    Empty,
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,
    #[error("k = {k} must be smaller than the point count {count}")]
    InvalidK { k: usize, count: usize },
    #[error("m = {m} must be between 1 and the point count {count}")]
    InvalidM { m: usize, count: usize },
    #[error("start index {start} out of range for {count} points")]
    InvalidStart { start: usize, count: usize },
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// An ordered, non-empty list of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

/// A cloud with its category id. Labels are never seen during pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    pub label: usize,
}

fn dist2(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::Empty);
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Point {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|v| v / n)
    }

    /// Largest distance from the origin.
    pub fn max_norm(&self) -> f64 {
        self.points
            .iter()
            .map(|p| dist2(p, &[0.0; 3]))
            .fold(0.0, f64::max)
            .sqrt()
    }

    /// Subset in the order given by `idx`.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.points[i]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.points.iter().flatten().all(|v| v.is_finite())
    }

    /// Flat `x0 y0 z0 x1 ...` buffer in the requested precision.
    pub fn to_flat<T: num_traits::FromPrimitive>(&self) -> Vec<T> {
        self.points
            .iter()
            .flatten()
            .map(|&v| T::from_f64(v).expect("finite coordinate"))
            .collect()
    }
}

pub type Mat3 = [[f64; 3]; 3];

/// Rotation by `angle` radians about the unit vector `axis` (Rodrigues).
pub fn axis_angle(axis: Point, angle: f64) -> Mat3 {
    let [x, y, z] = axis;
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn apply(m: &Mat3, p: &Point) -> Point {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// Centers on the centroid and scales so the farthest point has norm 1.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let c = cloud.centroid();
    let radius = cloud
        .points
        .iter()
        .map(|p| dist2(p, &c))
        .fold(0.0, f64::max)
        .sqrt();
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(GeometryError::DegenerateCloud);
    }
    let points = cloud
        .points
        .iter()
        .map(|p| [(p[0] - c[0]) / radius, (p[1] - c[1]) / radius, (p[2] - c[2]) / radius])
        .collect();
    Ok(PointCloud { points })
}

/// Row-major `count × k` neighbour index table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

impl Neighbors {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }
}

/// Exact k nearest neighbours of every point (self excluded), ties to the
/// lower index.
pub fn knn(cloud: &PointCloud, k: usize) -> Result<Neighbors> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(GeometryError::InvalidK { k, count: n });
    }
    let pts = &cloud.points;
    let rows = par::map_range(n, |i| {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dist2(&pts[i], &pts[j]), j))
            .collect();
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, by_key);
        cand.truncate(k);
        cand.sort_unstable_by(by_key);
        cand.into_iter().map(|(_, j)| j).collect::<Vec<_>>()
    });
    Ok(Neighbors {
        k,
        indices: rows.concat(),
    })
}

/// Greedy farthest-point sampling of `m` indices beginning at `start`.
/// Each pick maximises the distance to the already chosen set; ties go to
/// the lower index.
pub fn fps(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(GeometryError::InvalidM { m, count: n });
    }
    if start >= n {
        return Err(GeometryError::InvalidStart { start, count: n });
    }
    let pts = &cloud.points;
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut out = Vec::with_capacity(m);
    let mut cur = start;
    loop {
        chosen[cur] = true;
        out.push(cur);
        if out.len() == m {
            break;
        }
        let mut best: Option<(f64, usize)> = None;
        for j in 0..n {
            if chosen[j] {
                continue;
            }
            let d = dist2(&pts[cur], &pts[j]);
            if d < min_d[j] {
                min_d[j] = d;
            }
            if best.is_none_or(|(bd, _)| min_d[j] > bd) {
                best = Some((min_d[j], j));
            }
        }
        cur = best.expect("unchosen point remains").1;
    }
    Ok(out)
}
