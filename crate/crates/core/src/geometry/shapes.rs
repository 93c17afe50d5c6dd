//! Labelled synthetic dataset: surface samplings of simple primitives with
//! per-cloud pose and shape-parameter jitter.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    apply, axis_angle, mat_mul, normalize, DatasetManifest, GeometryError, LabeledCloud,
    ManifestEntry, Point, PointCloud, Result,
};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    Torus,
    Plane,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
        ShapeKind::Plane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
            ShapeKind::Plane => "plane",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| GeometryError::InvalidConfig(format!("unknown category {name:?}")))
    }
}

/// How each generated cloud is oriented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PoseMode {
    /// Canonical orientation.
    Fixed,
    /// Uniform yaw about z, then a tilt of up to `max_tilt_deg` about a
    /// random horizontal axis.
    Upright { max_tilt_deg: f64 },
    /// Uniform over all rotations.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeConfig {
    pub categories: Vec<String>,
    pub per_category: usize,
    pub points: usize,
    pub seed: u64,
    /// Relative jitter applied to each primitive's size parameters.
    pub param_jitter: f64,
    pub pose: PoseMode,
}

impl ShapeConfig {
    /// The first `classes` categories in canonical order.
    pub fn with_classes(classes: usize, per_category: usize, points: usize, seed: u64) -> Self {
        Self {
            categories: ShapeKind::ALL
                .iter()
                .take(classes)
                .map(|k| k.name().to_string())
                .collect(),
            per_category,
            points,
            seed,
            param_jitter: 0.25,
            pose: PoseMode::Upright { max_tilt_deg: 30.0 },
        }
    }

    pub fn validate(&self) -> Result<Vec<ShapeKind>> {
        let kinds = self
            .categories
            .iter()
            .map(|c| ShapeKind::from_name(c))
            .collect::<Result<Vec<_>>>()?;
        if kinds.len() < 2 {
            return Err(GeometryError::InvalidConfig(
                "need at least 2 categories".into(),
            ));
        }
        let mut uniq = kinds.clone();
        uniq.sort_by_key(|k| *k as u8);
        uniq.dedup();
        if uniq.len() != kinds.len() {
            return Err(GeometryError::InvalidConfig("duplicate category".into()));
        }
        if self.points < 64 {
            return Err(GeometryError::InvalidConfig(
                "points per cloud must be at least 64".into(),
            ));
        }
        if self.per_category == 0 {
            return Err(GeometryError::InvalidConfig(
                "per-category count must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.param_jitter) {
            return Err(GeometryError::InvalidConfig(
                "param_jitter must be in [0, 1)".into(),
            ));
        }
        Ok(kinds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSet {
    pub manifest: DatasetManifest,
    pub clouds: Vec<LabeledCloud>,
}

pub fn generate_shapes(cfg: &ShapeConfig) -> Result<GeneratedSet> {
    let kinds = cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..kinds.len())
        .flat_map(|label| (0..cfg.per_category).map(move |i| (label, i)))
        .collect();
    let clouds = par::map(&jobs, |_, &(label, i)| {
        let mut r = rng::stream(&[rng::tag::SHAPES, cfg.seed, label as u64, i as u64]);
        let raw = sample_surface(kinds[label], cfg.points, cfg.param_jitter, &mut r);
        let rot = random_pose(cfg.pose, &mut r);
        let posed = PointCloud::new(raw.iter().map(|p| apply(&rot, p)).collect())?;
        Ok(LabeledCloud {
            cloud: normalize(&posed)?,
            label,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let entries = jobs
        .iter()
        .map(|&(label, i)| ManifestEntry {
            path: format!("clouds/{}_{:04}.xyz", kinds[label].name(), i),
            label,
        })
        .collect();
    Ok(GeneratedSet {
        manifest: DatasetManifest {
            categories: kinds.iter().map(|k| k.name().to_string()).collect(),
            seed: cfg.seed,
            entries,
        },
        clouds,
    })
}

impl GeneratedSet {
    /// Writes every cloud as XYZ plus `manifest.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("clouds"))?;
        let written = par::map(&self.manifest.entries, |i, e| super::write_xyz(&self.clouds[i].cloud, dir.join(&e.path)));
        written.into_iter().collect::<Result<Vec<_>>>()?;
        self.manifest.write(dir.join("manifest.json"))
    }
}

fn jitter(r: &mut ChaCha8Rng, base: f64, amount: f64) -> f64 {
    if amount == 0.0 {
        base
    } else {
        base * (1.0 + r.random_range(-amount..=amount))
    }
}

pub(crate) fn unit_vector(r: &mut ChaCha8Rng) -> Point {
    let z: f64 = r.random_range(-1.0..=1.0);
    let phi: f64 = r.random_range(0.0..TAU);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

fn random_pose(mode: PoseMode, r: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    match mode {
        PoseMode::Fixed => axis_angle([0.0, 0.0, 1.0], 0.0),
        PoseMode::Upright { max_tilt_deg } => {
            let yaw = axis_angle([0.0, 0.0, 1.0], r.random_range(0.0..TAU));
            let phi: f64 = r.random_range(0.0..TAU);
            let tilt = r.random_range(0.0..=max_tilt_deg.max(0.0)).to_radians();
            mat_mul(&axis_angle([phi.cos(), phi.sin(), 0.0], tilt), &yaw)
        }
        PoseMode::Full => {
            let axis = unit_vector(r);
            // angle density ∝ (1 - cos θ) gives the Haar measure
            let theta = loop {
                let t: f64 = r.random_range(0.0..PI);
                if r.random_range(0.0..2.0) <= 1.0 - t.cos() {
                    break t;
                }
            };
            axis_angle(axis, theta)
        }
    }
}

/// Picks an index with probability proportional to `weights`.
fn pick(r: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = r.random_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn disk(r: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let rho = radius * r.random_range(0.0f64..=1.0).sqrt();
    let a = r.random_range(0.0..TAU);
    (rho * a.cos(), rho * a.sin())
}

fn sample_surface(kind: ShapeKind, n: usize, j: f64, r: &mut ChaCha8Rng) -> Vec<Point> {
    match kind {
        ShapeKind::Sphere => {
            let radius = jitter(r, 1.0, j);
            (0..n).map(|_| unit_vector(r).map(|v| v * radius)).collect()
        }
        ShapeKind::Cube => {
            let h = [jitter(r, 1.0, j), jitter(r, 1.0, j), jitter(r, 1.0, j)];
            let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
            (0..n)
                .map(|_| {
                    let axis = pick(r, &areas);
                    let mut p = [0.0; 3];
                    for a in 0..3 {
                        p[a] = r.random_range(-h[a]..=h[a]);
                    }
                    p[axis] = if r.random_bool(0.5) { h[axis] } else { -h[axis] };
                    p
                })
                .collect()
        }
        ShapeKind::Cylinder => {
            let (rad, half) = (jitter(r, 0.5, j), jitter(r, 1.0, j));
            let weights = [TAU * rad * 2.0 * half, PI * rad * rad, PI * rad * rad];
            (0..n)
                .map(|_| match pick(r, &weights) {
                    0 => {
                        let a = r.random_range(0.0..TAU);
                        [rad * a.cos(), rad * a.sin(), r.random_range(-half..=half)]
                    }
                    cap => {
                        let (x, y) = disk(r, rad);
                        [x, y, if cap == 1 { half } else { -half }]
                    }
                })
                .collect()
        }
        ShapeKind::Cone => {
            let (rad, height) = (jitter(r, 0.6, j), jitter(r, 1.6, j));
            let slant = (rad * rad + height * height).sqrt();
            let weights = [PI * rad * slant, PI * rad * rad];
            (0..n)
                .map(|_| match pick(r, &weights) {
                    0 => {
                        // distance from the apex ∝ sqrt(u) for uniform area
                        let t = r.random_range(0.0f64..=1.0).sqrt();
                        let a = r.random_range(0.0..TAU);
                        [t * rad * a.cos(), t * rad * a.sin(), height * (1.0 - t)]
                    }
                    _ => {
                        let (x, y) = disk(r, rad);
                        [x, y, 0.0]
                    }
                })
                .collect()
        }
        ShapeKind::Torus => {
            let big = 1.0;
            let tube = jitter(r, 0.3, j);
            (0..n)
                .map(|_| loop {
                    let u = r.random_range(0.0..TAU);
                    let v = r.random_range(0.0..TAU);
                    let w = (big + tube * v.cos()) / (big + tube);
                    if r.random_range(0.0..=1.0) <= w {
                        let ring = big + tube * v.cos();
                        break [ring * u.cos(), ring * u.sin(), tube * v.sin()];
                    }
                })
                .collect()
        }
        ShapeKind::Plane => {
            let (a, b) = (1.0, jitter(r, 0.8, j));
            (0..n)
                .map(|_| [r.random_range(-a..=a), r.random_range(-b..=b), 0.0])
                .collect()
        }
    }
}
