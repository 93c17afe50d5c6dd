//! Easy and hard augmentation families, the curriculum schedule, and
//! construction of the two views of each sample.
//!
//! All randomness of a view is drawn from one [`RngStream`], so a view depends
//! only on `(seed, epoch, sample, view)` and never on which worker built it.

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, axis_angle, GeometryError, Point, PointCloud};
use crate::{par, rng};

/// Minimum point count accepted by the hard family.
pub const MIN_HARD_POINTS: usize = 64;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("step {k} outside the schedule range 0..={d}")]
    OutOfRange { k: u64, d: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("a batch needs at least 2 samples, got {0}")]
    BatchTooSmall(usize),
    #[error("hard augmentation needs at least {min} points, got {count}")]
    TooFewPoints { count: usize, min: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, AugmentError>;

/// `λ_k = min(ini · inc^⌊k/step⌋, 1)` for `0 <= k <= d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub ini: f64,
    pub inc: f64,
    pub step: u64,
    pub d: u64,
}

impl CurriculumSchedule {
    pub fn new(ini: f64, inc: f64, step: u64, d: u64) -> Result<Self> {
        let s = Self { ini, inc, step, d };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ini > 0.0 && self.ini <= 1.0) {
            return Err(AugmentError::InvalidSchedule(format!("ini {} not in (0, 1]", self.ini)));
        }
        if !(self.inc > 1.0 && self.inc.is_finite()) {
            return Err(AugmentError::InvalidSchedule(format!("inc {} must be > 1", self.inc)));
        }
        if self.step == 0 || self.d == 0 {
            return Err(AugmentError::InvalidSchedule("step and d must be positive".into()));
        }
        Ok(())
    }

    pub fn lambda_k(&self, k: u64) -> Result<f64> {
        if k > self.d {
            return Err(AugmentError::OutOfRange { k, d: self.d });
        }
        let stage = (k / self.step).min(i32::MAX as u64) as i32;
        Ok((self.ini * self.inc.powi(stage)).min(1.0))
    }

    /// `floor(λ_k · n)`.
    pub fn hard_count(&self, k: u64, n: usize) -> Result<usize> {
        Ok(hard_count_for(self.lambda_k(k)?, n))
    }
}

fn hard_count_for(lambda: f64, n: usize) -> usize {
    ((lambda * n as f64).floor() as usize).min(n)
}

/// How many samples of each batch receive hard views.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Curriculum {
    /// Easy views only.
    Sda,
    Cda(CurriculumSchedule),
    /// A constant fraction in `[0, 1]`.
    Fixed(f64),
}

impl Curriculum {
    pub fn lambda(&self, k: u64) -> Result<f64> {
        match self {
            Curriculum::Sda => Ok(0.0),
            Curriculum::Cda(s) => s.lambda_k(k),
            Curriculum::Fixed(l) => Ok(l.clamp(0.0, 1.0)),
        }
    }

    pub fn hard_count(&self, k: u64, n: usize) -> Result<usize> {
        Ok(hard_count_for(self.lambda(k)?, n))
    }
}

/// Whether the curriculum step counter advances per batch or per epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepUnit {
    #[default]
    Batch,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub ini: f64,
    pub inc: f64,
    /// Stage length; defaults to a fifth of the run.
    pub step: Option<u64>,
    /// Schedule horizon; defaults to the whole run.
    pub d: Option<u64>,
    pub unit: StepUnit,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            ini: 0.1,
            inc: 2.0,
            step: None,
            d: None,
            unit: StepUnit::Batch,
        }
    }
}

impl ScheduleConfig {
    /// Resolves the schedule for a run of `epochs` epochs of `steps_per_epoch` batches.
    pub fn resolve(&self, epochs: u64, steps_per_epoch: u64) -> Result<CurriculumSchedule> {
        let total = match self.unit {
            StepUnit::Batch => epochs * steps_per_epoch,
            StepUnit::Epoch => epochs,
        }
        .max(1);
        let d = self.d.unwrap_or(total);
        let step = self.step.unwrap_or((d / 5).max(1));
        CurriculumSchedule::new(self.ini, self.inc, step, d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale: [f64; 2],
    pub translate: f64,
    pub downsample: [f64; 2],
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub rotate_deg: f64,
    /// Probability that each easy sub-op is enabled.
    pub easy_prob: f64,
    pub shift: f64,
    /// Fraction of the bounding-box volume covered by a cuboid.
    pub cuboid_volume: [f64; 2],
    pub cuboid_scale: [f64; 2],
    pub min_survival: f64,
    pub cuboid_retries: u32,
    /// Inclusive range of hard sub-op counts.
    pub hard_ops: [usize; 2],
    /// `false` trains with easy views only.
    pub curriculum: bool,
    pub schedule: ScheduleConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            scale: [0.8, 1.2],
            translate: 0.1,
            downsample: [0.8, 1.0],
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            rotate_deg: 15.0,
            easy_prob: 0.5,
            shift: 0.2,
            cuboid_volume: [0.2, 0.4],
            cuboid_scale: [0.5, 1.5],
            min_survival: 0.5,
            cuboid_retries: 10,
            hard_ops: [1, 2],
            curriculum: true,
            schedule: ScheduleConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(AugmentError::InvalidConfig(format!(
            "{name} range {r:?} must be ordered within [{lo}, {hi}]"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("scale", self.scale, f64::MIN_POSITIVE, 100.0)?;
        check_range("downsample", self.downsample, f64::MIN_POSITIVE, 1.0)?;
        check_range("cuboid_volume", self.cuboid_volume, f64::MIN_POSITIVE, 1.0)?;
        check_range("cuboid_scale", self.cuboid_scale, 0.0, 100.0)?;
        let nonneg = [
            ("translate", self.translate),
            ("jitter_sigma", self.jitter_sigma),
            ("jitter_clip", self.jitter_clip),
            ("rotate_deg", self.rotate_deg),
            ("shift", self.shift),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AugmentError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.easy_prob) || !(0.0..=1.0).contains(&self.min_survival) {
            return Err(AugmentError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if self.hard_ops[0] == 0 || self.hard_ops[0] > self.hard_ops[1] || self.hard_ops[1] > 4 {
            return Err(AugmentError::InvalidConfig("hard_ops must satisfy 1 <= lo <= hi <= 4".into()));
        }
        if self.schedule.ini <= 0.0 || self.schedule.ini > 1.0 || self.schedule.inc <= 1.0 {
            return Err(AugmentError::InvalidSchedule("need 0 < ini <= 1 and inc > 1".into()));
        }
        Ok(())
    }
}

/// Names of the individual transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Scale,
    Translate,
    Downsample,
    Jitter,
    Rotate,
    FlipX,
    FlipY,
    Shift,
    CuboidAugment,
    DropCuboid,
}

/// Which augmentation view of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    A = 0,
    B = 1,
}

/// Identity of the random stream behind one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub epoch: u64,
    pub sample: u64,
    pub view: u64,
}

impl RngStream {
    pub fn new(seed: u64, epoch: u64, sample: u64, view: View) -> Self {
        Self {
            seed,
            epoch,
            sample,
            view: view as u64,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        rng::stream(&[rng::tag::VIEW, self.seed, self.epoch, self.sample, self.view])
    }
}

/// Parameters of one easy pass. `None` disables a sub-op.
#[derive(Debug, Clone, PartialEq)]
pub struct EasyPlan {
    pub scale: Option<f64>,
    pub translate: Option<Point>,
    /// `(ratio, fps start index)`.
    pub downsample: Option<(f64, usize)>,
    /// `(sigma, clip)`.
    pub jitter: Option<(f64, f64)>,
    /// `(unit axis, radians)`.
    pub rotate: Option<(Point, f64)>,
}

impl EasyPlan {
    pub fn identity() -> Self {
        Self {
            scale: None,
            translate: None,
            downsample: None,
            jitter: None,
            rotate: None,
        }
    }

    pub fn sample(cfg: &AugmentConfig, count: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut on = [false; 5];
        for flag in on.iter_mut() {
            *flag = rng.random_bool(cfg.easy_prob);
        }
        if !on.iter().any(|&f| f) {
            on[rng.random_range(0..on.len())] = true;
        }
        let mut plan = Self::identity();
        if on[0] {
            plan.scale = Some(uniform(rng, cfg.scale));
        }
        if on[1] {
            let t = cfg.translate;
            plan.translate = Some([0; 3].map(|_| uniform(rng, [-t, t])));
        }
        if on[2] {
            plan.downsample = Some((uniform(rng, cfg.downsample), rng.random_range(0..count)));
        }
        if on[3] {
            plan.jitter = Some((cfg.jitter_sigma, cfg.jitter_clip));
        }
        if on[4] {
            let r = cfg.rotate_deg.to_radians();
            plan.rotate = Some((random_axis(rng), uniform(rng, [-r, r])));
        }
        plan
    }

    pub fn kinds(&self) -> Vec<TransformKind> {
        let flags = [
            (self.scale.is_some(), TransformKind::Scale),
            (self.translate.is_some(), TransformKind::Translate),
            (self.downsample.is_some(), TransformKind::Downsample),
            (self.jitter.is_some(), TransformKind::Jitter),
            (self.rotate.is_some(), TransformKind::Rotate),
        ];
        flags.iter().filter(|f| f.0).map(|f| f.1).collect()
    }
}

/// One hard sub-op. Cuboids are drawn from the stream when applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HardOp {
    Flip { x: bool, y: bool },
    Shift(Point),
    CuboidAugment,
    DropCuboid,
}

impl HardOp {
    pub fn kinds(&self) -> Vec<TransformKind> {
        match *self {
            HardOp::Flip { x, y } => {
                let mut k = Vec::new();
                if x {
                    k.push(TransformKind::FlipX);
                }
                if y {
                    k.push(TransformKind::FlipY);
                }
                k
            }
            HardOp::Shift(_) => vec![TransformKind::Shift],
            HardOp::CuboidAugment => vec![TransformKind::CuboidAugment],
            HardOp::DropCuboid => vec![TransformKind::DropCuboid],
        }
    }
}

pub fn sample_hard_ops(cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<HardOp> {
    let count = rng.random_range(cfg.hard_ops[0]..=cfg.hard_ops[1]);
    let families = index::sample(rng, 4, count).into_vec();
    families
        .into_iter()
        .map(|f| match f {
            0 => match rng.random_range(0..3) {
                0 => HardOp::Flip { x: true, y: false },
                1 => HardOp::Flip { x: false, y: true },
                _ => HardOp::Flip { x: true, y: true },
            },
            1 => {
                let s = cfg.shift;
                HardOp::Shift([0; 3].map(|_| uniform(rng, [-s, s])))
            }
            2 => HardOp::CuboidAugment,
            _ => HardOp::DropCuboid,
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v: Point = [0; 3].map(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return v.map(|c| c / n);
        }
    }
}

/// Applies an easy plan; `rng` supplies the jitter noise.
pub fn apply_easy_plan(cloud: &PointCloud, plan: &EasyPlan, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let mut pts = cloud.points().to_vec();
    if let Some(s) = plan.scale {
        pts.iter_mut().for_each(|p| *p = p.map(|c| c * s));
    }
    if let Some(t) = plan.translate {
        pts.iter_mut().for_each(|p| *p = [p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
    }
    if let Some((ratio, start)) = plan.downsample {
        let m = ((ratio * pts.len() as f64).round() as usize).clamp(1, pts.len());
        let current = PointCloud::new(pts)?;
        let mut idx = geometry::fps(&current, m, start.min(current.len() - 1))?;
        idx.sort_unstable();
        pts = current.select(&idx)?.into_points();
    }
    if let Some((sigma, clip)) = plan.jitter {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| AugmentError::InvalidConfig(e.to_string()))?;
            for p in pts.iter_mut() {
                for c in p.iter_mut() {
                    *c += normal.sample(rng).clamp(-clip, clip);
                }
            }
        }
    }
    if let Some((axis, angle)) = plan.rotate {
        let m = axis_angle(axis, angle);
        pts.iter_mut().for_each(|p| *p = geometry::apply(&m, p));
    }
    Ok(PointCloud::new(pts)?)
}

fn bounding_box(pts: &[Point]) -> (Point, Point) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pts {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Axis-aligned cuboid centred on a random point, covering a random fraction
/// of the bounding-box volume.
fn sample_cuboid(pts: &[Point], cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> (Point, Point) {
    let (lo, hi) = bounding_box(pts);
    let side = uniform(rng, cfg.cuboid_volume).cbrt();
    let center = pts[rng.random_range(0..pts.len())];
    let half = [0, 1, 2].map(|a| 0.5 * side * (hi[a] - lo[a]));
    (center, half)
}

fn inside(p: &Point, center: &Point, half: &Point) -> bool {
    (0..3).all(|a| (p[a] - center[a]).abs() <= half[a])
}

/// Applies hard sub-ops in order to an already easy-augmented cloud.
pub fn apply_hard_ops(
    cloud: &PointCloud,
    ops: &[HardOp],
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PointCloud> {
    let mut pts = cloud.points().to_vec();
    for op in ops {
        match *op {
            HardOp::Flip { x, y } => {
                for p in pts.iter_mut() {
                    if x {
                        p[0] = -p[0];
                    }
                    if y {
                        p[1] = -p[1];
                    }
                }
            }
            HardOp::Shift(t) => {
                pts.iter_mut().for_each(|p| *p = [p[0] + t[0], p[1] + t[1], p[2] + t[2]]);
            }
            HardOp::CuboidAugment => {
                let (center, half) = sample_cuboid(&pts, cfg, rng);
                let f = [0; 3].map(|_| uniform(rng, cfg.cuboid_scale));
                for p in pts.iter_mut().filter(|p| inside(p, &center, &half)) {
                    *p = [0, 1, 2].map(|a| center[a] + (p[a] - center[a]) * f[a]);
                }
            }
            HardOp::DropCuboid => {
                let need = ((cfg.min_survival * pts.len() as f64).ceil() as usize).max(1);
                for _ in 0..cfg.cuboid_retries {
                    let (center, half) = sample_cuboid(&pts, cfg, rng);
                    let kept: Vec<Point> =
                        pts.iter().copied().filter(|p| !inside(p, &center, &half)).collect();
                    if kept.len() >= need {
                        pts = kept;
                        break;
                    }
                }
            }
        }
    }
    Ok(PointCloud::new(pts)?)
}

pub fn apply_easy(cloud: &PointCloud, stream: &RngStream, cfg: &AugmentConfig) -> Result<PointCloud> {
    let mut rng = stream.rng();
    let plan = EasyPlan::sample(cfg, cloud.len(), &mut rng);
    apply_easy_plan(cloud, &plan, &mut rng)
}

/// An easy pass followed by 1–2 hard sub-ops.
pub fn apply_hard(cloud: &PointCloud, stream: &RngStream, cfg: &AugmentConfig) -> Result<PointCloud> {
    if cloud.len() < MIN_HARD_POINTS {
        return Err(AugmentError::TooFewPoints {
            count: cloud.len(),
            min: MIN_HARD_POINTS,
        });
    }
    let mut rng = stream.rng();
    let plan = EasyPlan::sample(cfg, cloud.len(), &mut rng);
    let easy = apply_easy_plan(cloud, &plan, &mut rng)?;
    let ops = sample_hard_ops(cfg, &mut rng);
    apply_hard_ops(&easy, &ops, cfg, &mut rng)
}

/// Exactly `n` points: a random subset, or every point plus random repeats.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    let len = cloud.len();
    let idx = if len >= n {
        let mut idx = index::sample(rng, len, n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    };
    Ok(cloud.select(&idx)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub a: PointCloud,
    pub b: PointCloud,
    pub hard: bool,
}

/// Builds both views of every sample. `batch` pairs each cloud with its
/// stable sample index. The first `N - N_k^c` samples receive easy views, the
/// rest hard views. When `points` is set every view is resampled to that size.
pub fn make_batch_pairs(
    batch: &[(u64, &PointCloud)],
    curriculum: &Curriculum,
    k: u64,
    seed: u64,
    epoch: u64,
    cfg: &AugmentConfig,
    points: Option<usize>,
) -> Result<Vec<ViewPair>> {
    if batch.len() < 2 {
        return Err(AugmentError::BatchTooSmall(batch.len()));
    }
    let n_hard = curriculum.hard_count(k, batch.len())?;
    let first_hard = batch.len() - n_hard;
    par::map(batch, |i, &(sample, cloud)| -> Result<ViewPair> {
        let hard = i >= first_hard;
        let view = |v: View| -> Result<PointCloud> {
            let stream = RngStream::new(seed, epoch, sample, v);
            let out = if hard {
                apply_hard(cloud, &stream, cfg)?
            } else {
                apply_easy(cloud, &stream, cfg)?
            };
            match points {
                Some(n) => {
                    let mut r = rng::stream(&[rng::tag::RESAMPLE, seed, epoch, sample, v as u64]);
                    resample(&out, n, &mut r)
                }
                None => Ok(out),
            }
        };
        Ok(ViewPair {
            a: view(View::A)?,
            b: view(View::B)?,
            hard,
        })
    })
    .into_iter()
    .collect()
}
