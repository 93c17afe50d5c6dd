//! Pre-training loop: curriculum views, shared encoder, both heads, the
//! joint objective and an optimizer step per batch.

mod optim;

pub use optim::{cosine_lr, step_adam, step_sgd, AdamParams, OptimizerKind, OptimizerState};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{self, AugmentError, Curriculum, StepUnit};
use crate::config::RunConfig;
use crate::geometry::PointCloud;
use crate::loss::{self, LossError, LossReport};
use crate::model::{self, Checkpoint, ModelError, ModelParams, RngState};
use crate::rng;
use crate::tensor::{Graph, TensorError};

pub const METRICS_HEADER: &str = "step,epoch,lambda,l_fea,l_cls,l_cr,l_overall,mi_fea,mi_cls,lr";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or parameter at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("dataset has {have} clouds, need at least {need}")]
    DatasetTooSmall { have: usize, need: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot resume: {0}")]
    ResumeMismatch(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    /// Every view is resampled to this many points.
    pub view_points: usize,
    pub optimizer: OptimizerKind,
    pub lr_init: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Intermediate checkpoint period in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            view_points: 256,
            optimizer: OptimizerKind::SgdMomentum,
            lr_init: 1e-3,
            lr_min: 1e-6,
            momentum: 0.9,
            weight_decay: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.view_points == 0 {
            return bad("view_points must be positive");
        }
        if !(self.lr_min > 0.0 && self.lr_init >= self.lr_min && self.lr_init.is_finite()) {
            return bad("need lr_init >= lr_min > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps > 0");
        }
        Ok(())
    }
}

/// One metrics CSV row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    /// 1-based optimizer step.
    pub step: u64,
    pub epoch: u64,
    pub lambda: f64,
    pub report: LossReport,
    pub lr: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lambda,
            r.l_fea,
            r.l_cls,
            r.l_cr,
            r.l_overall,
            r.mi_fea_estimate,
            r.mi_cls_estimate,
            self.lr
        )
    }
}

#[derive(Debug, Default)]
pub struct PretrainOptions {
    /// Receives `metrics.csv`, `checkpoints/` and `final.psml`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stops after this many total steps, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Rows produced by this call.
    pub metrics: Vec<MetricsRow>,
}

/// Steps per epoch with partial batches dropped.
pub fn steps_per_epoch(dataset: usize, batch: usize) -> u64 {
    (dataset / batch) as u64
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(&[rng::tag::SHUFFLE, seed, epoch]));
    order
}

fn write_metrics(dir: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::with_capacity(lines.len() * 96);
    text.push_str(METRICS_HEADER);
    text.push('\n');
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(dir.join("metrics.csv"), text)?;
    Ok(())
}

fn existing_metrics(dir: &Path, keep: u64) -> Result<Vec<String>> {
    let path = dir.join("metrics.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let rows: Vec<String> = text.lines().skip(1).take(keep as usize).map(str::to_owned).collect();
    if (rows.len() as u64) < keep {
        return Err(TrainError::ResumeMismatch(format!(
            "metrics.csv has {} rows, checkpoint is at step {keep}",
            rows.len()
        )));
    }
    Ok(rows)
}

/// Loss report and parameter gradients of one batch of view pairs.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    pairs: &[augment::ViewPair],
    cfg: &loss::LossConfig,
) -> Result<(LossReport, Vec<Vec<f32>>)> {
    let n = pairs.len();
    let points = pairs[0].a.len();
    let a: Vec<&PointCloud> = pairs.iter().map(|p| &p.a).collect();
    let b: Vec<&PointCloud> = pairs.iter().map(|p| &p.b).collect();
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g, true);
    let xa = g.constant(model::stack_clouds(&a)?);
    let xb = g.constant(model::stack_clouds(&b)?);
    let fa = model::encode(&mut g, &bound, xa, n, points)?;
    let fb = model::encode(&mut g, &bound, xb, n, points)?;
    let za = model::project(&mut g, &bound, fa)?;
    let zb = model::project(&mut g, &bound, fb)?;
    let ya = model::classify(&mut g, &bound, fa)?;
    let yb = model::classify(&mut g, &bound, fb)?;
    let (vars, report) = loss::total_loss(&mut g, za, zb, ya, yb, cfg)?;
    if !report.l_overall.is_finite() {
        return Ok((report, Vec::new()));
    }
    g.backward(vars.l_overall)?;
    let grads = bound
        .vars()
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
        .collect();
    Ok((report, grads))
}

/// Runs pre-training on unlabeled, normalised clouds.
pub fn pretrain(data: &[PointCloud], cfg: &RunConfig, opts: PretrainOptions) -> Result<PretrainOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    cfg.augment.validate()?;
    cfg.loss.validate()?;
    cfg.model.validate()?;
    let need = 2 * tc.batch_size;
    if data.len() < need {
        return Err(TrainError::DatasetTooSmall { have: data.len(), need });
    }
    let spe = steps_per_epoch(data.len(), tc.batch_size);
    let total = tc.epochs * spe;
    let schedule = cfg.augment.schedule.resolve(tc.epochs, spe)?;
    let curriculum = if cfg.augment.curriculum {
        Curriculum::Cda(schedule)
    } else {
        Curriculum::Sda
    };
    let echo = serde_json::to_value(cfg).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;

    let (mut params, mut state, start) = match opts.resume {
        Some(ck) => {
            if ck.config != echo {
                return Err(TrainError::ResumeMismatch("checkpoint was written with a different config".into()));
            }
            if ck.step > total {
                return Err(TrainError::ResumeMismatch(format!("checkpoint step {} beyond {total}", ck.step)));
            }
            let state = ck
                .optimizer
                .ok_or_else(|| TrainError::ResumeMismatch("checkpoint has no optimizer state".into()))?;
            (ck.params, state, ck.step)
        }
        None => {
            let params = ModelParams::<f32>::init(cfg.model, tc.seed)?;
            let state = OptimizerState::new(tc.optimizer, params.tensors());
            (params, state, 0)
        }
    };
    if state.kind != tc.optimizer {
        return Err(TrainError::ResumeMismatch("optimizer kind differs".into()));
    }

    let out_dir = opts.out_dir.as_deref();
    let mut lines = match out_dir {
        Some(d) => {
            fs::create_dir_all(d.join("checkpoints"))?;
            if start > 0 {
                existing_metrics(d, start)?
            } else {
                Vec::new()
            }
        }
        None => Vec::new(),
    };
    let checkpoint_at = |params: &ModelParams<f32>, state: &OptimizerState, step: u64| Checkpoint {
        params: params.clone(),
        optimizer: Some(state.clone()),
        step,
        rng: RngState {
            seed: tc.seed,
            epoch: step / spe.max(1),
            batch: step % spe.max(1),
        },
        config: echo.clone(),
    };

    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let adam = AdamParams {
        beta1: tc.adam_beta1,
        beta2: tc.adam_beta2,
        eps: tc.adam_eps,
    };
    let mut rows = Vec::new();
    let mut order: Option<(u64, Vec<usize>)> = None;
    for s in start..end {
        let epoch = s / spe;
        let pos = (s % spe) as usize;
        if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(tc.seed, epoch, data.len())));
        }
        let idx = &order.as_ref().expect("order set").1[pos * tc.batch_size..(pos + 1) * tc.batch_size];
        let batch: Vec<(u64, &PointCloud)> = idx.iter().map(|&i| (i as u64, &data[i])).collect();
        let k = match cfg.augment.schedule.unit {
            StepUnit::Batch => s,
            StepUnit::Epoch => epoch,
        };
        let lambda = curriculum.lambda(k)?;
        let pairs = augment::make_batch_pairs(
            &batch,
            &curriculum,
            k,
            tc.seed,
            epoch,
            &cfg.augment,
            Some(tc.view_points),
        )?;
        let (report, grads) = batch_gradients(&params, &pairs, &cfg.loss)?;
        if !report.l_overall.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: s + 1 });
        }
        let lr = cosine_lr(s, total, tc.lr_init, tc.lr_min)?;
        match tc.optimizer {
            OptimizerKind::SgdMomentum => step_sgd(
                params.tensors_mut(),
                &grads,
                &mut state,
                lr,
                tc.momentum,
                tc.weight_decay,
            )?,
            OptimizerKind::Adam => step_adam(params.tensors_mut(), &grads, &mut state, lr, adam, tc.weight_decay)?,
        }
        if !params.all_finite() {
            return Err(TrainError::NonFiniteLoss { step: s + 1 });
        }
        let row = MetricsRow {
            step: s + 1,
            epoch,
            lambda,
            report,
            lr,
        };
        lines.push(row.csv());
        rows.push(row);
        if let Some(d) = out_dir {
            if tc.checkpoint_every > 0 && (s + 1) % tc.checkpoint_every == 0 {
                checkpoint_at(&params, &state, s + 1).save(d.join("checkpoints").join(format!("step_{:06}.psml", s + 1)))?;
                write_metrics(d, &lines)?;
            }
        }
    }
    let checkpoint = checkpoint_at(&params, &state, end);
    if let Some(d) = out_dir {
        write_metrics(d, &lines)?;
        checkpoint.save(d.join("final.psml"))?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        metrics: rows,
    })
}
