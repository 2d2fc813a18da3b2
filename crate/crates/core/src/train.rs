//! Masked cross-entropy objective, Adam, the mini-batch loop with early
//! stopping, and the finite-difference gradient check.

use std::io::Write;
use std::time::Instant;

use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, MaskedInstance};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::metrics::{EvalReport, SlotOutcome};
use crate::model::{instance_cross_entropy, instance_gradient, predict, ModelConfig, ModelParams};
use crate::seed::{stream_seed, Stream};

/// Instances per unit of parallel work. Fixed so that the summation order,
/// and therefore every bit of the gradient, is independent of the thread
/// count.
const REDUCTION_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation Recall improvement before stopping.
    pub patience: usize,
    pub rng_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 50,
            patience: 5,
            rng_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment decay rates must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `-sum log P(truth)` over masked slots.
    pub cross_entropy: f64,
    /// Squared Frobenius norm of every matrix in the parameters.
    pub regularizer: f64,
    /// `cross_entropy + lambda * regularizer`.
    pub total: f64,
    pub n_slots: usize,
    /// Slots whose truth probability hit the floor.
    pub n_clamped: usize,
}

impl LossReport {
    fn new(cross_entropy: f64, regularizer: f64, lambda: f64, n_slots: usize, n_clamped: usize) -> Self {
        LossReport {
            cross_entropy,
            regularizer,
            total: cross_entropy + lambda * regularizer,
            n_slots,
            n_clamped,
        }
    }
}

fn check_batch(batch: &[MaskedInstance]) -> Result<()> {
    if batch.iter().any(|i| i.masked.is_empty()) {
        return Err(Error::InvalidConfig("every instance needs at least one masked slot".into()));
    }
    Ok(())
}

/// Objective over a batch.
pub fn loss(batch: &[MaskedInstance], params: &ModelParams, lambda: f64) -> Result<LossReport> {
    check_batch(batch)?;
    let per: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|inst| instance_cross_entropy(params, inst))
        .collect::<Result<_>>()?;
    let ce = per.iter().map(|p| p.0).sum();
    let clamped = per.iter().map(|p| p.1).sum();
    let slots = batch.iter().map(|i| i.masked.len()).sum();
    Ok(LossReport::new(ce, params.squared_norm(), lambda, slots, clamped))
}

/// Objective and its gradient over a batch, regulariser included.
pub fn batch_gradient(batch: &[MaskedInstance], params: &ModelParams, lambda: f64) -> Result<(LossReport, ModelParams)> {
    check_batch(batch)?;
    let partial: Vec<(ModelParams, f64, usize, usize)> = batch
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut grads = params.zeros_like();
            let (mut ce, mut slots, mut clamped) = (0.0, 0, 0);
            for inst in chunk {
                let g = instance_gradient(params, inst)?;
                grads.add_scaled(&g.grads, 1.0);
                ce += g.cross_entropy;
                slots += g.n_slots;
                clamped += g.n_clamped;
            }
            Ok((grads, ce, slots, clamped))
        })
        .collect::<Result<_>>()?;

    let mut grads = params.zeros_like();
    let (mut ce, mut slots, mut clamped) = (0.0, 0, 0);
    for (g, c, s, k) in &partial {
        grads.add_scaled(g, 1.0);
        ce += c;
        slots += s;
        clamped += k;
    }
    if lambda != 0.0 {
        grads.add_scaled(params, 2.0 * lambda);
    }
    Ok((LossReport::new(ce, params.squared_norm(), lambda, slots, clamped), grads))
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ModelParams,
    v: ModelParams,
    steps: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, cfg: &TrainConfig) -> Self {
        Adam {
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.steps += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.lr);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        let gs: Vec<_> = grads.matrices().into_iter().map(|(_, g)| g).collect();
        let ps = params.matrices_mut();
        let ms = self.m.matrices_mut();
        let vs = self.v.matrices_mut();
        for (((p, m), v), g) in ps.into_iter().zip(ms).zip(vs).zip(gs) {
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Recall, MAP and Distance of the model over every masked slot of
/// `instances`.
pub fn evaluate_model(params: &ModelParams, instances: &[MaskedInstance], grid: &GridSpec) -> Result<EvalReport> {
    let per: Vec<Vec<SlotOutcome>> = instances
        .par_iter()
        .map(|inst| {
            let rec = predict(inst, params)?;
            rec.slots
                .iter()
                .map(|s| {
                    let truth = inst.truth_at(s.slot).expect("slot is masked");
                    Ok(SlotOutcome {
                        prediction: s.top(),
                        truth,
                        truth_rank: s.rank_of(truth).ok_or(Error::TruthNotRanked)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    EvalReport::from_outcomes(&per.concat(), grid)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed over the epoch's batches, each at the parameters it was
    /// computed with.
    pub train_cross_entropy: f64,
    /// At the end of the epoch.
    pub train_regularizer: f64,
    pub train_total: f64,
    pub train_ce_per_slot: f64,
    pub n_clamped: usize,
    pub val_recall: f64,
    pub val_map: f64,
    pub val_distance_m: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    /// The record with wall time zeroed, for comparing runs.
    pub fn untimed(&self) -> EpochLog {
        EpochLog {
            wall_seconds: 0.0,
            ..self.clone()
        }
    }
}

pub fn write_log<W: Write>(mut w: W, log: &[EpochLog]) -> std::io::Result<()> {
    for rec in log {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation Recall.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Initialises parameters from the config's seed and trains them.
pub fn train(split: &DatasetSplit, model: ModelConfig, grid: &GridSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.rng_seed, Stream::Init));
    let params = ModelParams::init(model, &mut rng)?;
    train_from(params, split, grid, cfg, |_| {})
}

/// Trains starting from `initial`, calling `on_epoch` after every epoch.
pub fn train_from(
    initial: ModelParams,
    split: &DatasetSplit,
    grid: &GridSpec,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    if split.validation.is_empty() {
        return Err(Error::InvalidConfig("validation split is empty".into()));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.rng_seed, Stream::Shuffle));
    let mut params = initial;
    let mut adam = Adam::new(&params, cfg);
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut log = Vec::new();
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut ce, mut slots, mut clamped) = (0.0, 0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<MaskedInstance> = idx.iter().map(|&i| split.train[i].clone()).collect();
            let (report, grads) = batch_gradient(&batch, &params, cfg.lambda)?;
            if !report.total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b + 1 });
            }
            ce += report.cross_entropy;
            slots += report.n_slots;
            clamped += report.n_clamped;
            adam.step(&mut params, &grads);
        }
        let val = evaluate_model(&params, &split.validation, grid)?;
        let reg = params.squared_norm();
        let rec = EpochLog {
            epoch,
            train_cross_entropy: ce,
            train_regularizer: reg,
            train_total: ce + cfg.lambda * reg,
            train_ce_per_slot: ce / slots.max(1) as f64,
            n_clamped: clamped,
            val_recall: val.recall,
            val_map: val.map,
            val_distance_m: val.distance_m,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.push(rec);

        if best.as_ref().is_none_or(|(r, _, _)| val.recall > *r) {
            best = Some((val.recall, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    match best {
        Some((_, best_epoch, params)) => Ok(TrainOutcome { params, best_epoch, log }),
        None => Ok(TrainOutcome {
            params,
            best_epoch: 0,
            log,
        }),
    }
}

/// Finite-difference result for one parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixCheck {
    pub name: String,
    pub n_entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub matrices: Vec<MatrixCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.matrices.iter().all(|m| m.max_rel_error < self.tolerance)
    }

    pub fn worst(&self) -> Option<&MatrixCheck> {
        self.matrices.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Denominator floor for relative errors, so entries whose true gradient is
/// zero are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the analytic gradient against central differences of [`loss`]
/// for every entry of every matrix.
pub fn grad_check(params: &ModelParams, batch: &[MaskedInstance], lambda: f64, step: f64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(params, batch, lambda, step, tolerance, |_| {})
}

/// Like [`grad_check`], letting `tamper` modify the analytic gradient first.
pub fn grad_check_with(
    params: &ModelParams,
    batch: &[MaskedInstance],
    lambda: f64,
    step: f64,
    tolerance: f64,
    tamper: impl FnOnce(&mut ModelParams),
) -> Result<GradCheckReport> {
    let (_, mut analytic) = batch_gradient(batch, params, lambda)?;
    tamper(&mut analytic);
    let analytic: Vec<(String, Vec<f64>)> = analytic
        .matrices()
        .into_iter()
        .map(|(n, m)| (n, m.iter().copied().collect()))
        .collect();

    let mut probe = params.clone();
    let mut matrices = Vec::with_capacity(analytic.len());
    for (mi, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (ei, &a) in grad.iter().enumerate() {
            let original = entry(&mut probe, mi, ei);
            *entry_mut(&mut probe, mi, ei) = original + step;
            let up = loss(batch, &probe, lambda)?.total;
            *entry_mut(&mut probe, mi, ei) = original - step;
            let down = loss(batch, &probe, lambda)?.total;
            *entry_mut(&mut probe, mi, ei) = original;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        matrices.push(MatrixCheck {
            name: name.clone(),
            n_entries: grad.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport { tolerance, matrices })
}

fn entry(p: &mut ModelParams, matrix: usize, flat: usize) -> f64 {
    *entry_mut(p, matrix, flat)
}

fn entry_mut(p: &mut ModelParams, matrix: usize, flat: usize) -> &mut f64 {
    let m = p.matrices_mut().swap_remove(matrix);
    let cols = m.ncols();
    &mut m[[flat / cols, flat % cols]]
}
