//! Minibatch training with online augmentation, validation, and best-val
//! checkpoint selection.

use std::time::Instant;

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply, sample_params, AugmentConfig, AugmentParams, TrainingSample};
use crate::dataset::{select_training_slices, CaseSlices};
use crate::error::{CbctError, Result};
use crate::models::{build, forward, Model, ModelSpec};
use crate::nn::{adam_step, combined_loss, AdamState, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            lambda: 1e-3,
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CbctError::Config(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.lambda < 0.0 {
            return Err(CbctError::Config("lambda must be >= 0".into()));
        }
        if !(self.lr > 0.0) {
            return Err(CbctError::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLogRow {
    pub epoch: usize,
    pub split: String,
    pub mse: f64,
    pub dice: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

impl EpochLogRow {
    pub const CSV_HEADER: &'static str = "epoch,split,mse,dice,total,wall_seconds";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.mse, self.dice, self.total, self.wall_seconds
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Model carrying the best-validation parameters.
    pub model: Model<f32>,
    pub log: Vec<EpochLogRow>,
    pub best_epoch: usize,
    pub best_val_total: f64,
    pub adam: AdamState<f32>,
    pub epochs_completed: usize,
}

/// Slice references into the loaded cases.
type SampleRef = (usize, usize); // (case index, z)

fn raw_sample(case: &CaseSlices, z: usize) -> TrainingSample {
    TrainingSample {
        sparse: case.sparse[z].clone(),
        prior: case.prior[z].clone(),
        target_recon: case.ground_truth[z].clone(),
        target_mask: case.mask[z].clone(),
    }
}

fn stack(samples: &[TrainingSample]) -> (Array4<f32>, Array4<f32>, Array4<f32>, Array4<f32>) {
    let n = samples.len();
    let (h, w) = (samples[0].sparse.h, samples[0].sparse.w);
    let mut sparse = Array4::<f32>::zeros((n, 1, h, w));
    let mut prior = Array4::<f32>::zeros((n, 1, h, w));
    let mut gt = Array4::<f32>::zeros((n, 1, h, w));
    let mut mask = Array4::<f32>::zeros((n, 1, h, w));
    for (b, s) in samples.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                sparse[[b, 0, r, c]] = s.sparse.at(r, c);
                prior[[b, 0, r, c]] = s.prior.at(r, c);
                gt[[b, 0, r, c]] = s.target_recon.at(r, c);
                mask[[b, 0, r, c]] = s.target_mask.at(r, c);
            }
        }
    }
    (sparse, prior, gt, mask)
}

struct RunningLoss {
    mse: f64,
    dice: f64,
    total: f64,
    n: usize,
}

impl RunningLoss {
    fn new() -> Self {
        RunningLoss {
            mse: 0.0,
            dice: 0.0,
            total: 0.0,
            n: 0,
        }
    }
    fn add(&mut self, mse: f32, dice: f32, total: f32, batch: usize) {
        self.mse += mse as f64 * batch as f64;
        self.dice += dice as f64 * batch as f64;
        self.total += total as f64 * batch as f64;
        self.n += batch;
    }
    fn row(&self, epoch: usize, split: &str, wall: f64) -> EpochLogRow {
        let n = self.n.max(1) as f64;
        EpochLogRow {
            epoch,
            split: split.to_string(),
            mse: self.mse / n,
            dice: self.dice / n,
            total: self.total / n,
            wall_seconds: wall,
        }
    }
}

/// Train a freshly built model (or continue a resumed one) on the given
/// splits. Minimizes MSE + λ·Dice over shuffled minibatches with online
/// augmentation; logs one train row and one val row per epoch; keeps the
/// parameters of the best validation epoch.
pub fn train(
    spec: &ModelSpec,
    config: &TrainConfig,
    train_cases: &[CaseSlices],
    val_cases: &[CaseSlices],
    resume: Option<(Model<f32>, AdamState<f32>, usize)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_cases.is_empty() {
        return Err(CbctError::InvalidArgument("empty training split".into()));
    }

    let (mut model, mut adam, start_epoch) = match resume {
        Some((m, a, done)) => {
            if m.spec.kind != spec.kind {
                return Err(CbctError::InvalidArgument(
                    "resume checkpoint has a different model kind".into(),
                ));
            }
            (m, a, done)
        }
        None => {
            let m = build::<f32>(spec)?;
            let a = AdamState::new(&m.param_values(), config.lr as f32);
            (m, a, 0)
        }
    };

    let train_samples: Vec<SampleRef> = train_cases
        .iter()
        .enumerate()
        .flat_map(|(ci, case)| {
            select_training_slices(case, config.seed.wrapping_add(ci as u64))
                .into_iter()
                .map(move |z| (ci, z))
        })
        .collect();
    if train_samples.is_empty() {
        return Err(CbctError::InvalidArgument(
            "training split contains no usable slices".into(),
        ));
    }
    let val_samples: Vec<SampleRef> = val_cases
        .iter()
        .enumerate()
        .flat_map(|(ci, case)| (0..case.sparse.len()).map(move |z| (ci, z)))
        .collect();

    let mut order_rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut aug_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x00a6));

    let mut log = Vec::new();
    let mut best_val_total = f64::INFINITY;
    let mut best_epoch = start_epoch;
    let mut best_params = model.param_values();
    let mut step = adam.t;

    for epoch in start_epoch..start_epoch + config.epochs {
        let t0 = Instant::now();
        let mut order = train_samples.clone();
        order.shuffle(&mut order_rng);
        let mut train_stats = RunningLoss::new();

        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<TrainingSample> = chunk
                .iter()
                .map(|&(ci, z)| {
                    let params = sample_params(&mut aug_rng, &config.augment);
                    apply(&raw_sample(&train_cases[ci], z), &params)
                })
                .collect();
            let (sparse, prior, gt, mask) = stack(&samples);

            let mut tape = Tape::<f32>::new();
            let prior_arg = model.spec.kind.uses_prior().then_some(&prior);
            let pred = forward(&model, &mut tape, &sparse, prior_arg, true)?;
            let (loss_id, breakdown) = combined_loss(
                &mut tape,
                pred.p_r,
                pred.p_s,
                &gt,
                pred.p_s.is_some().then_some(&mask),
                config.lambda as f32,
            )?;
            step += 1;
            if !breakdown.total.is_finite() {
                return Err(CbctError::TrainingDiverged { epoch, step });
            }
            tape.backward(loss_id)?;
            let grads: Vec<Array4<f32>> = pred
                .param_ids
                .iter()
                .map(|&id| {
                    tape.take_grad(id)
                        .unwrap_or_else(|| Array4::zeros(tape.value(id).dim()))
                })
                .collect();
            let mut values = model.param_values();
            adam_step(&mut values, &grads, &mut adam)?;
            model.set_param_values(&values);
            train_stats.add(breakdown.mse, breakdown.dice, breakdown.total, chunk.len());
        }
        let train_wall = t0.elapsed().as_secs_f64();
        log.push(train_stats.row(epoch, "train", train_wall));

        // validation: no augmentation, aligned prior
        let tv = Instant::now();
        let mut val_stats = RunningLoss::new();
        for chunk in val_samples.chunks(config.batch_size.max(1)) {
            if chunk.is_empty() {
                continue;
            }
            let samples: Vec<TrainingSample> = chunk
                .iter()
                .map(|&(ci, z)| apply(&raw_sample(&val_cases[ci], z), &AugmentParams::IDENTITY))
                .collect();
            let (sparse, prior, gt, mask) = stack(&samples);
            let mut tape = Tape::<f32>::new();
            let prior_arg = model.spec.kind.uses_prior().then_some(&prior);
            let pred = forward(&model, &mut tape, &sparse, prior_arg, false)?;
            let (_, breakdown) = combined_loss(
                &mut tape,
                pred.p_r,
                pred.p_s,
                &gt,
                pred.p_s.is_some().then_some(&mask),
                config.lambda as f32,
            )?;
            val_stats.add(breakdown.mse, breakdown.dice, breakdown.total, chunk.len());
        }
        let val_row = val_stats.row(epoch, "val", tv.elapsed().as_secs_f64());
        let val_total = if val_samples.is_empty() {
            // no validation data: fall back to the training loss
            log.last().unwrap().total
        } else {
            val_row.total
        };
        if !val_samples.is_empty() {
            log.push(val_row);
        }

        if val_total < best_val_total {
            best_val_total = val_total;
            best_epoch = epoch;
            best_params = model.param_values();
        }
    }

    model.set_param_values(&best_params);
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_val_total,
        adam,
        epochs_completed: start_epoch + config.epochs,
    })
}
