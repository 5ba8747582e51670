//! Mini-batch SGD over a client's local data or a cluster-wide union view.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ClientDataset, Dataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::layers::sgd_apply;
use super::{backward, forward, forward_eval, kd_loss_and_grad, ModelParams};
use super::{ce_loss_and_grad};

/// Hyperparameters for one local training call.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub kd_temperature: f64,
    /// Mixing weight λ of the distillation term; 0 disables distillation.
    pub kd_weight: f64,
    pub rng_seed: u64,
    /// Pad the batch by resampling with replacement when a client holds
    /// fewer than `batch_size` rows instead of erroring.
    pub allow_small_clients: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            local_epochs: 1,
            learning_rate: 0.01,
            kd_temperature: 3.0,
            kd_weight: 0.5,
            rng_seed: 0,
            allow_small_clients: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.local_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch size and local epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.kd_temperature <= 0.0 || !self.kd_temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kd temperature {} must be positive",
                self.kd_temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::InvalidArgument(format!(
                "kd weight {} outside [0, 1]",
                self.kd_weight
            )));
        }
        Ok(())
    }

    /// SGD steps for one round on `d` rows: `floor(E * d / B)`.
    pub fn steps(&self, d: usize) -> usize {
        self.local_epochs * d / self.batch_size
    }

    pub fn with_seed(&self, rng_seed: u64) -> TrainConfig {
        TrainConfig {
            rng_seed,
            ..self.clone()
        }
    }
}

/// A training data source: one client's rows, or a union of several
/// clients' rows addressed as (part, row) pairs.
pub enum DataView<'a> {
    Whole(&'a Dataset),
    Union {
        parts: Vec<&'a Dataset>,
        rows: Vec<(u32, u32)>,
    },
}

impl<'a> DataView<'a> {
    pub fn len(&self) -> usize {
        match self {
            DataView::Whole(d) => d.len(),
            DataView::Union { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_len(&self) -> usize {
        match self {
            DataView::Whole(d) => d.features().row_len(),
            DataView::Union { parts, .. } => parts[0].features().row_len(),
        }
    }

    fn sample_shape(&self) -> &[usize] {
        match self {
            DataView::Whole(d) => &d.features().shape()[1..],
            DataView::Union { parts, .. } => &parts[0].features().shape()[1..],
        }
    }

    /// Copy the given rows into a contiguous batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let row_len = self.row_len();
        let mut features = Vec::with_capacity(idx.len() * row_len);
        let mut labels = Vec::with_capacity(idx.len());
        match self {
            DataView::Whole(d) => {
                let data = d.features().data();
                for &i in idx {
                    features.extend_from_slice(&data[i * row_len..(i + 1) * row_len]);
                    labels.push(d.labels()[i]);
                }
            }
            DataView::Union { parts, rows } => {
                for &i in idx {
                    let (p, r) = rows[i];
                    let (p, r) = (p as usize, r as usize);
                    let data = parts[p].features().data();
                    features.extend_from_slice(&data[r * row_len..(r + 1) * row_len]);
                    labels.push(parts[p].labels()[r]);
                }
            }
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, features)?, labels))
    }
}

/// Train `params` on a client's local rows. Runs `floor(E*d/B)` SGD steps
/// over seeded shuffled mini-batches; uses the distillation loss when a
/// teacher is given (and λ > 0), plain cross-entropy otherwise. Returns the
/// updated parameters and the mean training loss over the final epoch.
pub fn sgd_train(
    params: &ModelParams,
    data: &ClientDataset,
    cfg: &TrainConfig,
    teacher: Option<&ModelParams>,
) -> Result<(ModelParams, f64)> {
    sgd_train_view(params, &DataView::Whole(data.data()), cfg, teacher)
}

/// [`sgd_train`] over an arbitrary data view; used for cluster-union
/// teacher training.
pub fn sgd_train_view(
    params: &ModelParams,
    view: &DataView<'_>,
    cfg: &TrainConfig,
    teacher: Option<&ModelParams>,
) -> Result<(ModelParams, f64)> {
    cfg.validate()?;
    let d = view.len();
    if d == 0 {
        return Err(Error::InvalidArgument("cannot train on zero rows".into()));
    }
    if let Some(t) = teacher {
        let tq = t.architecture().class_count()?;
        let sq = params.architecture().class_count()?;
        if tq != sq {
            return Err(Error::Shape(format!(
                "teacher predicts {tq} classes, student predicts {sq}"
            )));
        }
    }
    let mut steps = cfg.steps(d);
    let mut pad = false;
    if steps == 0 {
        if cfg.allow_small_clients {
            steps = 1;
            pad = true;
        } else {
            return Err(Error::InvalidArgument(format!(
                "dataset smaller than one batch ({d} rows < batch size {}); \
                 enable allow_small_clients to pad by resampling",
                cfg.batch_size
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut model = params.clone();
    let use_kd = teacher.is_some() && cfg.kd_weight > 0.0;

    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let mut pos = 0usize;

    // Steps belonging to the final epoch start here; with E=1 that is step 0.
    let final_epoch_start = (cfg.local_epochs - 1) * d / cfg.batch_size;
    let mut final_losses = 0.0;
    let mut final_count = 0usize;

    let mut batch_idx = Vec::with_capacity(cfg.batch_size);
    for step in 0..steps {
        batch_idx.clear();
        while batch_idx.len() < cfg.batch_size {
            if pos == d {
                if pad {
                    // Only reachable when E*d < B: fill out the single batch
                    // by resampling with replacement.
                    batch_idx.push(rng.gen_range(0..d));
                    continue;
                }
                perm.shuffle(&mut rng);
                pos = 0;
            }
            batch_idx.push(perm[pos]);
            pos += 1;
        }
        let (features, labels) = view.gather(&batch_idx)?;
        let (logits, cache) = forward(&model, &features, true, &mut rng)?;
        let (loss, dlogits) = if use_kd {
            let teacher_logits = forward_eval(teacher.expect("use_kd implies teacher"), &features)?;
            kd_loss_and_grad(
                &logits,
                &teacher_logits,
                &labels,
                cfg.kd_temperature,
                cfg.kd_weight,
            )?
        } else {
            ce_loss_and_grad(&logits, &labels)?
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at step {step}"
            )));
        }
        let (grads, _) = backward(&model, &cache, &dlogits)?;
        sgd_apply(&mut model, &grads, cfg.learning_rate);
        if step >= final_epoch_start {
            final_losses += loss;
            final_count += 1;
        }
    }
    Ok((model, final_losses / final_count as f64))
}
