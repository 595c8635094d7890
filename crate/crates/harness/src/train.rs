//! Deterministic single-threaded training with AdamW.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use smalldet_core::params::{bind, grads, ParamTree};
use smalldet_core::{Precision, Tape, Tensor, TensorError};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::Dataset;
use crate::error::{HarnessError, Result};
use crate::model::{assign_positives, detection_loss, forward, LossSpec, ToyModelParams};

pub const ADAM_EPS: f64 = 1e-8;

/// Decoupled-weight-decay Adam over a flat list of tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamW {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with learning rate `lr · factor`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], factor: f64, precision: Precision) {
        self.step += 1;
        let lr = self.lr * factor;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + ADAM_EPS);
                let next = *w - lr * (update + self.weight_decay * *w);
                *w = precision.round(next);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ToyModelParams,
    pub initial_params: ToyModelParams,
    pub checkpoint: Checkpoint,
    /// Per-leaf flag: some batch produced a nonzero gradient.
    pub touched: Vec<(String, bool)>,
}

impl TrainOutcome {
    pub fn loss_curve(&self) -> &[f64] {
        &self.checkpoint.meta.loss_curve
    }
}

pub fn model_config_for(cfg: &TrainConfig, data: &Dataset) -> ModelConfig {
    cfg.model
        .unwrap_or_else(|| ModelConfig::new(data.spec.num_classes, data.image_size()))
}

fn nonfinite(err: TensorError, epoch: usize, batch: usize) -> HarnessError {
    match err {
        TensorError::NonFiniteOutput { op, .. } => HarnessError::NonFiniteLoss {
            epoch,
            batch,
            op: op.to_string(),
        },
        e => e.into(),
    }
}

/// Loss of one batch; optionally backpropagates and returns gradients.
fn batch_loss(
    params: &ToyModelParams,
    data: &Dataset,
    indices: &[usize],
    loss: LossSpec,
    precision: Precision,
    want_grads: bool,
) -> Result<(f64, Option<ToyModelParams>), TensorError> {
    let cfg = params.config;
    let mut tape = Tape::new(precision);
    let bound = bind(params, &mut tape);
    let x = tape.constant(data.batch_tensor(indices));
    let positives = assign_positives(data, indices, cfg.grid());
    let out = forward(&mut tape, x, &bound).map_err(unwrap_tensor)?;
    let (total, _) = detection_loss(&mut tape, out, &positives, &cfg, loss).map_err(unwrap_tensor)?;
    let value = tape.value(total).data()[0];
    if !value.is_finite() {
        let op = tape.first_non_finite().map_or("unknown", |(_, op)| op);
        return Err(TensorError::NonFiniteOutput { op, index: 0 });
    }
    if !want_grads {
        return Ok((value, None));
    }
    tape.backward(total)?;
    Ok((value, Some(grads(&bound, &tape))))
}

fn unwrap_tensor(e: HarnessError) -> TensorError {
    match e {
        HarnessError::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

/// Mean batch loss over the dataset in index order at fixed parameters.
pub fn dataset_loss(
    params: &ToyModelParams,
    data: &Dataset,
    batch_size: usize,
    loss: LossSpec,
    precision: Precision,
) -> Result<f64> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut sum = 0.0;
    let mut batches = 0;
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let (v, _) = batch_loss(params, data, chunk, loss, precision, false)
            .map_err(|e| nonfinite(e, 0, b))?;
        sum += v;
        batches += 1;
    }
    Ok(sum / batches as f64)
}

/// Seeded init with dead gate units revived on the first batch.
pub fn init_params(
    cfg: &TrainConfig,
    model: ModelConfig,
    data: &Dataset,
    precision: Precision,
) -> Result<ToyModelParams> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let p = ToyModelParams::init(model, &mut || rng.random::<f64>())?;
    let mut p = p.map("", &mut |_, t| t.map(|v| precision.round(v)));
    let first: Vec<usize> = (0..cfg.batch_size.min(data.len())).collect();
    p.revive_gates(&data.batch_tensor(&first), precision)?;
    Ok(p)
}

/// Trains from a seeded init. `on_epoch` sees `(epoch, mean batch loss)`.
pub fn train(
    cfg: &TrainConfig,
    data: &Dataset,
    precision: Precision,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(HarnessError::Config("training dataset is empty".into()));
    }
    let model = model_config_for(cfg, data);
    if model.image_size != data.image_size() || model.num_classes != data.spec.num_classes {
        return Err(HarnessError::Config(format!(
            "model expects {0}×{0} images with {1} classes, dataset has {2}×{2} with {3}",
            model.image_size,
            model.num_classes,
            data.image_size(),
            data.spec.num_classes
        )));
    }
    let loss = LossSpec {
        kind: cfg.loss()?,
        focaler: cfg.focaler()?,
    };
    let initial_params = init_params(cfg, model, data, precision)?;
    let initial_loss = dataset_loss(&initial_params, data, cfg.batch_size, loss, precision)?;

    let names: Vec<String> = initial_params.named("").into_iter().map(|(n, _)| n).collect();
    let mut touched = vec![false; names.len()];
    let mut flat = initial_params.tensors();
    let mut opt = AdamW::new(cfg, &flat);
    let mut shuffle_rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed ^ 0x5348_5546_464c_4531);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut params = initial_params.clone();
    let total_steps = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (v, g) = batch_loss(&params, data, chunk, loss, precision, true)
                .map_err(|e| nonfinite(e, epoch, b))?;
            let g = g.expect("gradients requested").tensors();
            for (t, gi) in touched.iter_mut().zip(&g) {
                *t |= gi.data().iter().any(|&x| x != 0.0);
            }
            opt.step(&mut flat, &g, cfg.schedule.factor(step, total_steps), precision);
            step += 1;
            params = params.with_tensors(flat.clone());
            sum += v;
            batches += 1;
        }
        let mean = sum / batches as f64;
        curve.push(mean);
        on_epoch(epoch, mean);
    }
    let final_loss = dataset_loss(&params, data, cfg.batch_size, loss, precision)?;
    let meta = TrainingMeta {
        model,
        train: cfg.clone(),
        final_epoch: cfg.epochs,
        final_loss,
        initial_loss,
        loss_curve: curve,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_params(&params, meta),
        params,
        initial_params,
        touched: names.into_iter().zip(touched).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_lr_is_identity() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let p0 = vec![Tensor::new([3], vec![0.5, -0.25, 0.0]).unwrap()];
        let mut p = p0.clone();
        let mut opt = AdamW::new(&cfg, &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap()], 1.0, Precision::Single);
        }
        assert_eq!(p, p0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![Tensor::new([2], vec![1.0, 1.0]).unwrap()];
        let mut opt = AdamW::new(&cfg, &p);
        opt.step(&mut p, &[Tensor::new([2], vec![3.0, -0.5]).unwrap()], 1.0, Precision::Double);
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((p[0].data()[0] - 0.9).abs() < 1e-7);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = vec![Tensor::new([1], vec![2.0]).unwrap()];
        let mut opt = AdamW::new(&cfg, &p);
        opt.step(&mut p, &[Tensor::zeros([1])], 1.0, Precision::Double);
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
