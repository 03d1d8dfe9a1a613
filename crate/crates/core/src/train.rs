//! Micro-training on analytic synthetic tasks.
//!
//! Each run draws a fixed training set from the seed, then takes Adam steps
//! on sampled mini-batches. Nomination runs in the configured training mode
//! with Gumbel noise from its own seeded stream, so a seed pins down the
//! whole loss curve.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{NomError, Result};
use crate::model::{predict, Model, Task, TrainConfig};
use crate::nominator::NominationMode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Images in the fixed training set of every run.
pub const TRAIN_SET_SIZE: usize = 256;
/// Trailing window of the smoothed loss.
pub const SMOOTHING_WINDOW: usize = 10;

/// One synthetic `[size, size, 3]` image and its label.
///
/// Stripes: label 0 has horizontal bands, label 1 vertical ones, with random
/// period, phase, contrast and pixel noise. Quadrants: the label is the
/// quadrant lifted above a noisy background.
pub fn sample<R: Rng + ?Sized>(task: Task, size: usize, rng: &mut R) -> (Tensor, usize) {
    let label = rng.gen_range(0..task.num_classes());
    let mut img = Tensor::zeros(&[size, size, 3]);
    match task {
        Task::Stripes => {
            let period = [4.0, 6.0, 8.0][rng.gen_range(0..3)];
            let phase = rng.gen_range(0.0..2.0 * PI);
            let amp = rng.gen_range(0.25..0.45);
            let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.8..1.2));
            for i in 0..size {
                for j in 0..size {
                    let t = if label == 0 { i } else { j } as f64;
                    let wave = 0.5 + amp * (2.0 * PI * t / period + phase).sin();
                    for (c, &k) in tint.iter().enumerate() {
                        let v = wave * k + rng.gen_range(-0.05..0.05);
                        img.set(&[i, j, c], v);
                    }
                }
            }
        }
        Task::Quadrants => {
            let half = size / 2;
            let lift = rng.gen_range(0.3..0.5);
            for i in 0..size {
                for j in 0..size {
                    let q = 2 * usize::from(i >= half) + usize::from(j >= half);
                    let base = if q == label { 0.3 + lift } else { 0.3 };
                    for c in 0..3 {
                        img.set(&[i, j, c], base + rng.gen_range(-0.1..0.1));
                    }
                }
            }
        }
    }
    (img, label)
}

pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn generate(task: Task, size: usize, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (images, labels) = (0..n).map(|_| sample(task, size, &mut rng)).unzip();
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Adam with bias correction and no weight decay.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients currently held by `store`.
    /// Parameters without a gradient are left unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, v)| Tensor::zeros(v.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.len() {
            return Err(NomError::InvalidArgument(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let updates: Vec<(String, Tensor)> = store
            .iter()
            .enumerate()
            .filter_map(|(k, (name, var))| var.grad().map(|g| (k, name.to_string(), var, g)))
            .map(|(k, name, var, g)| {
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                let mut next = var.value().clone();
                for (((w, &gi), mi), vi) in next
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                }
                (name, next)
            })
            .collect();
        for (name, value) in updates {
            store.set_value(&name, value)?;
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &ParamStore, max_norm: f64) -> f64 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, v)| v.grad())
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, v) in store.iter() {
            if let Some(g) = v.grad() {
                v.set_grad(g.map(|x| x * k));
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Counts from 1.
    pub step: usize,
    pub loss: f64,
    /// Fraction of the batch predicted correctly in the training forward.
    pub accuracy: f64,
    pub smoothed_loss: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Eval-mode accuracy over the full training set after the last step.
    pub final_accuracy: f64,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |r| r.smoothed_loss)
    }

    /// Smoothed loss after `step` (1-based).
    pub fn smoothed_at(&self, step: usize) -> Option<f64> {
        self.log.get(step.checked_sub(1)?).map(|r| r.smoothed_loss)
    }
}

pub fn log_csv(log: &[StepLog]) -> String {
    let mut s = String::from("step,loss,accuracy,smoothed_loss\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.17e},{:.6},{:.17e}\n",
            r.step, r.loss, r.accuracy, r.smoothed_loss
        ));
    }
    s
}

/// Eval-mode accuracy of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let out = model.forward(&Var::constant(img.clone()), NominationMode::Hard, None)?;
        correct += usize::from(predict(out.logits.value()) == label);
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Trains `model` in place on `cfg.task`, seeding data, batching and noise
/// from `seed`.
pub fn train(
    mut model: Model,
    cfg: &TrainConfig,
    mode: NominationMode,
    seed: u64,
) -> Result<TrainOutcome> {
    let classes = cfg.task.num_classes();
    if model.config.num_classes != classes {
        return Err(NomError::config(
            "model.num_classes",
            format!(
                "task needs {classes} classes, model has {}",
                model.config.num_classes
            ),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(NomError::config("train.batch_size", "must be > 0"));
    }
    let data = Dataset::generate(cfg.task, model.config.image_size, TRAIN_SET_SIZE, seed);
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_7463_6865_7321);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6775_6d62_656c_2121);
    let mut opt = Adam::new(cfg.lr);
    model.params.set_trainable(true);

    let mut log: Vec<StepLog> = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        model.params.zero_grad();
        let mut total: Option<Var> = None;
        let mut correct = 0usize;
        for _ in 0..cfg.batch_size {
            let k = batch_rng.gen_range(0..data.len());
            let img = Var::constant(data.images[k].clone());
            let (loss, out) = model.loss(&img, data.labels[k], mode, Some(&mut noise_rng))?;
            correct += usize::from(predict(out.logits.value()) == data.labels[k]);
            total = Some(match total {
                None => loss,
                Some(t) => t.add(&loss)?,
            });
        }
        let loss = total.expect("batch is nonempty").scale(1.0 / cfg.batch_size as f64);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(NomError::Numerical(format!("loss diverged at step {step}")));
        }
        loss.backward()?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&model.params, cfg.grad_clip);
        }
        opt.step(&mut model.params)?;

        let lo = step.saturating_sub(SMOOTHING_WINDOW);
        let window = log[lo..].iter().map(|r| r.loss).sum::<f64>() + value;
        let smoothed_loss = window / (step - lo) as f64;
        log.push(StepLog {
            step,
            loss: value,
            accuracy: correct as f64 / cfg.batch_size as f64,
            smoothed_loss,
        });
    }
    model.params.set_trainable(false);
    let final_accuracy = evaluate(&model, &data)?;
    Ok(TrainOutcome {
        model,
        log,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn stripes_have_the_labelled_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (img, label) = sample(Task::Stripes, 32, &mut rng);
            // variance along rows vs along columns of channel 0
            let along = |rows: bool| {
                let mut acc = 0.0;
                for a in 0..32 {
                    for b in 1..32 {
                        let (p, q) = if rows { ([a, b, 0], [a, b - 1, 0]) } else { ([b, a, 0], [b - 1, a, 0]) };
                        acc += (img.at(&p) - img.at(&q)).abs();
                    }
                }
                acc
            };
            let (within_row, within_col) = (along(true), along(false));
            if label == 0 {
                assert!(within_row < within_col);
            } else {
                assert!(within_col < within_row);
            }
        }
    }

    #[test]
    fn quadrant_label_is_brightest_quadrant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (img, label) = sample(Task::Quadrants, 32, &mut rng);
            let mut sums = [0.0; 4];
            for i in 0..32 {
                for j in 0..32 {
                    sums[2 * (i / 16) + j / 16] += img.at(&[i, j, 1]);
                }
            }
            let best = (0..4).fold(0, |b, q| if sums[q] > sums[b] { q } else { b });
            assert_eq!(best, label);
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.set_trainable(true);
        store.insert("w", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.1);
        for _ in 0..300 {
            store.zero_grad();
            let w = store.get("w").unwrap().clone();
            w.mul(&w).unwrap().sum().backward().unwrap();
            opt.step(&mut store).unwrap();
        }
        assert!(store.get("w").unwrap().value().max_abs() < 1e-2);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.set_trainable(true);
        store.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        store.get("w").unwrap().clone().scale(5.0).sum().backward().unwrap();
        let mut opt = Adam::new(0.01);
        opt.step(&mut store).unwrap();
        let w = store.get("w").unwrap().value().data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 1.01).abs() < 1e-9);
    }

    #[test]
    fn class_mismatch_is_a_config_error() {
        let m = Model::build(ModelConfig::micro(), 0).unwrap();
        let cfg = TrainConfig {
            task: Task::Quadrants,
            steps: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(m, &cfg, NominationMode::StraightThrough, 0),
            Err(NomError::Config { .. })
        ));
    }

    #[test]
    fn short_runs_replay_exactly() {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            ..Default::default()
        };
        let run = || {
            let m = Model::build(ModelConfig::micro(), 1).unwrap();
            train(m, &cfg, NominationMode::StraightThrough, 9).unwrap().log
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!((a[1].smoothed_loss - (a[0].loss + a[1].loss) / 2.0).abs() < 1e-15);
    }
}
