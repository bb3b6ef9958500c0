//! Prior-fitted training: every step samples fresh tasks from a prior and
//! minimizes the query cross-entropy given the support set.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::standardize_with_reference;
use crate::model::{Model, ModelError, Result, TrainingTask};
use crate::prior::{sample_task, TaskPrior};
use crate::seed;

fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_warmup() -> usize {
    100
}
fn default_clip() -> f64 {
    1.0
}
fn default_support_range() -> (f64, f64) {
    (0.3, 0.7)
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_tasks: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Linear warmup length; the cosine decay covers the remaining steps.
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Support fraction of each training task, drawn uniformly from this range.
    #[serde(default = "default_support_range")]
    pub support_fraction: (f64, f64),
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_tasks: default_batch(),
            learning_rate: default_lr(),
            warmup_steps: default_warmup(),
            clip_norm: default_clip(),
            support_fraction: default_support_range(),
            betas: default_betas(),
            adam_eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.batch_tasks == 0 {
            return bad("batch_tasks must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate must be finite and non-negative");
        }
        let (lo, hi) = self.support_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad("support_fraction range must satisfy 0 < lo <= hi < 1");
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0,1) and eps must be positive");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        Ok(())
    }

    /// Learning rate at `step`: linear warmup then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps.min(self.steps);
        if step < warm {
            return self.learning_rate * (step + 1) as f64 / warm as f64;
        }
        let span = (self.steps - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub loss: Vec<f64>,
    pub grad_norm: Vec<f64>,
    pub learning_rate: Vec<f64>,
}

impl TrainingCurve {
    /// Mean loss over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> Option<f64> {
        let n = self.loss.len();
        if n == 0 {
            return None;
        }
        let tail = &self.loss[n - window.clamp(1, n)..];
        Some(tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Samples one training task, splits it at random into support and query,
/// and standardizes both with support statistics as evaluation episodes are.
fn training_task<R: Rng>(prior: &TaskPrior, support_range: (f64, f64), rng: &mut R) -> Result<TrainingTask> {
    let table = sample_task(prior, rng).map_err(|e| ModelError::Config(e.to_string()))?;
    let n = table.n_rows();
    let (lo, hi) = support_range;
    let frac = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let m = ((n as f64 * frac).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (s, q) = order.split_at(m);
    let pick = |idx: &[usize]| {
        (
            table.features.select_rows(idx),
            idx.iter().map(|&r| table.labels[r]).collect::<Vec<u8>>(),
        )
    };
    let (mut sx, sy) = pick(s);
    let (mut qx, qy) = pick(q);
    standardize_with_reference(&mut sx, &mut [&mut qx]);
    Ok(TrainingTask {
        support_x: sx,
        support_y: sy,
        query_x: qx,
        query_y: qy,
    })
}

/// The training tasks of `step`; a pure function of the config seed and step.
pub fn sample_batch(prior: &TaskPrior, config: &TrainConfig, step: usize) -> Result<Vec<TrainingTask>> {
    let mut rng = seed::rng_at(config.seed, &[seed::stream::TRAIN, step as u64]);
    (0..config.batch_tasks)
        .map(|_| training_task(prior, config.support_fraction, &mut rng))
        .collect()
}

/// Trains `model` in place with Adam on tasks drawn from `prior`.
///
/// `on_step(step, loss)` is invoked after every update.
pub fn train(
    model: &mut Model,
    prior: &TaskPrior,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainingCurve> {
    config.validate()?;
    prior.validate().map_err(|e| ModelError::Config(e.to_string()))?;
    let max = model.config().max_features;
    if prior.feature_count_range.1 > max {
        return Err(ModelError::Config(format!(
            "prior draws up to {} features but the model accepts at most {max}",
            prior.feature_count_range.1
        )));
    }

    let mut m: Vec<Vec<f64>> = model.weights().iter().map(|t| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let (b1, b2) = config.betas;
    let mut curve = TrainingCurve::default();

    for step in 0..config.steps {
        let batch = sample_batch(prior, config, step)?;
        let (loss_value, grads) = model.loss_and_gradients(&batch)?;
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if !loss_value.is_finite() || !norm.is_finite() {
            return Err(ModelError::NonFinite {
                step,
                grad_norm: norm,
            });
        }
        let clip = if config.clip_norm > 0.0 && norm > config.clip_norm {
            config.clip_norm / norm
        } else {
            1.0
        };
        let lr = config.lr_at(step);
        let t = (step + 1) as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        if lr > 0.0 {
            for (k, (w, g)) in model.weights_mut().iter_mut().zip(&grads).enumerate() {
                for (i, (p, &gi)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let gi = gi * clip;
                    m[k][i] = b1 * m[k][i] + (1.0 - b1) * gi;
                    v[k][i] = b2 * v[k][i] + (1.0 - b2) * gi * gi;
                    let mh = m[k][i] / c1;
                    let vh = v[k][i] / c2;
                    *p -= lr * mh / (vh.sqrt() + config.adam_eps);
                }
            }
        }
        curve.loss.push(loss_value);
        curve.grad_norm.push(norm);
        curve.learning_rate.push(lr);
        on_step(step, loss_value);
    }
    Ok(curve)
}
