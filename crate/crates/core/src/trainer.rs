//! Bayes-by-backprop training loop.
//!
//! Each step draws weight noise, reparametrizes the variational weights,
//! evaluates the single-sample negative ELBO, backpropagates through the
//! sampling path and applies a gradient step to every parameter block:
//! posterior means and scales of variational layers, and the plain weights
//! of deterministic layers.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BnnError, Result};
use crate::model::Model;
use crate::objective::{elbo_gradients, ElboConfig, ElboEstimate, ObjectiveNoise, Targets};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Epoch losses above this count as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    SgdMomentum { beta: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// KL multiplier; `None` means `1 / train_size`.
    pub kl_weight: Option<f64>,
    pub mc_samples: usize,
    /// Global gradient-norm clip, off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Sgd,
            kl_weight: None,
            mc_samples: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(BnnError::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(BnnError::Config("batch size must be positive".into()));
        }
        if let Optimizer::SgdMomentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(BnnError::Config(format!("momentum must be in [0, 1), got {beta}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(BnnError::Config("clip norm must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn elbo(&self, train_size: usize) -> ElboConfig {
        ElboConfig {
            kl_weight: self.kl_weight.unwrap_or(1.0 / train_size.max(1) as f64),
            mc_samples: self.mc_samples,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    /// Seconds; not part of any reproducible output.
    #[serde(skip)]
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Records with the wall-clock field zeroed, for reproducibility checks.
    pub fn losses(&self) -> Vec<(f64, f64, f64)> {
        self.epochs.iter().map(|r| (r.total, r.nll, r.kl)).collect()
    }

    /// One JSON record per line: epoch, total, nll, kl.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.epochs {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Training aborted; `trace` holds the epochs completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("training failed after {} epochs: {source}", trace.epochs.len())]
pub struct TrainFailure {
    pub trace: TrainTrace,
    #[source]
    pub source: BnnError,
}

/// Applies gradient updates; owns optimizer state across steps.
pub struct Trainer {
    config: TrainConfig,
    velocity: Option<Vec<Tensor>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            config,
            velocity: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// One Bayes-by-backprop iteration on a minibatch. Returns the loss
    /// estimate before the update. A non-finite gradient aborts the step
    /// before any parameter changes.
    pub fn step(
        &mut self,
        model: &mut Model,
        x: &Tensor,
        y: &Targets,
        elbo: &ElboConfig,
        rng: &mut RngStream,
    ) -> Result<ElboEstimate> {
        let (estimate, mut grads, _) = elbo_gradients(model, x, y, elbo, ObjectiveNoise::Draw(rng))?;
        for (block, g) in model.param_blocks().iter().zip(&grads) {
            if !g.is_finite() {
                return Err(BnnError::Numerical(format!(
                    "non-finite gradient in layer {} {}",
                    block.layer, block.name
                )));
            }
        }
        if let Some(max_norm) = self.config.clip_norm {
            let norm = grads
                .iter()
                .flat_map(|g| g.data())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max_norm {
                let k = max_norm / norm;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
        }
        self.apply(model, &grads);
        Ok(estimate)
    }

    fn apply(&mut self, model: &mut Model, grads: &[Tensor]) {
        let lr = self.config.learning_rate;
        match self.config.optimizer {
            Optimizer::Sgd => {
                for (p, g) in model.params_mut().into_iter().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::SgdMomentum { beta } => {
                let vel = self
                    .velocity
                    .get_or_insert_with(|| grads.iter().map(|g| Tensor::zeros(g.shape())).collect());
                for ((p, g), v) in model.params_mut().into_iter().zip(grads).zip(vel.iter_mut()) {
                    for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = beta * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
        }
    }
}

/// Single plain-SGD step with learning rate `learning_rate`.
pub fn bbb_step(
    model: &mut Model,
    x: &Tensor,
    y: &Targets,
    elbo: &ElboConfig,
    learning_rate: f64,
    rng: &mut RngStream,
) -> Result<ElboEstimate> {
    let mut t = Trainer::new(TrainConfig {
        learning_rate,
        ..TrainConfig::default()
    })?;
    t.step(model, x, y, elbo, rng)
}

/// Minibatch training over `data` for `config.epochs` epochs.
///
/// Rows are reshuffled each epoch from the seeded stream; the final partial
/// batch is kept. Aborts when an epoch loss is non-finite or exceeds
/// [`DIVERGENCE_LIMIT`].
pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainTrace, TrainFailure> {
    let fail = |trace: &TrainTrace, source| TrainFailure {
        trace: trace.clone(),
        source,
    };
    let mut trace = TrainTrace::default();
    let setup = || -> Result<Trainer> {
        if data.is_empty() {
            return Err(BnnError::Data("training set is empty".into()));
        }
        if data.width() != model.input_width() {
            return Err(BnnError::shape(
                "train features",
                &[model.input_width()],
                &[data.width()],
            ));
        }
        Trainer::new(config.clone())
    };
    let mut trainer = setup().map_err(|e| fail(&trace, e))?;
    let elbo = config.elbo(data.len());
    let root = RngStream::new(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let mut shuffle_rng = root.split(2 * epoch as u64);
        let mut noise_rng = root.split(2 * epoch as u64 + 1);
        shuffle_rng.shuffle(&mut order);
        let (mut total, mut nll, mut kl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = data.features.select_rows(chunk);
            let y = data.targets.select(chunk);
            let est = trainer
                .step(model, &x, &y, &elbo, &mut noise_rng)
                .map_err(|e| fail(&trace, e.context(format_args!("epoch {}", epoch + 1))))?;
            total += est.total;
            nll += est.nll;
            kl += est.kl;
            batches += 1;
        }
        let n = batches as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            total: total / n,
            nll: nll / n,
            kl: kl / n,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if !record.total.is_finite() || record.total.abs() > DIVERGENCE_LIMIT {
            return Err(fail(
                &trace,
                BnnError::Numerical(format!("diverged at epoch {}: loss {}", epoch + 1, record.total)),
            ));
        }
        trace.epochs.push(record);
    }
    Ok(trace)
}

/// Outcome of [`loss_trend`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrendReport {
    /// Moving averages compared.
    pub windows: usize,
    /// Windows whose smoothed loss rose above the previous one.
    pub increases: usize,
    /// Largest rise, relative to the previous smoothed value.
    pub worst_rise: f64,
    pub ok: bool,
}

/// Checks that epoch losses, smoothed by a `window`-epoch moving average,
/// are non-increasing from epoch `start` (1-based) on: at most
/// `allowed_frac` of the windows may rise, and each rise must stay below
/// `max_rel_rise` of the previous smoothed value.
pub fn loss_trend(losses: &[f64], window: usize, start: usize, allowed_frac: f64, max_rel_rise: f64) -> TrendReport {
    let smoothed: Vec<f64> = losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    // smoothed[k] averages epochs k+1 ..= k+window
    let first = start.min(smoothed.len());
    let (mut windows, mut increases, mut worst) = (0, 0, 0.0f64);
    for k in first.max(1)..smoothed.len() {
        windows += 1;
        let (prev, cur) = (smoothed[k - 1], smoothed[k]);
        if cur > prev {
            increases += 1;
            worst = worst.max((cur - prev) / prev.abs().max(f64::MIN_POSITIVE));
        }
    }
    let ok = increases as f64 <= allowed_frac * windows as f64 && worst < max_rel_rise;
    TrendReport {
        windows,
        increases,
        worst_rise: worst,
        ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softplus_inverse;
    use crate::layers::Layer;
    use crate::model::{build_model, LayerSpec, ModelSpec};
    use crate::objective::SCALE_FLOOR;

    fn tiny() -> (Model, Tensor, Targets) {
        let spec = ModelSpec {
            input_width: 1,
            layers: vec![LayerSpec::variational(2, Default::default())],
            head: crate::model::Head::Gaussian,
        };
        let model = build_model(&spec, 3).unwrap();
        let x = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        (model, x, Targets::Real(vec![0.8]))
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (mut model, x, y) = tiny();
        let before = model.clone();
        let elbo = ElboConfig::for_train_size(10);
        bbb_step(&mut model, &x, &y, &elbo, 0.0, &mut RngStream::new(1)).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn quadratic_step_moves_mean_by_alpha_residual() {
        // σ_q ≈ 0 and head scale = 1: the loss in the mean weight is ½(μ − y)²
        let (mut model, x, y) = tiny();
        let Layer::Variational(v) = &mut model.layers_mut()[0] else { unreachable!() };
        v.set_sigma(1e-12);
        v.weight_mu = Tensor::matrix(2, 1, vec![0.3, 0.0]).unwrap();
        v.bias_mu = Tensor::vector(vec![0.0, softplus_inverse(1.0 - SCALE_FLOOR)]);
        let alpha = 0.1;
        let elbo = ElboConfig { kl_weight: 0.0, mc_samples: 1 };
        bbb_step(&mut model, &x, &y, &elbo, alpha, &mut RngStream::new(2)).unwrap();
        let Layer::Variational(v) = &model.layers()[0] else { unreachable!() };
        let moved = v.weight_mu.data()[0] - 0.3;
        assert!((moved - alpha * (0.8 - 0.3)).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let (mut model, x, _) = tiny();
        let before = model.clone();
        let y = Targets::Real(vec![f64::MAX]);
        let elbo = ElboConfig::for_train_size(1);
        let err = bbb_step(&mut model, &x, &y, &elbo, 0.1, &mut RngStream::new(0));
        assert!(err.is_err());
        assert_eq!(model, before);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = TrainConfig { optimizer: Optimizer::SgdMomentum { beta: 1.0 }, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
