//! Likelihood heads and the negative-ELBO objective.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Tape, Var};
use crate::distributions::HALF_LN_2PI;
use crate::error::{BnnError, Result};
use crate::model::{Head, Model, Noise, NoiseSet};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Added to the softplus scale of the Gaussian head.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Floor inside the log of the categorical likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

/// Regression targets or class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(idx.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match self {
            Targets::Real(v) => Some(v),
            Targets::Labels(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboConfig {
    /// Multiplier on the KL term, usually `1 / train_size`.
    pub kl_weight: f64,
    pub mc_samples: usize,
}

impl ElboConfig {
    pub fn for_train_size(n: usize) -> Self {
        ElboConfig {
            kl_weight: 1.0 / n.max(1) as f64,
            mc_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(BnnError::Config(format!(
                "kl weight must be non-negative, got {}",
                self.kl_weight
            )));
        }
        if self.mc_samples == 0 {
            return Err(BnnError::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Decomposed loss: `total = nll + kl_weight * kl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub nll: f64,
    pub kl: f64,
    pub total: f64,
}

impl ElboEstimate {
    pub fn new(nll: f64, kl: f64, kl_weight: f64) -> Self {
        ElboEstimate {
            nll,
            kl,
            total: nll + kl_weight * kl,
        }
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if !t.is_finite() {
        return Err(BnnError::Numerical(format!("non-finite {what}")));
    }
    Ok(())
}

/// Mean Gaussian NLL over the batch, recorded on the tape.
///
/// Column 0 of `raw` is the mean, column 1 the pre-softplus scale.
pub fn gaussian_nll_on_tape(tape: &mut Tape, raw: Var, targets: &[f64]) -> Result<Var> {
    let rt = tape.value(raw);
    if rt.rank() != 2 || rt.cols() != 2 || rt.rows() != targets.len() {
        return Err(BnnError::shape("gaussian head", rt.shape(), &[targets.len(), 2]));
    }
    check_finite(rt, "network outputs")?;
    let mean = tape.column(raw, 0)?;
    let scale_raw = tape.column(raw, 1)?;
    let scale = tape.activation(scale_raw, ActivationKind::Softplus)?;
    let scale = tape.add_scalar(scale, SCALE_FLOOR);
    let y = tape.constant(Tensor::vector(targets.to_vec()));
    let resid = tape.sub(y, mean)?;
    let z = tape.div(resid, scale)?;
    let z2 = tape.square(z);
    let half_z2 = tape.scale(z2, 0.5);
    let log_scale = tape.log(scale);
    let per = tape.add(half_z2, log_scale)?;
    let per = tape.add_scalar(per, HALF_LN_2PI);
    Ok(tape.mean(per))
}

/// Mean over the batch of `-log N(target; mean, softplus(raw_scale) + 1e-6)`.
pub fn gaussian_nll_head(raw: &Tensor, targets: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(raw.clone());
    let l = gaussian_nll_on_tape(&mut tape, r, targets)?;
    Ok(tape.value(l).item())
}

/// Mean `-log p[label]` on the tape, with `probs` already normalized.
pub fn categorical_nll_on_tape(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    check_finite(tape.value(probs), "class probabilities")?;
    let picked = tape.pick(probs, labels)?;
    let logp = tape.log_floored(picked, PROB_FLOOR);
    let nll = tape.scale(logp, -1.0);
    Ok(tape.mean(nll))
}

/// Mean `-log p[label]` with a `1e-12` floor inside the log.
pub fn categorical_nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = categorical_nll_on_tape(&mut tape, p, labels)?;
    Ok(tape.value(l).item())
}

/// Head likelihood on raw network outputs.
pub fn head_nll_on_tape(tape: &mut Tape, head: Head, raw: Var, targets: &Targets) -> Result<Var> {
    match (head, targets) {
        (Head::Gaussian, Targets::Real(y)) => gaussian_nll_on_tape(tape, raw, y),
        (Head::Categorical { .. }, Targets::Labels(labels)) => {
            let probs = tape.activation(raw, ActivationKind::SoftmaxRows)?;
            categorical_nll_on_tape(tape, probs, labels)
        }
        _ => Err(BnnError::Config("targets do not match the model head".into())),
    }
}

/// A recorded objective: loss node plus the parameter leaves.
pub struct ObjectivePass {
    pub loss: Var,
    pub params: Vec<Vec<Var>>,
    pub estimate: ElboEstimate,
    /// Noise used by each Monte Carlo sample.
    pub noise: Vec<NoiseSet>,
}

/// Noise for all Monte Carlo samples of one objective evaluation.
pub enum ObjectiveNoise<'a> {
    Draw(&'a mut RngStream),
    Replay(&'a [NoiseSet]),
}

/// Records the negative ELBO on `tape`.
///
/// `nll` is the mean over Monte Carlo samples of the per-example mean NLL,
/// `kl` the mean over samples of the summed per-layer KL terms.
pub fn record_negative_elbo(
    tape: &mut Tape,
    model: &Model,
    x: &Tensor,
    y: &Targets,
    config: &ElboConfig,
    mut noise: ObjectiveNoise<'_>,
) -> Result<ObjectivePass> {
    config.validate()?;
    if x.rank() != 2 || x.rows() == 0 {
        return Err(BnnError::Contract("batch must be a non-empty matrix".into()));
    }
    if x.rows() != y.len() {
        return Err(BnnError::shape("batch", x.shape(), &[y.len()]));
    }
    if let ObjectiveNoise::Replay(sets) = &noise {
        if sets.len() != config.mc_samples {
            return Err(BnnError::Contract(format!(
                "{} replay noise sets for {} samples",
                sets.len(),
                config.mc_samples
            )));
        }
    }
    let params = model.register_params(tape);
    let xv = tape.constant(x.clone());
    let mut nlls = Vec::with_capacity(config.mc_samples);
    let mut kls = Vec::new();
    let mut used = Vec::with_capacity(config.mc_samples);
    for s in 0..config.mc_samples {
        let src = match &mut noise {
            ObjectiveNoise::Draw(rng) => Noise::Draw(rng),
            ObjectiveNoise::Replay(sets) => Noise::Replay(&sets[s]),
        };
        let sample = || format!("mc sample {s}");
        let pass = model
            .forward_on_tape(tape, &params, xv, src)
            .map_err(|e| e.context(sample()))?;
        let nll = head_nll_on_tape(tape, model.head(), pass.output, y).map_err(|e| e.context(sample()))?;
        nlls.push(nll);
        if let Some(k) = pass.kl {
            kls.push(k);
        }
        used.push(pass.noise);
    }
    let inv = 1.0 / config.mc_samples as f64;
    let nll = sum_nodes(tape, &nlls)?;
    let nll = tape.scale(nll, inv);
    let nll_value = tape.value(nll).item();
    let (loss, kl_value) = if kls.is_empty() {
        (nll, 0.0)
    } else {
        let kl = sum_nodes(tape, &kls)?;
        let kl = tape.scale(kl, inv);
        let kl_value = tape.value(kl).item();
        let weighted = tape.scale(kl, config.kl_weight);
        (tape.add(nll, weighted)?, kl_value)
    };
    let estimate = ElboEstimate::new(nll_value, kl_value, config.kl_weight);
    if !estimate.total.is_finite() {
        return Err(BnnError::Numerical("non-finite objective".into()));
    }
    Ok(ObjectivePass {
        loss,
        params,
        estimate,
        noise: used,
    })
}

fn sum_nodes(tape: &mut Tape, nodes: &[Var]) -> Result<Var> {
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(acc)
}

/// Monte Carlo estimate of the negative ELBO with fresh noise.
pub fn negative_elbo(
    model: &Model,
    x: &Tensor,
    y: &Targets,
    config: &ElboConfig,
    rng: &mut RngStream,
) -> Result<ElboEstimate> {
    let mut tape = Tape::new();
    record_negative_elbo(&mut tape, model, x, y, config, ObjectiveNoise::Draw(rng)).map(|p| p.estimate)
}

/// Objective value and its gradient for every parameter block (in
/// [`Model::param_blocks`] order), with noise either drawn or replayed.
pub fn elbo_gradients(
    model: &Model,
    x: &Tensor,
    y: &Targets,
    config: &ElboConfig,
    noise: ObjectiveNoise<'_>,
) -> Result<(ElboEstimate, Vec<Tensor>, Vec<NoiseSet>)> {
    let mut tape = Tape::new();
    let pass = record_negative_elbo(&mut tape, model, x, y, config, noise)?;
    let grads = tape.backward(pass.loss)?;
    let flat = pass
        .params
        .iter()
        .flatten()
        .map(|&v| grads.wrt(v).clone())
        .collect();
    Ok((pass.estimate, flat, pass.noise))
}
