//! Priors, variational posteriors, reparametrized sampling and KL terms.
//!
//! Posterior scales are always stored as pre-softplus values `rho`, with
//! `sigma = softplus(rho)`. Each sampler exists in two forms: a plain value
//! function, and a tape function that keeps the sample differentiable with
//! respect to `(mu, rho)` for a fixed [`NoiseDraw`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, ActivationKind, Tape, Var};
use crate::error::{BnnError, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `½·ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Variational family of a probabilistic layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorFamily {
    #[default]
    MeanField,
    Radial,
}

impl std::str::FromStr for PosteriorFamily {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-field" | "meanfield" | "gaussian" => Ok(PosteriorFamily::MeanField),
            "radial" => Ok(PosteriorFamily::Radial),
            other => Err(BnnError::Config(format!("unknown posterior family {other:?}"))),
        }
    }
}

/// `N(0, sigma² I)` over `dim` parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IsotropicGaussianPrior {
    sigma: f64,
    dim: usize,
}

impl IsotropicGaussianPrior {
    pub fn new(sigma: f64, dim: usize) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(BnnError::Domain(format!("prior sigma must be positive, got {sigma}")));
        }
        if dim == 0 {
            return Err(BnnError::Domain("prior dimension must be positive".into()));
        }
        Ok(IsotropicGaussianPrior { sigma, dim })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn log_prob(&self, x: &Tensor) -> Result<f64> {
        self.check_dim(x.len())?;
        let s = self.sigma;
        Ok(x
            .data()
            .iter()
            .map(|v| -HALF_LN_2PI - s.ln() - v * v / (2.0 * s * s))
            .sum())
    }

    /// Draws one parameter vector from the prior.
    pub fn sample(&self, rng: &mut RngStream) -> Tensor {
        Tensor::vector(rng.normals(self.dim).into_iter().map(|e| e * self.sigma).collect())
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim {
            return Err(BnnError::shape("prior", &[self.dim], &[n]));
        }
        Ok(())
    }
}

fn check_params(mu: &Tensor, rho: &Tensor) -> Result<()> {
    if !mu.same_shape(rho) {
        return Err(BnnError::shape("posterior", mu.shape(), rho.shape()));
    }
    if !mu.is_finite() || !rho.is_finite() {
        return Err(BnnError::Numerical("non-finite variational parameters".into()));
    }
    Ok(())
}

/// Fully factorized Gaussian `N(mu_i, softplus(rho_i)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Tensor,
    rho: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        check_params(&mu, &rho)?;
        Ok(DiagonalGaussian { mu, rho })
    }

    /// Builds the posterior from means and positive scales.
    pub fn from_sigma(mu: Tensor, sigma: &Tensor) -> Result<Self> {
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(BnnError::Domain("sigma must be positive".into()));
        }
        let rho = sigma.map(crate::autodiff::softplus_inverse);
        Self::new(mu, rho)
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Radial posterior: `mu + sigma ⊙ (ε/‖ε‖)·r` with `r = |N(0,1)|`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialPosterior {
    mu: Tensor,
    rho: Tensor,
}

impl RadialPosterior {
    pub fn new(mu: Tensor, rho: Tensor) -> Result<Self> {
        check_params(&mu, &rho)?;
        if mu.len() < 2 {
            return Err(BnnError::Domain(
                "radial posterior needs at least 2 parameters".into(),
            ));
        }
        Ok(RadialPosterior { mu, rho })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// The non-variational noise behind one reparametrized sample.
///
/// Keeping it around makes the sampling path replayable: the same draw fed
/// back in gives the same sample, which is what gradient checks rely on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseDraw {
    pub epsilon: Vec<f64>,
    /// Radius `|r*|`, present only for the radial family.
    pub radius: Option<f64>,
}

impl NoiseDraw {
    pub fn gaussian(n: usize, rng: &mut RngStream) -> Self {
        NoiseDraw {
            epsilon: rng.normals(n),
            radius: None,
        }
    }

    /// Direction noise and a half-normal radius. Redraws on a zero-norm
    /// direction (a probability-zero event).
    pub fn radial(n: usize, rng: &mut RngStream) -> Self {
        loop {
            let epsilon = rng.normals(n);
            if norm(&epsilon) > 0.0 {
                let radius = rng.normal().abs();
                return NoiseDraw {
                    epsilon,
                    radius: Some(radius),
                };
            }
        }
    }

    pub fn draw(family: PosteriorFamily, n: usize, rng: &mut RngStream) -> Self {
        match family {
            PosteriorFamily::MeanField => Self::gaussian(n, rng),
            PosteriorFamily::Radial => Self::radial(n, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.epsilon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epsilon.is_empty()
    }

    /// The effective standardized offset `z` such that `theta = mu + sigma ⊙ z`.
    pub fn offset(&self, family: PosteriorFamily) -> Result<Vec<f64>> {
        match family {
            PosteriorFamily::MeanField => Ok(self.epsilon.clone()),
            PosteriorFamily::Radial => {
                let r = self.radius.ok_or_else(|| {
                    BnnError::Config("radial sample requires a radius draw".into())
                })?;
                let n = norm(&self.epsilon);
                if !(n > 0.0) {
                    return Err(BnnError::Numerical(
                        "zero-norm direction noise; redraw before sampling".into(),
                    ));
                }
                Ok(self.epsilon.iter().map(|e| e / n * r).collect())
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sample_with(mu: &Tensor, rho: &Tensor, offset: &[f64]) -> Result<Tensor> {
    if offset.len() != mu.len() {
        return Err(BnnError::shape("reparam", mu.shape(), &[offset.len()]));
    }
    let mut theta = mu.clone();
    for ((t, r), z) in theta.data_mut().iter_mut().zip(rho.data()).zip(offset) {
        *t += softplus(*r) * z;
    }
    Ok(theta)
}

/// `theta = mu + softplus(rho) ⊙ ε`.
pub fn gaussian_sample_reparam(q: &DiagonalGaussian, noise: &NoiseDraw) -> Result<Tensor> {
    sample_with(&q.mu, &q.rho, &noise.offset(PosteriorFamily::MeanField)?)
}

/// `theta = mu + softplus(rho) ⊙ (ε/‖ε‖)·r`.
pub fn radial_sample(q: &RadialPosterior, noise: &NoiseDraw) -> Result<Tensor> {
    sample_with(&q.mu, &q.rho, &noise.offset(PosteriorFamily::Radial)?)
}

/// Records a reparametrized sample on the tape; `mu` and `rho` stay
/// differentiable, the noise is a constant.
pub fn reparam_on_tape(
    tape: &mut Tape,
    family: PosteriorFamily,
    mu: Var,
    rho: Var,
    noise: &NoiseDraw,
) -> Result<Var> {
    let shape = tape.value(mu).shape().to_vec();
    let n = tape.value(mu).len();
    if noise.len() != n {
        return Err(BnnError::shape("reparam", &shape, &[noise.len()]));
    }
    let offset = tape.constant(Tensor::new(shape, noise.offset(family)?)?);
    let sigma = tape.activation(rho, ActivationKind::Softplus)?;
    let scaled = tape.mul(sigma, offset)?;
    tape.add(mu, scaled)
}

/// Diagonal Gaussian log density, summed over coordinates.
pub fn gaussian_log_prob(x: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if !x.same_shape(mu) || !x.same_shape(sigma) {
        return Err(BnnError::shape("gaussian_log_prob", x.shape(), mu.shape()));
    }
    let mut total = 0.0;
    for ((&xi, &mi), &si) in x.data().iter().zip(mu.data()).zip(sigma.data()) {
        if !(si > 0.0) {
            return Err(BnnError::Domain(format!("sigma must be positive, got {si}")));
        }
        let z = (xi - mi) / si;
        total += -HALF_LN_2PI - si.ln() - 0.5 * z * z;
    }
    Ok(total)
}

/// Closed-form `KL(q ‖ N(0, s² I))`.
pub fn kl_diag_vs_isotropic(q: &DiagonalGaussian, p: &IsotropicGaussianPrior) -> Result<f64> {
    p.check_dim(q.dim())?;
    let s = p.sigma;
    let s2 = s * s;
    Ok(q
        .mu
        .data()
        .iter()
        .zip(q.rho.data())
        .map(|(&m, &r)| {
            let sig = softplus(r);
            (s / sig).ln() + (sig * sig + m * m) / (2.0 * s2) - 0.5
        })
        .sum())
}

/// Closed-form mean-field KL on the tape.
pub fn kl_diag_on_tape(
    tape: &mut Tape,
    mu: Var,
    rho: Var,
    p: &IsotropicGaussianPrior,
) -> Result<Var> {
    p.check_dim(tape.value(mu).len())?;
    let s = p.sigma;
    let n = tape.value(mu).len() as f64;
    let sigma = tape.activation(rho, ActivationKind::Softplus)?;
    let log_sigma = tape.log(sigma);
    let sum_log_sigma = tape.sum(log_sigma);
    let sig2 = tape.square(sigma);
    let mu2 = tape.square(mu);
    let quad = tape.add(sig2, mu2)?;
    let quad = tape.sum(quad);
    let quad = tape.scale(quad, 1.0 / (2.0 * s * s));
    let neg_log = tape.scale(sum_log_sigma, -1.0);
    let kl = tape.add(quad, neg_log)?;
    Ok(tape.add_scalar(kl, n * (s.ln() - 0.5)))
}

/// The two σ-dependent pieces of the unit-prior mean-field objective:
/// `(Σ (μ² + σ²)/2, Σ ln σ)`. Their difference minus `N/2` is the exact KL.
pub fn unit_prior_terms(mu: &Tensor, sigma: &Tensor) -> Result<(f64, f64)> {
    if !mu.same_shape(sigma) {
        return Err(BnnError::shape("unit_prior_terms", mu.shape(), sigma.shape()));
    }
    let cross: f64 = mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(m, s)| (m * m + s * s) / 2.0)
        .sum();
    let entropy: f64 = sigma.data().iter().map(|s| s.ln()).sum();
    Ok((cross, entropy))
}

/// [`unit_prior_terms`] at the posterior's current `(μ, softplus(ρ))`.
pub fn unit_prior_kl_terms(q: &DiagonalGaussian) -> (f64, f64) {
    unit_prior_terms(&q.mu, &q.sigma()).expect("posterior shapes agree")
}

/// Single-sample KL surrogate for the radial family.
///
/// The radial entropy is `Σ ln σ_i` plus a constant that does not depend on
/// `(mu, rho)`; the constant is dropped. The prior cross-entropy is estimated
/// from `sample`.
pub fn radial_kl_estimate(
    q: &RadialPosterior,
    p: &IsotropicGaussianPrior,
    sample: &Tensor,
) -> Result<f64> {
    p.check_dim(q.dim())?;
    if sample.len() != q.dim() {
        return Err(BnnError::shape("radial_kl_estimate", q.mu.shape(), sample.shape()));
    }
    let entropy: f64 = q.rho.data().iter().map(|&r| softplus(r).ln()).sum();
    Ok(-entropy - p.log_prob(sample)?)
}

/// Radial KL surrogate on the tape, with `theta` the recorded sample.
pub fn radial_kl_on_tape(
    tape: &mut Tape,
    rho: Var,
    theta: Var,
    p: &IsotropicGaussianPrior,
) -> Result<Var> {
    let n = tape.value(rho).len();
    p.check_dim(n)?;
    let s = p.sigma;
    let sigma = tape.activation(rho, ActivationKind::Softplus)?;
    let log_sigma = tape.log(sigma);
    let entropy = tape.sum(log_sigma);
    let t2 = tape.square(theta);
    let t2 = tape.sum(t2);
    // -log p(theta) = Σ θ²/(2s²) + N(½ln2π + ln s)
    let neg_log_prior = tape.scale(t2, 1.0 / (2.0 * s * s));
    let neg_log_prior = tape.add_scalar(neg_log_prior, n as f64 * (HALF_LN_2PI + s.ln()));
    let neg_entropy = tape.scale(entropy, -1.0);
    tape.add(neg_entropy, neg_log_prior)
}
