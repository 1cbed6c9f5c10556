//! Dense layers, deterministic and variational, and the prior
//! unit-distribution diagnostic.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{activate, softplus_inverse, ActivationKind, Tape, Var};
use crate::distributions::{
    kl_diag_on_tape, radial_kl_on_tape, reparam_on_tape, IsotropicGaussianPrior, NoiseDraw,
    PosteriorFamily,
};
use crate::error::{BnnError, Result};
use crate::model::{LayerSpec, ModelSpec};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Initial posterior scale of freshly built variational layers.
pub const INIT_POSTERIOR_SIGMA: f64 = 0.05;
/// Standard deviation of the initial posterior means.
pub const INIT_MEAN_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseDeterministic {
    /// `out × in`
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: ActivationKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseVariational {
    pub family: PosteriorFamily,
    /// `out × in`
    pub weight_mu: Tensor,
    pub weight_rho: Tensor,
    pub bias_mu: Tensor,
    pub bias_rho: Tensor,
    pub prior_sigma: f64,
    pub activation: ActivationKind,
}

/// Noise behind one sample of a variational layer's weights and bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNoise {
    pub weight: NoiseDraw,
    pub bias: NoiseDraw,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense(DenseDeterministic),
    Variational(DenseVariational),
}

/// Tape handles produced by one layer's forward pass.
pub struct LayerPass {
    pub output: Var,
    pub kl: Option<Var>,
    pub noise: Option<LayerNoise>,
}

impl DenseDeterministic {
    pub fn new(weights: Tensor, bias: Tensor, activation: ActivationKind) -> Result<Self> {
        if weights.rank() != 2 || bias.len() != weights.rows() {
            return Err(BnnError::shape("dense", weights.shape(), bias.shape()));
        }
        Ok(DenseDeterministic {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, units: usize, activation: ActivationKind, rng: &mut RngStream) -> Self {
        let limit = (6.0 / (inputs + units) as f64).sqrt();
        let w = (0..units * inputs).map(|_| rng.uniform(-limit, limit)).collect();
        DenseDeterministic {
            weights: Tensor::new(vec![units, inputs], w).expect("positive dims"),
            bias: Tensor::zeros(&[units]),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn units(&self) -> usize {
        self.weights.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

impl DenseVariational {
    /// `mu ~ N(0, 0.1²)`, `sigma = 0.05` for weights and bias.
    pub fn init(
        inputs: usize,
        units: usize,
        activation: ActivationKind,
        family: PosteriorFamily,
        prior_sigma: f64,
        rng: &mut RngStream,
    ) -> Self {
        let rho0 = softplus_inverse(INIT_POSTERIOR_SIGMA);
        let mut normal = |n: usize| rng.normals(n).into_iter().map(|e| e * INIT_MEAN_STD).collect();
        let weight_mu = Tensor::new(vec![units, inputs], normal(units * inputs)).expect("positive dims");
        let bias_mu = Tensor::vector(normal(units));
        DenseVariational {
            family,
            weight_rho: Tensor::full(&[units, inputs], rho0),
            bias_rho: Tensor::full(&[units], rho0),
            weight_mu,
            bias_mu,
            prior_sigma,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight_mu.cols()
    }

    pub fn units(&self) -> usize {
        self.weight_mu.rows()
    }

    /// Mean and scale per weight and bias: twice the deterministic count.
    pub fn param_count(&self) -> usize {
        2 * (self.weight_mu.len() + self.bias_mu.len())
    }

    pub fn draw_noise(&self, rng: &mut RngStream) -> LayerNoise {
        LayerNoise {
            weight: NoiseDraw::draw(self.family, self.weight_mu.len(), rng),
            bias: NoiseDraw::draw(self.family, self.bias_mu.len(), rng),
        }
    }

    /// The layer at its posterior mean.
    pub fn mean_layer(&self) -> DenseDeterministic {
        DenseDeterministic {
            weights: self.weight_mu.clone(),
            bias: self.bias_mu.clone(),
            activation: self.activation,
        }
    }

    /// Sets every posterior scale (weights and bias) to `sigma`.
    pub fn set_sigma(&mut self, sigma: f64) {
        let rho = softplus_inverse(sigma);
        self.weight_rho = Tensor::full(self.weight_rho.shape(), rho);
        self.bias_rho = Tensor::full(self.bias_rho.shape(), rho);
    }
}

impl Layer {
    pub fn inputs(&self) -> usize {
        match self {
            Layer::Dense(d) => d.inputs(),
            Layer::Variational(v) => v.inputs(),
        }
    }

    pub fn units(&self) -> usize {
        match self {
            Layer::Dense(d) => d.units(),
            Layer::Variational(v) => v.units(),
        }
    }

    pub fn activation(&self) -> ActivationKind {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Variational(v) => v.activation,
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, Layer::Variational(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.param_count(),
            Layer::Variational(v) => v.param_count(),
        }
    }

    /// Parameter blocks in a fixed order, with their names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Dense(d) => vec![("weights", &d.weights), ("bias", &d.bias)],
            Layer::Variational(v) => vec![
                ("weight_mu", &v.weight_mu),
                ("weight_rho", &v.weight_rho),
                ("bias_mu", &v.bias_mu),
                ("bias_rho", &v.bias_rho),
            ],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            Layer::Variational(v) => vec![
                &mut v.weight_mu,
                &mut v.weight_rho,
                &mut v.bias_mu,
                &mut v.bias_rho,
            ],
        }
    }

    /// Records this layer on `tape`.
    ///
    /// `params` are the tape leaves for [`Layer::params`], in order. A
    /// variational layer uses `replay` noise if given, otherwise draws from
    /// `rng`; the noise used is returned.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Var],
        h: Var,
        replay: Option<&LayerNoise>,
        rng: Option<&mut RngStream>,
    ) -> Result<LayerPass> {
        let width = tape.value(h).cols();
        if tape.value(h).rank() != 2 || width != self.inputs() {
            return Err(BnnError::shape(
                "layer input",
                tape.value(h).shape(),
                &[self.inputs()],
            ));
        }
        match self {
            Layer::Dense(d) => {
                let out = affine(tape, h, params[0], params[1], d.activation)?;
                Ok(LayerPass {
                    output: out,
                    kl: None,
                    noise: None,
                })
            }
            Layer::Variational(v) => {
                let noise = match (replay, rng) {
                    (Some(n), _) => n.clone(),
                    (None, Some(rng)) => v.draw_noise(rng),
                    (None, None) => {
                        return Err(BnnError::Contract(
                            "variational layer needs either replay noise or an rng".into(),
                        ))
                    }
                };
                let (w_mu, w_rho, b_mu, b_rho) = (params[0], params[1], params[2], params[3]);
                let w = reparam_on_tape(tape, v.family, w_mu, w_rho, &noise.weight)?;
                let b = reparam_on_tape(tape, v.family, b_mu, b_rho, &noise.bias)?;
                if !tape.value(w).is_finite() || !tape.value(b).is_finite() {
                    return Err(BnnError::Numerical("non-finite sampled weights".into()));
                }
                let w_prior = IsotropicGaussianPrior::new(v.prior_sigma, v.weight_mu.len())?;
                let b_prior = IsotropicGaussianPrior::new(v.prior_sigma, v.bias_mu.len())?;
                let kl = match v.family {
                    PosteriorFamily::MeanField => {
                        let kw = kl_diag_on_tape(tape, w_mu, w_rho, &w_prior)?;
                        let kb = kl_diag_on_tape(tape, b_mu, b_rho, &b_prior)?;
                        tape.add(kw, kb)?
                    }
                    PosteriorFamily::Radial => {
                        let kw = radial_kl_on_tape(tape, w_rho, w, &w_prior)?;
                        let kb = radial_kl_on_tape(tape, b_rho, b, &b_prior)?;
                        tape.add(kw, kb)?
                    }
                };
                let out = affine(tape, h, w, b, v.activation)?;
                Ok(LayerPass {
                    output: out,
                    kl: Some(kl),
                    noise: Some(noise),
                })
            }
        }
    }
}

/// `A(h·Wᵀ + b)`
fn affine(tape: &mut Tape, h: Var, w: Var, b: Var, act: ActivationKind) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let z = tape.matmul(h, wt)?;
    let z = tape.add_bias(z, b)?;
    tape.activation(z, act)
}

fn run_single(layer: &Layer, h: &Tensor, rng: Option<&mut RngStream>) -> Result<(Tensor, f64)> {
    let mut tape = Tape::new();
    let params: Vec<Var> = layer
        .params()
        .into_iter()
        .map(|(_, t)| tape.constant(t.clone()))
        .collect();
    let hv = tape.constant(h.clone());
    let pass = layer.forward_on_tape(&mut tape, &params, hv, None, rng)?;
    let kl = pass.kl.map(|k| tape.value(k).item()).unwrap_or(0.0);
    Ok((tape.value(pass.output).clone(), kl))
}

/// `A(h·Wᵀ + b)` for a deterministic layer.
pub fn dense_forward(layer: &DenseDeterministic, h: &Tensor) -> Result<Tensor> {
    if !h.is_finite() {
        return Err(BnnError::Numerical("non-finite layer input".into()));
    }
    run_single(&Layer::Dense(layer.clone()), h, None).map(|(out, _)| out)
}

/// Samples one `(W, b)` for the whole batch and returns the layer output with
/// this layer's KL contribution.
pub fn variational_forward(
    layer: &DenseVariational,
    h: &Tensor,
    rng: &mut RngStream,
) -> Result<(Tensor, f64)> {
    run_single(&Layer::Variational(layer.clone()), h, Some(rng))
}

/// Output of [`prior_unit_diagnostic`].
#[derive(Clone, Debug, PartialEq)]
pub struct PriorDiagnostic {
    /// Excess kurtosis of pre-activations, one entry per probed layer.
    pub excess_kurtosis: Vec<f64>,
    /// Mean pre-activation per probed layer.
    pub means: Vec<f64>,
    pub n_samples: usize,
    /// Set when `n_samples < 1000`.
    pub unreliable: bool,
}

/// Unbiased sample excess kurtosis (the `G2` estimator).
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    m2 /= n;
    m4 /= n;
    let g2 = m4 / (m2 * m2) - 3.0;
    ((n + 1.0) * g2 + 6.0) * (n - 1.0) / ((n - 2.0) * (n - 3.0))
}

/// Propagates a fixed probe input through networks drawn from the prior and
/// measures how heavy-tailed the pre-activations of the first `depth` layers
/// are.
///
/// Every layer's weights and biases are drawn from `N(0, s²)` with `s` the
/// layer's prior sigma (1 for deterministic layers). Pre-activation values
/// are pooled over the units of a layer. `probe` defaults to one draw from
/// `N(0, I)`.
pub fn prior_unit_diagnostic(
    spec: &ModelSpec,
    depth: usize,
    n_samples: usize,
    probe: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<PriorDiagnostic> {
    spec.validate()?;
    if depth == 0 || depth > spec.layers.len() {
        return Err(BnnError::Config(format!(
            "diagnostic depth {depth} outside 1..={}",
            spec.layers.len()
        )));
    }
    if n_samples < 4 {
        return Err(BnnError::Config("need at least 4 prior samples".into()));
    }
    let unreliable = n_samples < 1000;
    if unreliable {
        warn!("prior diagnostic with {n_samples} samples: kurtosis estimates are unreliable");
    }
    let probe: Vec<f64> = match probe {
        Some(p) if p.len() == spec.input_width => p.to_vec(),
        Some(p) => return Err(BnnError::shape("probe", &[spec.input_width], &[p.len()])),
        None => rng.normals(spec.input_width),
    };

    let layers: Vec<(usize, usize, f64, ActivationKind)> = {
        let mut inputs = spec.input_width;
        spec.layers
            .iter()
            .take(depth)
            .enumerate()
            .map(|(i, l)| {
                let sigma = match l {
                    LayerSpec::Dense { .. } => 1.0,
                    LayerSpec::DenseVariational { prior_sigma, .. } => *prior_sigma,
                };
                let row = (inputs, l.units(), sigma, spec.activation_of(i));
                inputs = l.units();
                row
            })
            .collect()
    };

    let mut pooled: Vec<Vec<f64>> = layers
        .iter()
        .map(|&(_, units, _, _)| Vec::with_capacity(units * n_samples))
        .collect();
    for _ in 0..n_samples {
        let mut h = probe.clone();
        for (k, &(inputs, units, sigma, act)) in layers.iter().enumerate() {
            let mut pre = Vec::with_capacity(units);
            for _ in 0..units {
                let mut z = rng.normal() * sigma;
                for x in &h {
                    z += rng.normal() * sigma * x;
                }
                pre.push(z);
            }
            debug_assert_eq!(h.len(), inputs);
            pooled[k].extend_from_slice(&pre);
            let pre = Tensor::from_rows(&[pre])?;
            h = activate(act, &pre)?.into_data();
        }
    }
    Ok(PriorDiagnostic {
        excess_kurtosis: pooled.iter().map(|v| excess_kurtosis(v)).collect(),
        means: pooled
            .iter()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect(),
        n_samples,
        unreliable,
    })
}
