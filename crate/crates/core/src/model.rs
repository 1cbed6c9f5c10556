//! Declarative model specs and model construction, including hybrid
//! networks that mix deterministic and variational dense layers.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ActivationKind, Tape, Var};
use crate::distributions::PosteriorFamily;
use crate::error::{BnnError, Result};
use crate::layers::{DenseDeterministic, DenseVariational, Layer, LayerNoise};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN_ACTIVATION: ActivationKind = ActivationKind::Sigmoid;
pub const DEFAULT_PRIOR_SIGMA: f64 = 1.0;
/// Hidden widths used by the shipped example specs.
pub const DEFAULT_HIDDEN_UNITS: [usize; 2] = [8, 8];

fn default_prior_sigma() -> f64 {
    DEFAULT_PRIOR_SIGMA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<ActivationKind>,
    },
    DenseVariational {
        units: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        activation: Option<ActivationKind>,
        #[serde(default)]
        posterior: PosteriorFamily,
        #[serde(default = "default_prior_sigma")]
        prior_sigma: f64,
    },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense {
            units,
            activation: None,
        }
    }

    pub fn variational(units: usize, posterior: PosteriorFamily) -> Self {
        LayerSpec::DenseVariational {
            units,
            activation: None,
            posterior,
            prior_sigma: DEFAULT_PRIOR_SIGMA,
        }
    }

    pub fn with_activation(mut self, act: ActivationKind) -> Self {
        match &mut self {
            LayerSpec::Dense { activation, .. } | LayerSpec::DenseVariational { activation, .. } => {
                *activation = Some(act)
            }
        }
        self
    }

    pub fn units(&self) -> usize {
        match self {
            LayerSpec::Dense { units, .. } | LayerSpec::DenseVariational { units, .. } => *units,
        }
    }

    pub fn activation(&self) -> Option<ActivationKind> {
        match self {
            LayerSpec::Dense { activation, .. } | LayerSpec::DenseVariational { activation, .. } => {
                *activation
            }
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, LayerSpec::DenseVariational { .. })
    }

    /// Same width and activation, deterministic.
    pub fn to_dense(&self) -> LayerSpec {
        LayerSpec::Dense {
            units: self.units(),
            activation: self.activation(),
        }
    }

    /// Same width and activation, variational. Keeps posterior settings if
    /// already variational.
    pub fn to_variational(&self, posterior: PosteriorFamily) -> LayerSpec {
        match self {
            LayerSpec::DenseVariational { .. } => self.clone(),
            LayerSpec::Dense { units, activation } => LayerSpec::DenseVariational {
                units: *units,
                activation: *activation,
                posterior,
                prior_sigma: DEFAULT_PRIOR_SIGMA,
            },
        }
    }
}

/// Likelihood attached to the network output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Head {
    /// Two raw outputs: the mean and a pre-softplus scale.
    #[serde(alias = "gaussian-2-output")]
    Gaussian,
    /// Softmax over `classes` raw outputs.
    Categorical { classes: usize },
}

impl Head {
    pub fn output_units(&self) -> usize {
        match self {
            Head::Gaussian => 2,
            Head::Categorical { classes } => *classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_width: usize,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
}

/// Where the probabilistic layers sit in a spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct HybridSplit {
    pub deterministic: usize,
    pub probabilistic: usize,
    /// All variational layers form a contiguous suffix.
    pub canonical: bool,
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn with_layers(input_width: usize, layers: Vec<LayerSpec>) -> Self {
        ModelSpec {
            input_width,
            layers,
            head: Head::Gaussian,
        }
    }

    /// Variational hidden layers, deterministic output layer.
    pub fn case1(input_width: usize, hidden: &[usize]) -> Self {
        let mut layers: Vec<_> = hidden
            .iter()
            .map(|&u| LayerSpec::variational(u, PosteriorFamily::MeanField))
            .collect();
        layers.push(LayerSpec::dense(2));
        Self::with_layers(input_width, layers)
    }

    /// Deterministic hidden layers, variational output layer.
    pub fn case2(input_width: usize, hidden: &[usize]) -> Self {
        let mut layers: Vec<_> = hidden.iter().map(|&u| LayerSpec::dense(u)).collect();
        layers.push(LayerSpec::variational(2, PosteriorFamily::MeanField));
        Self::with_layers(input_width, layers)
    }

    pub fn all_variational(input_width: usize, hidden: &[usize]) -> Self {
        let mut s = Self::case2(input_width, hidden);
        s.layers = s
            .layers
            .iter()
            .map(|l| l.to_variational(PosteriorFamily::MeanField))
            .collect();
        s
    }

    pub fn all_dense(input_width: usize, hidden: &[usize]) -> Self {
        let mut s = Self::case2(input_width, hidden);
        s.layers = s.layers.iter().map(LayerSpec::to_dense).collect();
        s
    }

    /// Every layer deterministic except the one at `position` (1-based).
    pub fn with_single_variational(&self, position: usize, posterior: PosteriorFamily) -> Result<Self> {
        if position == 0 || position > self.layers.len() {
            return Err(BnnError::Config(format!(
                "position {position} outside 1..={}",
                self.layers.len()
            )));
        }
        let mut s = self.clone();
        s.layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                if i + 1 == position {
                    l.to_variational(posterior)
                } else {
                    l.to_dense()
                }
            })
            .collect();
        Ok(s)
    }

    /// Effective activation of layer `i`: explicit, else sigmoid for hidden
    /// layers and identity for the output layer.
    pub fn activation_of(&self, i: usize) -> ActivationKind {
        self.layers[i].activation().unwrap_or(if i + 1 == self.layers.len() {
            ActivationKind::Identity
        } else {
            DEFAULT_HIDDEN_ACTIVATION
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(BnnError::Build {
                layer: 0,
                reason: "input width must be positive".into(),
            });
        }
        if self.layers.is_empty() {
            return Err(BnnError::Build {
                layer: 0,
                reason: "model needs at least one layer".into(),
            });
        }
        let mut inputs = self.input_width;
        for (i, l) in self.layers.iter().enumerate() {
            let units = l.units();
            if units == 0 {
                return Err(BnnError::Build {
                    layer: i,
                    reason: "units must be positive".into(),
                });
            }
            if let LayerSpec::DenseVariational {
                posterior,
                prior_sigma,
                ..
            } = l
            {
                if !(*prior_sigma > 0.0 && prior_sigma.is_finite()) {
                    return Err(BnnError::Build {
                        layer: i,
                        reason: format!("prior sigma must be positive, got {prior_sigma}"),
                    });
                }
                if *posterior == PosteriorFamily::Radial && (units * inputs < 2 || units < 2) {
                    return Err(BnnError::Build {
                        layer: i,
                        reason: "radial posterior needs at least 2 weights and 2 biases".into(),
                    });
                }
            }
            inputs = units;
        }
        let want = self.head.output_units();
        if want == 0 {
            return Err(BnnError::Build {
                layer: self.layers.len() - 1,
                reason: "categorical head needs at least one class".into(),
            });
        }
        if inputs != want {
            return Err(BnnError::Build {
                layer: self.layers.len() - 1,
                reason: format!("head expects {want} output units, final layer has {inputs}"),
            });
        }
        Ok(())
    }

    pub fn hybrid_split(&self) -> HybridSplit {
        let probabilistic = self.layers.iter().filter(|l| l.is_variational()).count();
        let deterministic = self.layers.len() - probabilistic;
        let canonical = self
            .layers
            .iter()
            .skip(deterministic)
            .all(LayerSpec::is_variational);
        HybridSplit {
            deterministic,
            probabilistic,
            canonical,
        }
    }
}

/// Noise for every variational layer of one forward pass, in layer order.
pub type NoiseSet = Vec<LayerNoise>;

/// Where a forward pass gets its weight noise from.
pub enum Noise<'a> {
    Draw(&'a mut RngStream),
    Replay(&'a NoiseSet),
}

/// Handles produced by [`Model::forward_on_tape`].
pub struct ModelPass {
    pub output: Var,
    /// Sum of per-layer KL terms; `None` without variational layers.
    pub kl: Option<Var>,
    pub noise: NoiseSet,
}

/// A named parameter block.
#[derive(Clone, Debug)]
pub struct ParamBlock<'a> {
    pub layer: usize,
    pub name: &'static str,
    pub tensor: &'a Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    seed: u64,
}

/// Instantiates `spec` with the default initializations; deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let rng = RngStream::new(seed);
    let mut inputs = spec.input_width;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for (i, ls) in spec.layers.iter().enumerate() {
        let act = spec.activation_of(i);
        let mut lrng = rng.split(i as u64);
        let layer = match ls {
            LayerSpec::Dense { units, .. } => {
                Layer::Dense(DenseDeterministic::init(inputs, *units, act, &mut lrng))
            }
            LayerSpec::DenseVariational {
                units,
                posterior,
                prior_sigma,
                ..
            } => Layer::Variational(DenseVariational::init(
                inputs,
                *units,
                act,
                *posterior,
                *prior_sigma,
                &mut lrng,
            )),
        };
        inputs = ls.units();
        layers.push(layer);
    }
    Ok(Model { spec: spec.clone(), layers, seed })
}

impl Model {
    /// Reassembles a model from explicit layers (used by checkpoints and tests).
    pub fn from_parts(spec: ModelSpec, layers: Vec<Layer>, seed: u64) -> Result<Model> {
        spec.validate()?;
        if layers.len() != spec.layers.len() {
            return Err(BnnError::Build {
                layer: layers.len().min(spec.layers.len()),
                reason: "layer count does not match spec".into(),
            });
        }
        let mut inputs = spec.input_width;
        for (i, (l, ls)) in layers.iter().zip(&spec.layers).enumerate() {
            if l.inputs() != inputs || l.units() != ls.units() || l.is_variational() != ls.is_variational() {
                return Err(BnnError::Build {
                    layer: i,
                    reason: "layer does not match spec".into(),
                });
            }
            inputs = ls.units();
        }
        Ok(Model { spec, layers, seed })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head(&self) -> Head {
        self.spec.head
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn variational_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_variational()).count()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn param_blocks(&self) -> Vec<ParamBlock<'_>> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.params()
                    .into_iter()
                    .map(move |(name, tensor)| ParamBlock { layer: i, name, tensor })
            })
            .collect()
    }

    /// Mutable parameter tensors, in [`Model::param_blocks`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Registers every parameter block as a tape leaf, grouped per layer.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Vec<Var>> {
        self.layers
            .iter()
            .map(|l| l.params().into_iter().map(|(_, t)| tape.param(t.clone())).collect())
            .collect()
    }

    /// Records a full forward pass. One weight sample per variational layer
    /// is shared across the batch.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        params: &[Vec<Var>],
        x: Var,
        mut noise: Noise<'_>,
    ) -> Result<ModelPass> {
        if let Noise::Replay(set) = &noise {
            if set.len() != self.variational_layers() {
                return Err(BnnError::Contract(format!(
                    "replay noise has {} entries for {} variational layers",
                    set.len(),
                    self.variational_layers()
                )));
            }
        }
        let mut h = x;
        let mut kl: Option<Var> = None;
        let mut used = NoiseSet::new();
        for (i, (layer, pv)) in self.layers.iter().zip(params).enumerate() {
            let pass = match &mut noise {
                Noise::Draw(rng) => layer.forward_on_tape(tape, pv, h, None, Some(rng)),
                Noise::Replay(set) => {
                    let replay = layer.is_variational().then(|| &set[used.len()]);
                    layer.forward_on_tape(tape, pv, h, replay, None)
                }
            }
            .map_err(|e| e.context(format_args!("layer {i}")))?;
            if let Some(n) = pass.noise {
                used.push(n);
            }
            if let Some(k) = pass.kl {
                kl = Some(match kl {
                    Some(acc) => tape.add(acc, k)?,
                    None => k,
                });
            }
            h = pass.output;
        }
        Ok(ModelPass {
            output: h,
            kl,
            noise: used,
        })
    }

    fn run(&self, x: &Tensor, noise: Noise<'_>) -> Result<(Tensor, f64, NoiseSet)> {
        let mut tape = Tape::new();
        let params: Vec<Vec<Var>> = self
            .layers
            .iter()
            .map(|l| l.params().into_iter().map(|(_, t)| tape.constant(t.clone())).collect())
            .collect();
        let xv = tape.constant(x.clone());
        let pass = self.forward_on_tape(&mut tape, &params, xv, noise)?;
        let kl = pass.kl.map(|k| tape.value(k).item()).unwrap_or(0.0);
        Ok((tape.value(pass.output).clone(), kl, pass.noise))
    }

    /// Raw network output and total KL for one fresh weight sample.
    pub fn forward(&self, x: &Tensor, rng: &mut RngStream) -> Result<(Tensor, f64)> {
        self.run(x, Noise::Draw(rng)).map(|(o, k, _)| (o, k))
    }

    pub fn forward_with_noise(&self, x: &Tensor, noise: &NoiseSet) -> Result<(Tensor, f64)> {
        self.run(x, Noise::Replay(noise)).map(|(o, k, _)| (o, k))
    }

    /// Draws noise for one forward pass without running it.
    pub fn draw_noise(&self, rng: &mut RngStream) -> NoiseSet {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Variational(v) => Some(v.draw_noise(rng)),
                Layer::Dense(_) => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_topologies() {
        let c1 = ModelSpec::case1(4, &DEFAULT_HIDDEN_UNITS);
        let kinds: Vec<bool> = c1.layers.iter().map(LayerSpec::is_variational).collect();
        assert_eq!(kinds, [true, true, false]);
        let c2 = ModelSpec::case2(4, &DEFAULT_HIDDEN_UNITS);
        let kinds: Vec<bool> = c2.layers.iter().map(LayerSpec::is_variational).collect();
        assert_eq!(kinds, [false, false, true]);
        assert_eq!(
            c2.hybrid_split(),
            HybridSplit { deterministic: 2, probabilistic: 1, canonical: true }
        );
        assert!(!c1.hybrid_split().canonical);
        let dense = ModelSpec::all_dense(4, &[8, 8]);
        assert_eq!(dense.hybrid_split().deterministic, 3);
        assert_eq!(dense.hybrid_split().probabilistic, 0);
        assert!(dense.hybrid_split().canonical);
    }

    #[test]
    fn all_variational_doubles_param_count() {
        let v = build_model(&ModelSpec::all_variational(3, &[8, 5]), 1).unwrap();
        let d = build_model(&ModelSpec::all_dense(3, &[8, 5]), 1).unwrap();
        assert_eq!(v.param_count(), 2 * d.param_count());
    }

    #[test]
    fn build_errors() {
        let mut s = ModelSpec::case2(3, &[4]);
        s.layers[1] = LayerSpec::variational(3, PosteriorFamily::MeanField);
        assert!(matches!(build_model(&s, 0), Err(BnnError::Build { layer: 1, .. })));

        let mut r = ModelSpec::all_dense(1, &[]);
        r.layers = vec![LayerSpec::variational(1, PosteriorFamily::Radial)];
        r.head = Head::Categorical { classes: 1 };
        assert!(matches!(build_model(&r, 0), Err(BnnError::Build { layer: 0, .. })));

        let empty = ModelSpec { input_width: 2, layers: vec![], head: Head::Gaussian };
        assert!(build_model(&empty, 0).is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let s = ModelSpec::case1(3, &[8, 8]);
        assert_eq!(build_model(&s, 42).unwrap(), build_model(&s, 42).unwrap());
        assert_ne!(build_model(&s, 42).unwrap(), build_model(&s, 43).unwrap());
    }

    #[test]
    fn default_activations() {
        let s = ModelSpec::case2(3, &[8, 8]);
        assert_eq!(s.activation_of(0), ActivationKind::Sigmoid);
        assert_eq!(s.activation_of(2), ActivationKind::Identity);
    }

    #[test]
    fn json_format_and_unknown_fields() {
        let text = r#"{
            "input_width": 2,
            "layers": [
                {"kind": "dense", "units": 4, "activation": "relu"},
                {"kind": "dense-variational", "units": 2, "posterior": "radial", "prior_sigma": 0.5}
            ],
            "head": {"type": "gaussian"}
        }"#;
        let s = ModelSpec::from_json(text).unwrap();
        assert_eq!(s.hybrid_split().probabilistic, 1);
        let bad = text.replace(r#""activation": "relu""#, r#""posterior": "radial""#);
        assert!(ModelSpec::from_json(&bad).is_err());
    }

    #[test]
    fn replay_reproduces_forward() {
        let m = build_model(&ModelSpec::all_variational(2, &[3]), 9).unwrap();
        let x = Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let mut rng = RngStream::new(4);
        let noise = m.draw_noise(&mut rng.clone());
        let (a, ka) = m.forward(&x, &mut rng).unwrap();
        let (b, kb) = m.forward_with_noise(&x, &noise).unwrap();
        assert_eq!(a, b);
        assert_eq!(ka, kb);
    }
}
