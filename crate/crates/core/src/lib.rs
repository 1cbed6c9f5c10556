//! Variational Bayesian neural networks for small dense models.
//!
//! The crate covers the whole pipeline: a tape-based reverse-mode
//! [`autodiff`] engine, Gaussian priors with mean-field and radial
//! posteriors ([`distributions`]), deterministic and variational dense
//! [`layers`], declarative (possibly hybrid) [`model`] specs, the negative
//! ELBO [`objective`], the Bayes-by-backprop [`trainer`], Monte Carlo
//! [`predictive`] summaries, and [`data`] ingestion.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod distributions;
pub mod error;
pub mod layers;
pub mod model;
pub mod objective;
pub mod predictive;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use autodiff::{ActivationKind, Tape, Var};
pub use checkpoint::{Checkpoint, Provenance};
pub use data::{Dataset, Standardization, Synthetic, Task};
pub use distributions::{DiagonalGaussian, IsotropicGaussianPrior, NoiseDraw, PosteriorFamily, RadialPosterior};
pub use error::{BnnError, Result};
pub use layers::{DenseDeterministic, DenseVariational, Layer, LayerNoise, PriorDiagnostic};
pub use model::{build_model, Head, HybridSplit, LayerSpec, Model, ModelSpec, NoiseSet};
pub use objective::{ElboConfig, ElboEstimate, Targets};
pub use predictive::{CalibrationMetrics, IntervalMethod, PredictiveSummary};
pub use rng::RngStream;
pub use tensor::Tensor;
pub use trainer::{train, EpochRecord, Optimizer, TrainConfig, TrainFailure, TrainTrace, Trainer};
