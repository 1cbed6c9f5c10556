//! Shared fixtures for the criterion benches.

use bnn_core::data::{generate, Synthetic};
use bnn_core::{build_model, Dataset, Model, ModelSpec};

/// Sine data of the given size with three features, standardized.
pub fn sine_data(n: usize) -> Dataset {
    generate(Synthetic::Sine, n, 3, 0.1, 1)
        .and_then(Dataset::standardize)
        .expect("synthetic data")
}

/// A built model for one of the named layouts: `dense`, `case1`, `case2`,
/// `variational`.
pub fn model(layout: &str, hidden: &[usize]) -> Model {
    let spec = match layout {
        "dense" => ModelSpec::all_dense(3, hidden),
        "case1" => ModelSpec::case1(3, hidden),
        "case2" => ModelSpec::case2(3, hidden),
        "variational" => ModelSpec::all_variational(3, hidden),
        other => panic!("unknown layout {other}"),
    };
    build_model(&spec, 0).expect("valid spec")
}
