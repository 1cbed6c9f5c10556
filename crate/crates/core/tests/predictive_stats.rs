use bnn_core::autodiff::softplus;
use bnn_core::objective::SCALE_FLOOR;
use bnn_core::predictive::{
    calibration_metrics, classify, posterior_predictive, posterior_predictive_batch, Z95,
};
use bnn_core::{
    build_model, ActivationKind, Head, IntervalMethod, Layer, LayerSpec, Model, ModelSpec, PosteriorFamily,
    PredictiveSummary, RngStream, Tensor,
};

fn linear_model(sigma: f64) -> Model {
    let spec = ModelSpec {
        input_width: 3,
        layers: vec![LayerSpec::variational(2, PosteriorFamily::MeanField).with_activation(ActivationKind::Identity)],
        head: Head::Gaussian,
    };
    let mut model = build_model(&spec, 5).unwrap();
    if let Layer::Variational(v) = &mut model.layers_mut()[0] {
        v.set_sigma(sigma);
    }
    model
}

fn probe() -> Tensor {
    Tensor::from_rows(&[vec![0.3, -0.8, 1.1]]).unwrap()
}

#[test]
fn deterministic_model_reports_head_scale() {
    let model = build_model(&ModelSpec::all_dense(3, &[4]), 2).unwrap();
    let x = Tensor::from_rows(&[vec![0.3, -0.8, 1.1], vec![2.0, 0.0, -1.0]]).unwrap();
    let summaries = posterior_predictive_batch(&model, &x, 50, &mut RngStream::new(1), IntervalMethod::Gaussian).unwrap();
    let (out, _) = model.forward(&x, &mut RngStream::new(0)).unwrap();
    for (i, s) in summaries.iter().enumerate() {
        assert_eq!(s.epistemic_var, 0.0);
        assert_eq!(s.stddev, softplus(out.at(i, 1)) + SCALE_FLOOR);
        assert_eq!(s.mean, out.at(i, 0));
    }
}

#[test]
fn variance_decomposes_into_epistemic_and_aleatoric() {
    let model = linear_model(0.2);
    let n = 400;
    let s = posterior_predictive(&model, &probe(), n, &mut RngStream::new(3)).unwrap();
    assert_eq!(s.stddev, (s.epistemic_var + s.aleatoric_var).sqrt());

    // recompute both terms from the same weight draws
    let mut rng = RngStream::new(3);
    let draws: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let (o, _) = model.forward(&probe(), &mut rng).unwrap();
            let sd = softplus(o.at(0, 1)) + SCALE_FLOOR;
            (o.at(0, 0), sd * sd)
        })
        .collect();
    let mean = draws.iter().map(|d| d.0).sum::<f64>() / n as f64;
    let epi = draws.iter().map(|d| (d.0 - mean).powi(2)).sum::<f64>() / n as f64;
    let ale = draws.iter().map(|d| d.1).sum::<f64>() / n as f64;
    assert!((s.mean - mean).abs() < 1e-12);
    assert!((s.epistemic_var - epi).abs() < 1e-12);
    assert!((s.aleatoric_var - ale).abs() < 1e-12);
}

#[test]
fn predictive_mean_error_shrinks_inverse_sqrt() {
    let model = linear_model(0.5);
    let reps = 40;
    let mut rng = RngStream::new(8);
    let spread: Vec<f64> = [100, 1000, 10_000]
        .iter()
        .map(|&n| {
            let ms: Vec<f64> = (0..reps)
                .map(|_| posterior_predictive(&model, &probe(), n, &mut rng).unwrap().mean)
                .collect();
            let m = ms.iter().sum::<f64>() / reps as f64;
            (ms.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt()
        })
        .collect();
    for w in spread.windows(2) {
        assert!((2.2..4.5).contains(&(w[0] / w[1])), "spreads {spread:?}");
    }
}

#[test]
fn coverage_of_self_consistent_draws() {
    let mut rng = RngStream::new(99);
    let n = 10_000;
    let summaries: Vec<PredictiveSummary> = (0..n)
        .map(|_| PredictiveSummary::from_moments(rng.uniform(-3.0, 3.0), rng.uniform(0.1, 2.0)))
        .collect();
    let actuals: Vec<f64> = summaries.iter().map(|s| s.mean + s.stddev * rng.normal()).collect();
    let m = calibration_metrics(&summaries, &actuals).unwrap();
    assert!((0.94..=0.96).contains(&m.coverage95), "coverage {}", m.coverage95);
    // Gaussian NLL expectation: 0.5 ln(2π) + E[ln s] + 0.5
    let expect = bnn_core::distributions::HALF_LN_2PI
        + summaries.iter().map(|s| s.stddev.ln()).sum::<f64>() / n as f64
        + 0.5;
    assert!((m.nll - expect).abs() < 0.03, "nll {} vs {expect}", m.nll);
}

#[test]
fn epistemic_variance_monotone_in_sigma() {
    let mut last = -1.0;
    for sigma in [0.01, 0.05, 0.1, 0.3, 0.8] {
        let s = posterior_predictive(&linear_model(sigma), &probe(), 200, &mut RngStream::new(4)).unwrap();
        assert!(s.epistemic_var >= last, "sigma {sigma}: {} < {last}", s.epistemic_var);
        last = s.epistemic_var;
    }
}

#[test]
fn intervals_are_symmetric_and_ordered() {
    let model = build_model(&ModelSpec::case2(3, &[4, 4]), 6).unwrap();
    let x = Tensor::new(vec![5, 3], RngStream::new(2).normals(15)).unwrap();
    for s in posterior_predictive_batch(&model, &x, 30, &mut RngStream::new(0), IntervalMethod::Gaussian).unwrap() {
        assert!(((s.ci_high - s.mean) - (s.mean - s.ci_low)).abs() < 1e-12);
        assert!((s.ci_high - s.mean - Z95 * s.stddev).abs() < 1e-12);
        assert!(s.ci_low <= s.mean && s.mean <= s.ci_high && s.stddev >= 0.0);
    }
    for s in posterior_predictive_batch(&model, &x, 200, &mut RngStream::new(0), IntervalMethod::EmpiricalQuantile).unwrap() {
        assert!(s.ci_low < s.ci_high);
    }
}

#[test]
fn predictive_rejects_bad_requests() {
    let model = linear_model(0.1);
    assert!(posterior_predictive(&model, &probe(), 1, &mut RngStream::new(0)).is_err());
    let wide = Tensor::from_rows(&[vec![0.0; 4]]).unwrap();
    assert!(posterior_predictive(&model, &wide, 10, &mut RngStream::new(0)).is_err());
    let mut broken = model.clone();
    if let Layer::Variational(v) = &mut broken.layers_mut()[0] {
        v.bias_mu.data_mut()[0] = f64::NAN;
    }
    assert!(posterior_predictive(&broken, &probe(), 10, &mut RngStream::new(0)).is_err());
}

#[test]
fn classification_averages_probabilities() {
    let spec = ModelSpec {
        input_width: 2,
        layers: vec![
            LayerSpec::variational(4, PosteriorFamily::MeanField),
            LayerSpec::dense(3),
        ],
        head: Head::Categorical { classes: 3 },
    };
    let model = build_model(&spec, 1).unwrap();
    let x = Tensor::from_rows(&[vec![0.5, 1.0], vec![-2.0, 0.1]]).unwrap();
    let preds = classify(&model, &x, 64, &mut RngStream::new(5)).unwrap();
    for p in preds {
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.entropy >= 0.0 && p.entropy <= 3f64.ln() + 1e-12);
        let best = p.probs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(p.probs[p.label], best);
    }
}
