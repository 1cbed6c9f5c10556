//! Monte Carlo posterior predictive, the prediction report format, and
//! calibration metrics.

use serde::{Deserialize, Serialize};

use crate::autodiff::{activate, softplus, ActivationKind};
use crate::error::{BnnError, Result};
use crate::model::{Head, Model};
use crate::objective::SCALE_FLOOR;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Two-sided 95% standard-normal quantile.
pub const Z95: f64 = 1.96;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMethod {
    /// `mean ± 1.96·stddev`
    #[default]
    Gaussian,
    /// 2.5% / 97.5% quantiles of draws from the predictive mixture.
    EmpiricalQuantile,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub stddev: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_samples: usize,
    /// Variance of the sampled means.
    pub epistemic_var: f64,
    /// Mean of the sampled head variances.
    pub aleatoric_var: f64,
}

impl PredictiveSummary {
    /// Summary with a Gaussian 95% interval.
    pub fn from_moments(mean: f64, stddev: f64) -> Self {
        PredictiveSummary {
            mean,
            stddev,
            ci_low: mean - Z95 * stddev,
            ci_high: mean + Z95 * stddev,
            n_samples: 0,
            epistemic_var: 0.0,
            aleatoric_var: stddev * stddev,
        }
    }
}

fn check_inputs(model: &Model, x: &Tensor, n_samples: usize) -> Result<()> {
    if n_samples < 2 {
        return Err(BnnError::Config("posterior predictive needs at least 2 samples".into()));
    }
    if x.rank() != 2 || x.cols() != model.input_width() {
        return Err(BnnError::shape("predict input", x.shape(), &[model.input_width()]));
    }
    Ok(())
}

/// Mean computed as an offset from the first value, so a constant sequence
/// averages to that constant exactly.
fn shifted_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Posterior predictive for every row of `x` under a Gaussian head.
///
/// Each Monte Carlo sample draws one set of weights for the whole batch.
/// Per row: mean of the sampled head means; variance = variance of sampled
/// means (population form) + mean of sampled head variances.
pub fn posterior_predictive_batch(
    model: &Model,
    x: &Tensor,
    n_samples: usize,
    rng: &mut RngStream,
    method: IntervalMethod,
) -> Result<Vec<PredictiveSummary>> {
    if model.head() != Head::Gaussian {
        return Err(BnnError::Config("posterior_predictive needs a gaussian head".into()));
    }
    check_inputs(model, x, n_samples)?;
    let rows = x.rows();
    let mut means = vec![Vec::with_capacity(n_samples); rows];
    let mut vars = vec![Vec::with_capacity(n_samples); rows];
    for s in 0..n_samples {
        let (out, _) = model
            .forward(x, rng)
            .map_err(|e| e.context(format_args!("predictive sample {s}")))?;
        if !out.is_finite() {
            return Err(BnnError::Numerical(format!("non-finite prediction in sample {s}")));
        }
        for i in 0..rows {
            let sd = softplus(out.at(i, 1)) + SCALE_FLOOR;
            means[i].push(out.at(i, 0));
            vars[i].push(sd * sd);
        }
    }
    let n = n_samples as f64;
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let mean = shifted_mean(&means[i]);
        let epistemic_var = means[i].iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / n;
        let aleatoric_var = shifted_mean(&vars[i]);
        let stddev = (epistemic_var + aleatoric_var).sqrt();
        let (ci_low, ci_high) = match method {
            IntervalMethod::Gaussian => (mean - Z95 * stddev, mean + Z95 * stddev),
            IntervalMethod::EmpiricalQuantile => {
                let mut draws: Vec<f64> = means[i]
                    .iter()
                    .zip(&vars[i])
                    .map(|(m, v)| m + v.sqrt() * rng.normal())
                    .collect();
                draws.sort_by(f64::total_cmp);
                (quantile(&draws, 0.025), quantile(&draws, 0.975))
            }
        };
        out.push(PredictiveSummary {
            mean,
            stddev,
            ci_low,
            ci_high,
            n_samples,
            epistemic_var,
            aleatoric_var,
        });
    }
    Ok(out)
}

/// Posterior predictive for a single input row.
pub fn posterior_predictive(
    model: &Model,
    x: &Tensor,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<PredictiveSummary> {
    if x.rank() != 2 || x.rows() != 1 {
        return Err(BnnError::shape("posterior_predictive", x.shape(), &[1, model.input_width()]));
    }
    Ok(posterior_predictive_batch(model, x, n_samples, rng, IntervalMethod::Gaussian)?[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrediction {
    /// Model-averaged class probabilities.
    pub probs: Vec<f64>,
    pub label: usize,
    /// Entropy of `probs`, in nats.
    pub entropy: f64,
}

/// Bayesian model average of softmax outputs over `n_samples` weight draws.
pub fn classify(model: &Model, x: &Tensor, n_samples: usize, rng: &mut RngStream) -> Result<Vec<ClassPrediction>> {
    let Head::Categorical { classes } = model.head() else {
        return Err(BnnError::Config("classify needs a categorical head".into()));
    };
    check_inputs(model, x, n_samples)?;
    let mut acc = Tensor::zeros(&[x.rows(), classes]);
    for s in 0..n_samples {
        let (out, _) = model.forward(x, rng).map_err(|e| e.context(format_args!("predictive sample {s}")))?;
        acc.accumulate(&activate(ActivationKind::SoftmaxRows, &out)?);
    }
    Ok((0..x.rows())
        .map(|i| {
            let probs: Vec<f64> = acc.row(i).iter().map(|p| p / n_samples as f64).collect();
            let label = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .unwrap_or(0);
            let entropy = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
            ClassPrediction { probs, label, entropy }
        })
        .collect())
}

/// Formats like Python's `round(v, 2)` repr: `5.4`, `6.0`, `4.61`.
pub fn format_2dp(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r:?}")
}

/// One line per example:
/// `Prediction mean: {m}, stddev: {s}, 95% CI: [{hi} - {lo}] - Actual: {a}`.
pub fn format_prediction_report(summaries: &[PredictiveSummary], actuals: &[f64]) -> Result<String> {
    if summaries.len() != actuals.len() {
        return Err(BnnError::shape("report", &[summaries.len()], &[actuals.len()]));
    }
    let mut out = String::new();
    for (s, a) in summaries.iter().zip(actuals) {
        out.push_str(&format!(
            "Prediction mean: {}, stddev: {}, 95% CI: [{} - {}] - Actual: {}\n",
            format_2dp(s.mean),
            format_2dp(s.stddev),
            format_2dp(s.ci_high),
            format_2dp(s.ci_low),
            format_2dp(*a),
        ));
    }
    Ok(out)
}

/// Numbers recovered from one report line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportLine {
    pub mean: f64,
    pub stddev: f64,
    pub ci_high: f64,
    pub ci_low: f64,
    pub actual: f64,
}

/// Parses a line produced by [`format_prediction_report`].
pub fn parse_prediction_line(line: &str) -> Result<ReportLine> {
    let bad = || BnnError::Data(format!("not a prediction line: {line:?}"));
    let rest = line.trim().strip_prefix("Prediction mean: ").ok_or_else(bad)?;
    let (mean, rest) = rest.split_once(", stddev: ").ok_or_else(bad)?;
    let (stddev, rest) = rest.split_once(", 95% CI: [").ok_or_else(bad)?;
    let (ci, actual) = rest.split_once("] - Actual: ").ok_or_else(bad)?;
    // the bounds may be negative, so split on the spaced separator
    let (hi, lo) = ci.split_once(" - ").ok_or_else(bad)?;
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    Ok(ReportLine {
        mean: num(mean)?,
        stddev: num(stddev)?,
        ci_high: num(hi)?,
        ci_low: num(lo)?,
        actual: num(actual)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMetrics {
    pub rmse: f64,
    pub nll: f64,
    pub coverage95: f64,
}

/// RMSE of the means, mean Gaussian NLL under `(mean, stddev)`, and the
/// fraction of actuals inside `[ci_low, ci_high]`.
///
/// A zero stddev with a miss makes the NLL `+inf`; a zero stddev hit
/// exactly contributes `-inf` unless a miss is also present.
pub fn calibration_metrics(summaries: &[PredictiveSummary], actuals: &[f64]) -> Result<CalibrationMetrics> {
    if summaries.is_empty() {
        return Err(BnnError::Data("calibration needs at least one prediction".into()));
    }
    if summaries.len() != actuals.len() {
        return Err(BnnError::shape("calibration", &[summaries.len()], &[actuals.len()]));
    }
    let n = summaries.len() as f64;
    let (mut se, mut nll, mut covered) = (0.0, 0.0, 0usize);
    let (mut miss_degenerate, mut hit_degenerate) = (false, false);
    for (s, &a) in summaries.iter().zip(actuals) {
        let r = a - s.mean;
        se += r * r;
        if s.stddev > 0.0 {
            let z = r / s.stddev;
            nll += crate::distributions::HALF_LN_2PI + s.stddev.ln() + 0.5 * z * z;
        } else if r == 0.0 {
            hit_degenerate = true;
        } else {
            miss_degenerate = true;
        }
        if s.ci_low <= a && a <= s.ci_high {
            covered += 1;
        }
    }
    let nll = if miss_degenerate {
        f64::INFINITY
    } else if hit_degenerate {
        f64::NEG_INFINITY
    } else {
        nll / n
    };
    Ok(CalibrationMetrics {
        rmse: (se / n).sqrt(),
        nll,
        coverage95: covered as f64 / n,
    })
}
