//! Command implementations. Errors carry the name of the stage that failed.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use bnn_core::checkpoint::Checkpoint;
use bnn_core::data::{generate, read_csv, split_indices};
use bnn_core::layers::prior_unit_diagnostic;
use bnn_core::objective::PROB_FLOOR;
use bnn_core::predictive::{calibration_metrics, classify, format_prediction_report, posterior_predictive_batch};
use bnn_core::{
    build_model, CalibrationMetrics, Dataset, Head, IntervalMethod, LayerSpec, Model, ModelSpec, PosteriorFamily,
    PredictiveSummary, Provenance, RngStream, Standardization, Targets, Task, TrainFailure, TrainTrace,
};

use crate::{DataArgs, DiagnoseArgs, FitArgs, GenDataArgs, PredictArgs, Subset, SweepArgs, TrainArgs};

/// JSON has no infinities; write them as strings.
fn finite_or_string<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn opt_finite_or_string<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => finite_or_string(v, s),
        None => s.serialize_none(),
    }
}

fn write_record<T: Serialize>(out: &mut dyn Write, record: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_spec(path: &Path) -> Result<ModelSpec> {
    ModelSpec::load(path).with_context(|| format!("load spec {}", path.display()))
}

/// Replaces the family of every variational layer.
pub fn with_family(spec: &ModelSpec, family: Option<PosteriorFamily>) -> ModelSpec {
    let Some(family) = family else { return spec.clone() };
    let mut s = spec.clone();
    for l in &mut s.layers {
        if let LayerSpec::DenseVariational { posterior, .. } = l {
            *posterior = family;
        }
    }
    s
}

/// Train/test partition with features standardized by training statistics.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub standardization: Standardization,
}

fn apply_standardization(mut d: Dataset, s: &Standardization) -> Result<Dataset> {
    d.features = s.apply(&d.features)?;
    d.standardization = s.clone();
    Ok(d)
}

pub fn prepare_split(raw: &Dataset, fraction: f64, seed: u64) -> Result<PreparedData> {
    let (train_idx, test_idx) = split_indices(raw.len(), fraction, seed)?;
    if train_idx.is_empty() {
        bail!("split leaves no training rows");
    }
    let train = raw.subset(&train_idx);
    let standardization = Standardization::fit(&train.features);
    Ok(PreparedData {
        train: apply_standardization(train, &standardization)?,
        test: apply_standardization(raw.subset(&test_idx), &standardization)?,
        standardization,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: TrainTrace,
    pub checkpoint: Checkpoint,
    pub data: PreparedData,
}

/// Builds `spec`, trains it on the training part of `raw`, and packages a
/// checkpoint. A training failure surfaces as a [`TrainFailure`] inside the
/// error, carrying the partial trace.
pub fn train_from_spec(spec: &ModelSpec, raw: &Dataset, data: &DataArgs, fit: &FitArgs) -> Result<TrainOutcome> {
    let spec = with_family(spec, fit.posterior_family);
    if spec.input_width != raw.width() {
        bail!(
            "stage check-width: spec expects {} features, data has {}",
            spec.input_width,
            raw.width()
        );
    }
    let prepared = prepare_split(raw, data.split, data.split_seed).context("stage split")?;
    let mut model = build_model(&spec, fit.init_seed()).context("stage build-model")?;
    let trace = bnn_core::train(&mut model, &prepared.train, &fit.train_config()).context("stage train")?;
    let checkpoint = Checkpoint::new(
        &model,
        Provenance {
            init_seed: fit.init_seed(),
            train_seed: fit.seed,
            split_seed: data.split_seed,
            split_fraction: data.split,
            target: data.target.clone(),
        },
        prepared.standardization.clone(),
    );
    Ok(TrainOutcome {
        model,
        trace,
        checkpoint,
        data: prepared,
    })
}

/// Predictions on a standardized dataset plus their calibration.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summaries: Vec<PredictiveSummary>,
    pub actuals: Vec<f64>,
    pub metrics: CalibrationMetrics,
}

pub fn evaluate(model: &Model, data: &Dataset, n_samples: usize, seed: u64, method: IntervalMethod) -> Result<Evaluation> {
    if data.is_empty() {
        bail!("no rows to evaluate");
    }
    let actuals = data
        .targets
        .as_real()
        .ok_or_else(|| anyhow!("regression evaluation needs real-valued targets"))?
        .to_vec();
    let mut rng = RngStream::new(seed);
    let summaries = posterior_predictive_batch(model, &data.features, n_samples, &mut rng, method)?;
    let metrics = calibration_metrics(&summaries, &actuals)?;
    Ok(Evaluation {
        summaries,
        actuals,
        metrics,
    })
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<()> {
    let d = generate(a.kind, a.n, a.width, a.noise, a.seed).context("stage generate")?;
    d.write_csv(&a.out)
        .with_context(|| format!("stage write-data {}", a.out.display()))?;
    writeln!(out, "wrote {} rows x {} features to {}", d.len(), d.width(), a.out.display())?;
    Ok(())
}

fn read_data(data: &DataArgs) -> Result<Dataset> {
    read_csv(&data.data, &data.target, data.task).with_context(|| format!("stage read-data {}", data.data.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    record: &'static str,
    epochs: usize,
    train_rows: usize,
    test_rows: usize,
    param_count: usize,
    #[serde(serialize_with = "opt_finite_or_string")]
    final_total: Option<f64>,
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let spec = load_spec(&a.spec).context("stage load-spec")?;
    let raw = read_data(&a.data)?;
    let outcome = match train_from_spec(&spec, &raw, &a.data, &a.fit) {
        Ok(o) => o,
        Err(e) => {
            if let Some(f) = e.downcast_ref::<TrainFailure>() {
                fs::write(&a.trace, f.trace.to_jsonl())
                    .with_context(|| format!("stage write-trace {}", a.trace.display()))?;
            }
            return Err(e);
        }
    };
    fs::write(&a.trace, outcome.trace.to_jsonl()).with_context(|| format!("stage write-trace {}", a.trace.display()))?;
    outcome
        .checkpoint
        .save(&a.checkpoint)
        .with_context(|| format!("stage write-checkpoint {}", a.checkpoint.display()))?;
    write_record(
        out,
        &TrainSummary {
            record: "train",
            epochs: outcome.trace.epochs.len(),
            train_rows: outcome.data.train.len(),
            test_rows: outcome.data.test.len(),
            param_count: outcome.model.param_count(),
            final_total: outcome.trace.epochs.last().map(|r| r.total),
        },
    )
}

#[derive(Serialize)]
struct MetricsRecord {
    record: &'static str,
    subset: &'static str,
    n: usize,
    n_samples: usize,
    #[serde(serialize_with = "finite_or_string")]
    rmse: f64,
    #[serde(serialize_with = "finite_or_string")]
    nll: f64,
    coverage95: f64,
}

#[derive(Serialize)]
struct ClassMetricsRecord {
    record: &'static str,
    subset: &'static str,
    n: usize,
    n_samples: usize,
    accuracy: f64,
    #[serde(serialize_with = "finite_or_string")]
    nll: f64,
}

#[derive(Serialize)]
struct ClassLine<'a> {
    label: usize,
    probs: &'a [f64],
    entropy: f64,
    actual: usize,
}

fn subset_name(s: Subset) -> &'static str {
    match s {
        Subset::All => "all",
        Subset::Train => "train",
        Subset::Test => "test",
    }
}

pub fn cmd_predict(a: &PredictArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).with_context(|| format!("stage load-checkpoint {}", a.checkpoint.display()))?;
    let model = ckpt.model().context("stage load-checkpoint")?;
    let task = match model.head() {
        Head::Gaussian => Task::Regression,
        Head::Categorical { .. } => Task::Classification,
    };
    let prov = &ckpt.provenance;
    let raw = read_csv(&a.data, &prov.target, task).with_context(|| format!("stage read-data {}", a.data.display()))?;
    if raw.width() != model.input_width() {
        bail!(
            "stage check-width: checkpoint expects {} features, {} has {}",
            model.input_width(),
            a.data.display(),
            raw.width()
        );
    }
    let rows: Vec<usize> = match a.subset {
        Subset::All => (0..raw.len()).collect(),
        Subset::Train | Subset::Test => {
            let (train, test) = split_indices(raw.len(), prov.split_fraction, prov.split_seed).context("stage split")?;
            if a.subset == Subset::Train {
                train
            } else {
                test
            }
        }
    };
    if rows.is_empty() {
        bail!("stage split: subset {} is empty", subset_name(a.subset));
    }
    let data = apply_standardization(raw.subset(&rows), &ckpt.standardization).context("stage standardize")?;

    let mut report = String::new();
    let metrics_line = match task {
        Task::Regression => {
            let ev = evaluate(&model, &data, a.n_samples, a.seed, a.interval.into()).context("stage predict")?;
            report = format_prediction_report(&ev.summaries, &ev.actuals)?;
            serde_json::to_string(&MetricsRecord {
                record: "metrics",
                subset: subset_name(a.subset),
                n: ev.actuals.len(),
                n_samples: a.n_samples,
                rmse: ev.metrics.rmse,
                nll: ev.metrics.nll,
                coverage95: ev.metrics.coverage95,
            })?
        }
        Task::Classification => {
            let Targets::Labels(labels) = &data.targets else { unreachable!("classification data has labels") };
            let mut rng = RngStream::new(a.seed);
            let preds = classify(&model, &data.features, a.n_samples, &mut rng).context("stage predict")?;
            let (mut hits, mut nll) = (0usize, 0.0);
            for (p, &y) in preds.iter().zip(labels) {
                let prob = p.probs.get(y).copied().ok_or_else(|| anyhow!("stage predict: label {y} out of range"))?;
                hits += usize::from(p.label == y);
                nll -= prob.max(PROB_FLOOR).ln();
                report.push_str(&serde_json::to_string(&ClassLine {
                    label: p.label,
                    probs: &p.probs,
                    entropy: p.entropy,
                    actual: y,
                })?);
                report.push('\n');
            }
            let n = labels.len();
            serde_json::to_string(&ClassMetricsRecord {
                record: "metrics",
                subset: subset_name(a.subset),
                n,
                n_samples: a.n_samples,
                accuracy: hits as f64 / n as f64,
                nll: nll / n as f64,
            })?
        }
    };

    match &a.report {
        Some(p) => fs::write(p, &report).with_context(|| format!("stage write-report {}", p.display()))?,
        None => out.write_all(report.as_bytes())?,
    }
    match &a.metrics {
        Some(p) => fs::write(p, format!("{metrics_line}\n")).with_context(|| format!("stage write-metrics {}", p.display()))?,
        None => writeln!(out, "{metrics_line}")?,
    }
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseHeader {
    record: &'static str,
    samples: usize,
    depth: usize,
    seed: u64,
    probe: &'static str,
    unreliable: bool,
}

#[derive(Serialize)]
struct KurtosisRow {
    record: &'static str,
    layer: usize,
    excess_kurtosis: f64,
    mean: f64,
}

pub fn cmd_diagnose_prior(a: &DiagnoseArgs, out: &mut dyn Write) -> Result<()> {
    let spec = load_spec(&a.spec).context("stage load-spec")?;
    let hidden = spec.layers.len() - 1;
    if hidden < 2 && a.depth.is_none() {
        bail!("stage diagnose: spec has {hidden} hidden layers, need at least 2");
    }
    let depth = a.depth.unwrap_or(hidden);
    let zeros = vec![0.0; spec.input_width];
    let probe = a.zero_probe.then_some(zeros.as_slice());
    let mut rng = RngStream::new(a.seed);
    let d = prior_unit_diagnostic(&spec, depth, a.samples, probe, &mut rng).context("stage diagnose")?;
    write_record(
        out,
        &DiagnoseHeader {
            record: "header",
            samples: d.n_samples,
            depth,
            seed: a.seed,
            probe: if a.zero_probe { "zero" } else { "normal" },
            unreliable: d.unreliable,
        },
    )?;
    for (i, (k, m)) in d.excess_kurtosis.iter().zip(&d.means).enumerate() {
        write_record(
            out,
            &KurtosisRow {
                record: "kurtosis",
                layer: i + 1,
                excess_kurtosis: *k,
                mean: *m,
            },
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepHeader {
    pub record: &'static str,
    pub layers: usize,
    pub seed: u64,
    pub init_seed: u64,
    pub split_seed: u64,
    pub split_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub n_samples: usize,
    pub posterior_family: PosteriorFamily,
    pub runs: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub record: &'static str,
    pub label: String,
    /// 1-based position of the variational layer; `None` for the case rows.
    pub position: Option<usize>,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(serialize_with = "opt_finite_or_string")]
    pub rmse: Option<f64>,
    #[serde(serialize_with = "opt_finite_or_string")]
    pub nll: Option<f64>,
    pub coverage95: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub header: SweepHeader,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        s
    }
}

/// Case 1 (variational hidden layers, deterministic output) or Case 2
/// (deterministic hidden layers, variational output) with the widths and
/// activations of `spec`.
pub fn case_spec(spec: &ModelSpec, case: u8, family: PosteriorFamily) -> ModelSpec {
    let last = spec.layers.len() - 1;
    let mut s = spec.clone();
    s.layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let variational = if case == 1 { i < last } else { i == last };
            if variational {
                l.to_variational(family)
            } else {
                l.to_dense()
            }
        })
        .collect();
    s
}

/// Trains each single-variational-layer placement and both cases with the
/// same seeds and split, evaluating on the held-out rows. Failed runs become
/// rows marked `failed`.
pub fn sweep_positions(
    spec: &ModelSpec,
    raw: &Dataset,
    data: &DataArgs,
    fit: &FitArgs,
    n_samples: usize,
    parallel: bool,
) -> Result<SweepTable> {
    spec.validate().context("stage validate-spec")?;
    let family = fit.posterior_family.unwrap_or_default();
    let l = spec.layers.len();
    let mut runs: Vec<(String, Option<usize>, ModelSpec)> = Vec::new();
    for p in 1..=l {
        runs.push((format!("position-{p}"), Some(p), spec.with_single_variational(p, family)?));
    }
    runs.push(("case1".into(), None, case_spec(spec, 1, family)));
    runs.push(("case2".into(), None, case_spec(spec, 2, family)));

    let one = |(label, position, s): &(String, Option<usize>, ModelSpec)| -> SweepRow {
        let result = train_from_spec(s, raw, data, fit).and_then(|o| {
            evaluate(&o.model, &o.data.test, n_samples, fit.seed, IntervalMethod::Gaussian).context("stage evaluate")
        });
        match result {
            Ok(ev) => SweepRow {
                record: "row",
                label: label.clone(),
                position: *position,
                status: "ok",
                error: None,
                rmse: Some(ev.metrics.rmse),
                nll: Some(ev.metrics.nll),
                coverage95: Some(ev.metrics.coverage95),
            },
            Err(e) => SweepRow {
                record: "row",
                label: label.clone(),
                position: *position,
                status: "failed",
                error: Some(format!("{e:#}")),
                rmse: None,
                nll: None,
                coverage95: None,
            },
        }
    };
    let rows: Vec<SweepRow> = if parallel {
        runs.par_iter().map(one).collect()
    } else {
        runs.iter().map(one).collect()
    };
    Ok(SweepTable {
        header: SweepHeader {
            record: "header",
            layers: l,
            seed: fit.seed,
            init_seed: fit.init_seed(),
            split_seed: data.split_seed,
            split_fraction: data.split,
            epochs: fit.epochs,
            batch_size: fit.batch_size,
            learning_rate: fit.learning_rate,
            n_samples,
            posterior_family: family,
            runs: runs.iter().map(|r| r.0.clone()).collect(),
        },
        rows,
    })
}

pub fn cmd_sweep_position(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let spec = load_spec(&a.spec).context("stage load-spec")?;
    let raw = read_data(&a.data)?;
    let table = sweep_positions(&spec, &raw, &a.data, &a.fit, a.n_samples, !a.sequential)?;
    out.write_all(table.to_jsonl().as_bytes())?;
    Ok(())
}
