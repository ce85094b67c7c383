//! Python bindings: model specs with loss/gradient evaluation, and
//! experiments driven by the same TOML configs as the `fedmeta` CLI.

use std::collections::BTreeSet;

use fedmeta::analysis::decompose_round;
use fedmeta::data::FederatedDataset;
use fedmeta::federation::{RunOptions, TracePolicy, TrainingRun};
use fedmeta::model::{forward_loss, gradient, norm, predict};
use fedmeta::personalization::{eval_population, ReportSummary};
use fedmeta::rng::Streams;
use fedmeta::{Activation, Batch, Example, LossKind, ModelSpec, ParamVector};
use fedmeta_cli::ExperimentConfig;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn batch(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Batch> {
    if features.len() != labels.len() {
        return Err(py_err(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    Ok(Batch::new(
        features
            .into_iter()
            .zip(labels)
            .map(|(x, y)| Example::new(x, y))
            .collect(),
    ))
}

/// Summary tuple: `(mean_initial, std_initial, mean_personalized, std_personalized)`.
type Summary = (f64, f64, f64, f64);

fn summary(s: &ReportSummary) -> Summary {
    (
        s.mean_initial_acc,
        s.std_initial_acc,
        s.mean_personalized_acc,
        s.std_personalized_acc,
    )
}

#[pyclass(name = "ModelSpec", module = "fedmeta_py", frozen)]
struct PyModelSpec {
    inner: ModelSpec,
}

impl PyModelSpec {
    fn params(&self, params: Vec<f64>) -> PyResult<ParamVector> {
        if params.len() != self.inner.param_count() {
            return Err(py_err(format!(
                "expected {} parameters, got {}",
                self.inner.param_count(),
                params.len()
            )));
        }
        Ok(ParamVector::new(params))
    }
}

#[pymethods]
impl PyModelSpec {
    /// `layers` lists hidden widths followed by the number of classes.
    #[new]
    #[pyo3(signature = (input_dim, layers, activation = "relu", loss = "softmax_cross_entropy"))]
    fn new(input_dim: usize, layers: Vec<usize>, activation: &str, loss: &str) -> PyResult<Self> {
        let activation =
            Activation::parse(activation).ok_or_else(|| py_err(format!("unknown activation {activation:?}")))?;
        let loss = LossKind::parse(loss).ok_or_else(|| py_err(format!("unknown loss {loss:?}")))?;
        let inner = ModelSpec::new(input_dim, layers, activation, loss).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn init_params(&self, seed: u64) -> Vec<f64> {
        let streams = Streams::new(seed);
        self.inner
            .init_params(&mut streams.stream(fedmeta::rng::Purpose::Init, &[]))
            .into_vec()
    }

    fn loss(&self, params: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        forward_loss(&self.inner, &self.params(params)?, &batch(features, labels)?).map_err(py_err)
    }

    fn gradient(&self, params: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
        gradient(&self.inner, &self.params(params)?, &batch(features, labels)?)
            .map(|g| g.into_vec())
            .map_err(py_err)
    }

    fn predict(&self, params: Vec<f64>, features: Vec<f64>) -> PyResult<usize> {
        if features.len() != self.inner.input_dim() {
            return Err(py_err(format!("expected {} features", self.inner.input_dim())));
        }
        Ok(predict(&self.inner, &self.params(params)?, &features))
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelSpec(input_dim={}, layers={:?}, activation={:?}, loss={:?})",
            self.inner.input_dim(),
            self.inner.layer_dims(),
            self.inner.activation().name(),
            self.inner.loss().name()
        )
    }
}

/// A validated experiment config.
#[pyclass(name = "Experiment", module = "fedmeta_py", frozen)]
struct PyExperiment {
    cfg: ExperimentConfig,
}

impl PyExperiment {
    fn run(&self, seed: Option<u64>, trace: TracePolicy) -> PyResult<(TrainingRun, FederatedDataset, u64)> {
        let cfg = &self.cfg;
        let seed = seed.unwrap_or(cfg.seed);
        let spec = cfg.model_spec().map_err(py_err)?;
        let dataset = cfg.dataset().map_err(py_err)?;
        let opts = RunOptions {
            eval: Some(cfg.eval_config()),
            trace,
            ..RunOptions::default()
        };
        let mut run = TrainingRun::initialize(&spec, seed);
        for stage in [cfg.stage1().map_err(py_err)?, cfg.stage2().map_err(py_err)?] {
            if stage.rounds > 0 {
                run = run.run_stage(&dataset, &stage, &opts).map_err(|f| py_err(f.error))?;
            }
        }
        Ok((run, dataset, seed))
    }
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            cfg: ExperimentConfig::from_toml(text).map_err(py_err)?,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.cfg.config_hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn model_spec(&self) -> PyResult<PyModelSpec> {
        Ok(PyModelSpec {
            inner: self.cfg.model_spec().map_err(py_err)?,
        })
    }

    /// Runs both stages for one seed (the config's seed by default).
    #[pyo3(signature = (seed = None))]
    fn train(&self, seed: Option<u64>) -> PyResult<PyTrainResult> {
        let (run, dataset, seed) = self.run(seed, TracePolicy::Off)?;
        Ok(PyTrainResult {
            cfg: self.cfg.clone(),
            dataset,
            seed,
            run,
        })
    }

    /// Trains with `round` traced and splits it into FedSGD and FOMAML(j)
    /// terms. Returns `(residual, fedavg_norm, fedsgd_norm, fomaml_norms)`.
    #[pyo3(signature = (round, seed = None))]
    fn decompose(&self, round: usize, seed: Option<u64>) -> PyResult<(f64, f64, f64, Vec<f64>)> {
        let (run, _, _) = self.run(seed, TracePolicy::Rounds(BTreeSet::from([round])))?;
        let trace = run
            .rounds
            .iter()
            .find(|t| t.round == round)
            .ok_or_else(|| py_err(format!("round {round} was not run")))?;
        let r = decompose_round(trace, trace.beta).map_err(py_err)?;
        Ok((r.residual_norm, norm(&r.g_fedavg), norm(&r.g_fedsgd), r.fomaml_norms()))
    }
}

#[pyclass(name = "TrainResult", module = "fedmeta_py", frozen)]
struct PyTrainResult {
    cfg: ExperimentConfig,
    dataset: FederatedDataset,
    seed: u64,
    run: TrainingRun,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn seed(&self) -> u64 {
        self.seed
    }

    #[getter]
    fn completed_rounds(&self) -> usize {
        self.run.completed_rounds()
    }

    #[getter]
    fn params(&self) -> Vec<f64> {
        self.run.params.as_slice().to_vec()
    }

    /// `(round, mean_initial, std_initial, mean_personalized, std_personalized)` per snapshot.
    #[getter]
    fn metrics(&self) -> Vec<(usize, f64, f64, f64, f64)> {
        self.run
            .snapshots
            .iter()
            .map(|s| {
                let (a, b, c, d) = summary(&s.summary);
                (s.round, a, b, c, d)
            })
            .collect()
    }

    /// Personalizes the final model on the configured client population.
    #[pyo3(signature = (epochs = None))]
    fn personalize(&self, epochs: Option<usize>) -> PyResult<Summary> {
        let mut p = self.cfg.personalization_config();
        if let Some(e) = epochs {
            p.epochs = e;
        }
        let spec = self.cfg.model_spec().map_err(py_err)?;
        let report = eval_population(
            &spec,
            &self.run.params,
            &self.dataset,
            self.cfg.personalization.population,
            &p,
            &Streams::new(self.seed),
            self.run.completed_rounds() as u64,
        )
        .map_err(py_err)?;
        Ok(summary(report.summary()))
    }
}

#[pymodule]
fn fedmeta_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelSpec>()?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyTrainResult>()?;
    Ok(())
}
