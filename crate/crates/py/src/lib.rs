//! Python bindings: datasets, configs, simulations and the standalone
//! privacy, clustering, sampling and loss operations.

use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use fedcl_core::client::{local_loss, TrainingExample};
use fedcl_core::config::ExperimentConfig as CoreConfig;
use fedcl_core::dataset::{Dataset as CoreDataset, Format};
use fedcl_core::eval::Phase;
use fedcl_core::federation::Simulation as CoreSimulation;
use fedcl_core::model::{Matrix, SharedParams, UserEmbedding};
use fedcl_core::negsampling::{difficulty_rank, semi_hard_sample, SamplerConfig, SamplerMode};
use fedcl_core::privacy::{self, PrivacyConfig};
use fedcl_core::rng::{server_rng, Stream};
use fedcl_core::synthetic::{self, SyntheticConfig};
use fedcl_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any().unbind(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(to_py(py, x)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, to_py(py, x)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

/// Experiment configuration addressed by dotted keys.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct Config {
    inner: CoreConfig,
}

#[pymethods]
impl Config {
    /// Defaults, or the TOML file at `path`.
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<&str>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => CoreConfig::from_file(p).map_err(py_err)?,
            None => CoreConfig::default(),
        };
        Ok(Config { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Config {
            inner: CoreConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    /// Benchmark settings for the default synthetic data.
    #[staticmethod]
    fn benchmark() -> Self {
        Config {
            inner: synthetic::benchmark_config(),
        }
    }

    #[staticmethod]
    fn valid_keys() -> Vec<String> {
        CoreConfig::valid_keys()
    }

    /// Sets a leaf from its text form, e.g. `cfg.set("privacy.epsilon", "2")`.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let raw = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        self.inner.set(key, &raw).map_err(py_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.to_json())
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner.to_json())
    }
}

/// Per-user chronological interaction sequences.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    /// Reads `path` as `tabular`, `movielens` or a `canonical` directory.
    #[staticmethod]
    #[pyo3(signature = (path, format="tabular"))]
    fn ingest(path: &str, format: &str) -> PyResult<Self> {
        let format: Format = format.parse().map_err(py_err)?;
        Ok(Dataset {
            inner: CoreDataset::ingest(path, format).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_sequences(sequences: Vec<Vec<usize>>, num_items: usize) -> PyResult<Self> {
        Ok(Dataset {
            inner: CoreDataset::from_sequences(sequences, num_items).map_err(py_err)?,
        })
    }

    /// Planted-cluster data; keyword arguments override generator fields.
    #[staticmethod]
    #[pyo3(signature = (**params))]
    fn synthetic(params: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut value = serde_json::to_value(SyntheticConfig::default()).expect("config serializes");
        if let Some(params) = params {
            let fields = value.as_object_mut().expect("struct");
            for (k, v) in params.iter() {
                let k: String = k.extract()?;
                if !fields.contains_key(&k) {
                    return Err(PyValueError::new_err(format!("unknown synthetic field `{k}`")));
                }
                let v = if let Ok(b) = v.extract::<bool>() {
                    Value::from(b)
                } else if let Ok(i) = v.extract::<u64>() {
                    Value::from(i)
                } else {
                    Value::from(v.extract::<f64>()?)
                };
                fields.insert(k, v);
            }
        }
        let cfg: SyntheticConfig =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Dataset {
            inner: synthetic::generate(&cfg).map_err(py_err)?.dataset,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Dataset {
            inner: CoreDataset::load(dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(py_err)
    }

    fn kcore(&self, k: usize) -> PyResult<Self> {
        Ok(Dataset {
            inner: self.inner.kcore_filter(k).map_err(py_err)?,
        })
    }

    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &self.inner.stats().map_err(py_err)?)
    }

    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn sequences(&self) -> Vec<Vec<usize>> {
        self.inner.users.iter().map(|u| u.items.clone()).collect()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn num_actions(&self) -> usize {
        self.inner.num_actions()
    }

    fn __len__(&self) -> usize {
        self.inner.num_users()
    }
}

/// A federated training run over the leave-one-out split of a dataset.
#[pyclass(name = "Simulation", unsendable)]
struct Simulation {
    inner: CoreSimulation,
}

#[pymethods]
impl Simulation {
    #[new]
    fn new(config: &Config, dataset: &Dataset) -> PyResult<Self> {
        let split = dataset.inner.leave_one_out_split().map_err(py_err)?;
        Ok(Simulation {
            inner: CoreSimulation::new(&config.inner, Arc::new(split)).map_err(py_err)?,
        })
    }

    /// Runs one round and returns its metrics.
    fn run_round(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let timings = self.inner.config().log.timings;
        let m = self.inner.run_round().map_err(py_err)?;
        to_py(py, &m.to_json(timings))
    }

    /// Trains to convergence or the round limit. Returns the outcome and the
    /// per-round log.
    fn train(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let timings = self.inner.config().log.timings;
        let out = self.inner.train(|_| {}).map_err(py_err)?;
        let log: Vec<Value> = out.log.iter().map(|m| m.to_json(timings)).collect();
        let summary = serde_json::json!({
            "best_round": out.best_round,
            "rounds_run": out.rounds_run,
            "converged": out.converged,
            "val": out.best_val,
            "test": out.test,
            "log": log,
        });
        to_py(py, &summary)
    }

    /// HR@5, HR@10, nDCG@5 and nDCG@10 of the current parameters.
    #[pyo3(signature = (phase="val"))]
    fn evaluate(&self, py: Python<'_>, phase: &str) -> PyResult<Py<PyAny>> {
        let phase: Phase = phase.parse().map_err(py_err)?;
        to_py_json(py, &self.inner.evaluate(phase).map_err(py_err)?)
    }

    #[getter]
    fn round(&self) -> u64 {
        self.inner.round()
    }

    /// Row-major item embedding table.
    fn item_embeddings(&self) -> Vec<Vec<f64>> {
        let t = &self.inner.server.shared.item_table;
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn upload_counts(&self) -> Vec<usize> {
        self.inner.upload_counts()
    }
}

/// Rescales `v` into the L1 ball of radius `delta`.
#[pyfunction]
fn l1_clip(v: Vec<f64>, delta: f64) -> Vec<f64> {
    privacy::l1_clip(&v, delta)
}

/// Clips and adds Laplace(2·delta/epsilon) noise with a seeded stream.
#[pyfunction]
#[pyo3(signature = (v, delta=1.0, epsilon=4.0, seed=0))]
fn protect(v: Vec<f64>, delta: f64, epsilon: f64, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = PrivacyConfig { delta, epsilon };
    cfg.validate().map_err(py_err)?;
    let mut rng = server_rng(seed, Stream::Privacy);
    Ok(privacy::protect(0, &v, &cfg, &mut rng).map_err(py_err)?.vector)
}

/// Ward merge sequence as `(low, high, cost)` triples, stopping at `target` clusters.
#[pyfunction]
#[pyo3(signature = (points, target=1))]
fn ward_merges(points: Vec<Vec<f64>>, target: usize) -> PyResult<Vec<(usize, usize, f64)>> {
    if let Some(d) = points.first().map(Vec::len) {
        if let Some(bad) = points.iter().find(|p| p.len() != d) {
            return Err(py_err(Error::DimensionMismatch { expected: d, got: bad.len() }));
        }
    }
    let refs: Vec<&[f64]> = points.iter().map(Vec::as_slice).collect();
    Ok(fedcl_core::clustering::ward_merges(&refs, target)
        .into_iter()
        .map(|m| (m.low, m.high, m.cost))
        .collect())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    Matrix::from_vec(rows.len(), cols, rows.concat()).map_err(py_err)
}

/// Item ids ranked by descending dot product with `centroid`.
#[pyfunction]
fn rank_items(centroid: Vec<f64>, items: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    difficulty_rank(&centroid, &matrix(&items)?).map_err(py_err)
}

/// Negatives drawn from a ranking: `semi_hard`, `globally_hardest` or `random`.
#[pyfunction]
#[pyo3(signature = (ranked, hard_ratio_percent=25.0, count=20, mode="semi_hard", seed=0))]
fn sample_negatives(ranked: Vec<usize>, hard_ratio_percent: f64, count: usize, mode: &str, seed: u64) -> PyResult<Vec<usize>> {
    let mode: SamplerMode = mode.parse().map_err(py_err)?;
    let cfg = SamplerConfig {
        hard_ratio_percent,
        num_semi_hard: count,
        mode,
    };
    let mut rng = server_rng(seed, Stream::SemiHard);
    Ok(semi_hard_sample(0, &ranked, &cfg, &mut rng).map_err(py_err)?.items)
}

/// Contrastive loss of one user embedding, a positive and its negatives,
/// given item vectors.
#[pyfunction]
fn contrastive_loss(user: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = user.len();
    let mut rows = vec![positive];
    rows.extend(negatives);
    let shared = SharedParams {
        item_table: matrix(&rows)?,
        projection: Matrix::identity(d),
    };
    let ex = TrainingExample {
        position: 0,
        positive: 0,
        user: UserEmbedding(user),
        negatives: (1..rows.len()).collect(),
    };
    local_loss(&[ex], &shared).map_err(py_err)
}

#[pymodule]
fn fedcl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Simulation>()?;
    m.add_function(wrap_pyfunction!(l1_clip, m)?)?;
    m.add_function(wrap_pyfunction!(protect, m)?)?;
    m.add_function(wrap_pyfunction!(ward_merges, m)?)?;
    m.add_function(wrap_pyfunction!(rank_items, m)?)?;
    m.add_function(wrap_pyfunction!(sample_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    Ok(())
}
