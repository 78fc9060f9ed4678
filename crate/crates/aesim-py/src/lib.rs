//! Python bindings for the simulation platform: the synthetic world,
//! ranking metrics, the position-bias probe, and the pipeline stages.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use aesim::commands;
use aesim::config::ExperimentConfig;
use aesim::error::Error;
use aesim::ltr::{LossKind, PropensityTable};
use aesim::metrics::ProbeMode;
use aesim::world::{generate_catalog, OracleConfig, OracleUserModel};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(m) | Error::Dimension(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Item catalog of the synthetic world.
#[pyclass(name = "Catalog")]
struct PyCatalog {
    inner: aesim::world::Catalog,
}

#[pymethods]
impl PyCatalog {
    /// Generate a catalog of `n_items` items over `n_categories`.
    #[staticmethod]
    #[pyo3(signature = (n_items, n_categories, discrete_cardinalities, dense_width, seed))]
    fn generate(
        n_items: usize,
        n_categories: usize,
        discrete_cardinalities: Vec<u32>,
        dense_width: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = generate_catalog(n_items, n_categories, &discrete_cardinalities, dense_width, seed)
            .map_err(err)?;
        Ok(PyCatalog { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCatalog {
            inner: aesim::logio::load_catalog(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        aesim::logio::save_catalog(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.items.len()
    }

    #[getter]
    fn n_categories(&self) -> usize {
        self.inner.n_categories
    }

    #[getter]
    fn feature_width(&self) -> usize {
        self.inner.feature_width()
    }

    /// Dense feature encoding of one item by id.
    fn item_features(&self, item_id: u64) -> PyResult<Vec<f64>> {
        let item = self.inner.item(item_id).map_err(err)?;
        Ok(self.inner.item_features(item))
    }

    fn item_ids(&self) -> Vec<u64> {
        self.inner.items.iter().map(|i| i.item_id).collect()
    }
}

/// Ground-truth user population with a known examination curve.
#[pyclass(name = "Oracle")]
struct PyOracle {
    inner: OracleUserModel,
}

#[pymethods]
impl PyOracle {
    #[staticmethod]
    #[pyo3(signature = (catalog, user_dim=16, max_positions=50, seed=0))]
    fn generate(catalog: &PyCatalog, user_dim: usize, max_positions: usize, seed: u64) -> PyResult<Self> {
        let config = OracleConfig {
            user_dim,
            max_positions,
            seed,
            ..OracleConfig::default()
        };
        Ok(PyOracle {
            inner: OracleUserModel::generate(&catalog.inner, config).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| PyRuntimeError::new_err(format!("{}: {e}", path.display())))?;
        let inner = serde_json::from_str(&text)
            .map_err(|e| PyValueError::new_err(format!("oracle parse: {e}")))?;
        Ok(PyOracle { inner })
    }

    #[getter]
    fn user_dim(&self) -> usize {
        self.inner.config.user_dim
    }

    /// Draw one (user_vector, query_category) pair.
    fn sample_user(&self, seed: u64) -> (Vec<f64>, usize) {
        self.inner.sample_user(seed)
    }

    /// Examination probability at a 1-based position.
    fn examination_at(&self, position: usize) -> f64 {
        self.inner.examination_at(position)
    }

    /// Ground-truth relevance of one item for a user.
    fn relevance(&self, catalog: &PyCatalog, user_vec: Vec<f64>, item_id: u64) -> PyResult<f64> {
        let item = catalog.inner.item(item_id).map_err(err)?;
        Ok(self.inner.relevance(&catalog.inner, &user_vec, item))
    }

    /// Exact per-position expected (click, purchase) probabilities for a
    /// displayed list.
    fn expected_feedback(
        &self,
        catalog: &PyCatalog,
        user_vec: Vec<f64>,
        display: Vec<u64>,
    ) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let fb = self
            .inner
            .expected_feedback(&catalog.inner, &user_vec, &display)
            .map_err(err)?;
        Ok((fb.p_click, fb.p_purchase))
    }
}

/// ROC AUC with 0.5 credit for tied scores.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    aesim::metrics::auc(&scores, &labels).map_err(err)
}

/// Grouped AUC weighted by per-group positive counts. Returns
/// (gauc, groups_used, groups_skipped).
#[pyfunction]
fn gauc(groups: Vec<(Vec<f64>, Vec<f64>)>) -> PyResult<(f64, usize, usize)> {
    let (g, diag) = aesim::metrics::gauc(groups.iter().map(|(s, l)| (s.as_slice(), l.as_slice())))
        .map_err(err)?;
    Ok((g, diag.groups_used, diag.groups_skipped))
}

/// NDCG@k with gain 2^rel - 1.
#[pyfunction]
fn ndcg(scores: Vec<f64>, labels: Vec<f64>, k: usize) -> PyResult<f64> {
    aesim::metrics::ndcg(&scores, &labels, k).map_err(err)
}

/// Average precision of one list.
#[pyfunction]
fn average_precision(scores: Vec<f64>, labels: Vec<f64>) -> PyResult<f64> {
    aesim::metrics::average_precision(&scores, &labels).map_err(err)
}

/// Position-swap probe against the exact oracle on synthetic sessions;
/// returns the normalized propensities p(k) with p(1) = 1.
#[pyfunction]
#[pyo3(signature = (oracle, catalog, n_sessions, max_k, clip_floor=0.1, seed=0))]
fn oracle_bias_probe(
    oracle: &PyOracle,
    catalog: &PyCatalog,
    n_sessions: usize,
    max_k: usize,
    clip_floor: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    use aesim::pipeline::{IdentityReranker, Pipeline, PipelineConfig, RandomLinearScorer};
    let scorer = RandomLinearScorer::generate(
        &catalog.inner,
        oracle.inner.config.user_dim,
        aesim::rng::derive_seed(seed, "probe-scorer"),
    );
    let identity = IdentityReranker;
    let server = Pipeline {
        config: PipelineConfig {
            retrieve_n: (4 * max_k).min(catalog.inner.items.len()),
            rerank_n: max_k,
        },
        ranker: &scorer,
        reranker: &identity,
    };
    let sessions = aesim::world::log_sessions(
        &oracle.inner,
        &catalog.inner,
        &server,
        n_sessions,
        aesim::rng::derive_seed(seed, "probe-sessions"),
    )
    .map_err(err)?;
    let table = aesim::metrics::bias_probe(
        &oracle.inner,
        &catalog.inner,
        &sessions,
        max_k,
        ProbeMode::Expected,
        clip_floor,
        seed,
    )
    .map_err(err)?;
    Ok(table.p)
}

/// Load a propensity table saved by the bias-probe stage. Returns
/// (propensities, clip_floor, unreliable_positions).
#[pyfunction]
fn load_propensity(path: PathBuf) -> PyResult<(Vec<f64>, f64, Vec<usize>)> {
    let t = PropensityTable::load(&path).map_err(err)?;
    Ok((t.p, t.clip_floor, t.unreliable))
}

fn parse_loss(name: &str) -> PyResult<LossKind> {
    LossKind::ALL
        .into_iter()
        .find(|l| l.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown loss '{name}'")))
}

/// Run one pipeline stage against a TOML experiment config, exactly as the
/// command-line binary does. `stage` is one of: gen-world, train-user-gen,
/// train-feedback, prepare-data, bias-probe, train-ranker, evaluate,
/// report. `loss`/`ips` apply to train-ranker only.
#[pyfunction]
#[pyo3(signature = (config_path, stage, loss=None, ips=false, force=false))]
fn run_stage(
    config_path: PathBuf,
    stage: &str,
    loss: Option<String>,
    ips: bool,
    force: bool,
) -> PyResult<()> {
    let config = ExperimentConfig::load(Path::new(&config_path)).map_err(err)?;
    match stage {
        "gen-world" => commands::cmd_gen_world(&config, force),
        "train-user-gen" => commands::cmd_train_user_gen(&config, force),
        "train-feedback" => commands::cmd_train_feedback(&config, force),
        "prepare-data" => commands::cmd_prepare_data(&config, force),
        "bias-probe" => commands::cmd_bias_probe(&config, force),
        "train-ranker" => {
            let loss = loss.ok_or_else(|| PyValueError::new_err("train-ranker needs loss="))?;
            commands::cmd_train_ranker(&config, parse_loss(&loss)?, ips, force)
        }
        "evaluate" => commands::cmd_evaluate(&config, force),
        "report" => commands::cmd_report(&config),
        other => return Err(PyValueError::new_err(format!("unknown stage '{other}'"))),
    }
    .map_err(err)
}

/// Evaluation rows from a finished run: list of dicts with offline metrics
/// and both dynamic scores.
#[pyfunction]
fn load_eval_rows(py: Python<'_>, run_dir: PathBuf) -> PyResult<Vec<PyObject>> {
    let rows = commands::load_eval_rows(&commands::RunPaths::new(run_dir)).map_err(err)?;
    rows.into_iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new_bound(py);
            d.set_item("loss", r.loss)?;
            d.set_item("ips", r.ips)?;
            d.set_item("auc", r.auc)?;
            d.set_item("gauc", r.gauc)?;
            d.set_item("ndcg", r.ndcg)?;
            d.set_item("map", r.map)?;
            d.set_item("sim_score", r.sim_score)?;
            d.set_item("true_score", r.true_score)?;
            Ok(d.into())
        })
        .collect()
}

#[pymodule]
fn aesim_py(m: &Bound<PyModule>) -> PyResult<()> {
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyOracle>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(gauc, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_bias_probe, m)?)?;
    m.add_function(wrap_pyfunction!(load_propensity, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    m.add_function(wrap_pyfunction!(load_eval_rows, m)?)?;
    Ok(())
}
