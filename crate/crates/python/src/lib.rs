//! Python bindings. Cohorts, reports and trees are opaque handles; bulk data
//! crosses the boundary as lists of floats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use forestlens::dataset::{self, ChangeBaseline, FEATURE_NAMES};
use forestlens::forest::{fit_forest as core_fit_forest, ForestParams};
use forestlens::metrics::{self, ClassCounts};
use forestlens::pipeline::{self, FeatureSet, SweepConfig};
use forestlens::synth::{self, CohortSpec};
use forestlens::tree::{self, ExportFormat, FeatureMatrix, Mtry, Target, TrainingData, TreeParams};
use forestlens::{Error, Label};

fn err(e: Error) -> PyErr {
    match e {
        Error::InvalidParam(m) | Error::InfeasibleSpec(m) => PyValueError::new_err(m),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn labels_of(values: &[bool]) -> Vec<Label> {
    values
        .iter()
        .map(|&h| if h { Label::High } else { Label::Low })
        .collect()
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FeatureMatrix> {
    FeatureMatrix::from_rows(rows.iter().map(Vec::as_slice)).map_err(err)
}

#[pyclass(name = "Cohort", module = "forestlens", frozen)]
struct PyCohort {
    inner: dataset::Cohort,
}

#[pymethods]
impl PyCohort {
    /// Loads raw logs from a directory, or a cohort CSV file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let p = std::path::Path::new(path);
        let (inner, _) = forestlens::cli::load_cohort(p, &dataset::AssemblyConfig::default())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[getter]
    fn n_students(&self) -> usize {
        self.inner.students().len()
    }

    #[getter]
    fn n_tutors(&self) -> usize {
        self.inner.tutors().len()
    }

    #[getter]
    fn n_evaluation_periods(&self) -> usize {
        self.inner.len()
    }

    fn outcomes(&self) -> Vec<f64> {
        self.inner.outcomes()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        self.inner
            .evaluation_periods()
            .iter()
            .map(|ep| ep.features.to_vec())
            .collect()
    }

    /// Round-to-round score changes; `first_round` is "zero" or "drop".
    #[pyo3(signature = (first_round = "zero"))]
    fn score_changes(&self, first_round: &str) -> PyResult<Self> {
        let baseline = match first_round {
            "zero" => ChangeBaseline::Zero,
            "drop" => ChangeBaseline::Drop,
            other => return Err(PyValueError::new_err(format!("unknown first_round `{other}`"))),
        };
        Ok(Self {
            inner: dataset::compute_score_changes(&self.inner, baseline),
        })
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        self.inner.write_csv(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Tree", module = "forestlens", frozen)]
struct PyTree {
    inner: tree::TreeNode,
}

#[pymethods]
impl PyTree {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: tree::TreeNode::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        tree::export_tree(&self.inner, &FEATURE_NAMES, ExportFormat::Json)
    }

    fn to_dot(&self) -> String {
        tree::export_tree(&self.inner, &FEATURE_NAMES, ExportFormat::Dot)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn n_leaves(&self) -> usize {
        self.inner.n_leaves()
    }

    /// Name of the root split feature, or None for a single leaf.
    #[getter]
    fn root_feature(&self) -> Option<&'static str> {
        self.inner.root_feature().and_then(|i| FEATURE_NAMES.get(i).copied())
    }

    fn predict_proba(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        rows.iter()
            .map(|r| self.inner.predict_proba(r).map_err(err))
            .collect()
    }
}

#[pyclass(name = "Report", module = "forestlens", frozen)]
struct PyReport {
    inner: pipeline::PipelineReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn mean_test_auc(&self) -> f64 {
        self.inner.mean_test_auc
    }

    #[getter]
    fn whole_dataset_auc(&self) -> f64 {
        self.inner.whole_dataset_auc
    }

    #[getter]
    fn fold_sse(&self) -> f64 {
        self.inner.fold_sse
    }

    #[getter]
    fn final_threshold(&self) -> f64 {
        self.inner.final_model.provenance.threshold
    }

    /// Final tree re-annotated on the whole dataset.
    fn tree(&self) -> PyTree {
        PyTree {
            inner: self.inner.whole_dataset_tree.clone(),
        }
    }

    /// (DT, RFC, RFR, extracted DT) mean test AUCs, if baselines ran.
    fn baselines(&self) -> Option<(f64, f64, f64, f64)> {
        self.inner
            .baselines
            .as_ref()
            .map(|b| (b.dt, b.rfc, b.rfr, b.extracted_dt))
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }
}

#[pyfunction]
#[pyo3(signature = (seed = 0, noise_sd = 4.0, n_tutors = 46))]
fn generate_cohort(seed: u64, noise_sd: f64, n_tutors: usize) -> PyResult<PyCohort> {
    let spec = CohortSpec {
        seed,
        noise_sd,
        n_tutors,
        ..CohortSpec::default()
    };
    Ok(PyCohort {
        inner: synth::generate_cohort(&spec).map_err(err)?.cohort,
    })
}

/// Default planted rule as a depth-2 tree.
#[pyfunction]
fn planted_tree() -> PyTree {
    PyTree {
        inner: synth::PlantedRule::default().as_tree(),
    }
}

#[pyfunction]
fn structure_recovery_score(tree: &PyTree) -> f64 {
    synth::structure_recovery_score(&tree.inner, &synth::PlantedRule::default())
}

#[pyfunction]
#[pyo3(signature = (cohort, thresholds = None, n_seeds = 200, n_trees = 10, max_depth = 2, features = "combined", seed = 0, baselines = true, change = false))]
#[allow(clippy::too_many_arguments)]
fn run_sweep(
    py: Python<'_>,
    cohort: &PyCohort,
    thresholds: Option<Vec<f64>>,
    n_seeds: usize,
    n_trees: usize,
    max_depth: usize,
    features: &str,
    seed: u64,
    baselines: bool,
    change: bool,
) -> PyResult<PyReport> {
    let mut cfg = if change {
        SweepConfig::for_changes()
    } else {
        SweepConfig::default()
    };
    if let Some(t) = thresholds {
        cfg.thresholds = t;
    }
    cfg.n_seeds = n_seeds;
    cfg.forest_params.n_trees = n_trees;
    cfg.forest_params.tree_params.max_depth = max_depth;
    cfg.feature_set = features.parse::<FeatureSet>().map_err(err)?;
    cfg.master_seed = seed;
    cfg.baselines = baselines;
    let cohort = &cohort.inner;
    let report = py
        .detach(|| {
            if change {
                pipeline::run_change_pipeline(cohort, &cfg, ChangeBaseline::Zero)
            } else {
                pipeline::run_sweep(cohort, &cfg)
            }
        })
        .map_err(err)?;
    Ok(PyReport { inner: report })
}

/// CART classifier on boolean labels; `raw` annotates the leaves.
#[pyfunction]
#[pyo3(signature = (x, labels, raw, max_depth = 2, min_leaf = 5, seed = 0))]
fn fit_tree(
    x: Vec<Vec<f64>>,
    labels: Vec<bool>,
    raw: Vec<f64>,
    max_depth: usize,
    min_leaf: usize,
    seed: u64,
) -> PyResult<PyTree> {
    let x = matrix(x)?;
    let labels = labels_of(&labels);
    let data = TrainingData::new(&x, Target::Labels(&labels), &raw).map_err(err)?;
    let params = TreeParams {
        max_depth,
        min_leaf,
        mtry: Mtry::All,
        ..TreeParams::default()
    };
    let mut rng = forestlens::rng::stream(seed, 0);
    Ok(PyTree {
        inner: tree::fit_tree(&data, &params, &mut rng).map_err(err)?,
    })
}

/// Fits a bagged forest and returns its member trees.
#[pyfunction]
#[pyo3(signature = (x, labels, raw, n_trees = 10, max_depth = 2, seed = 0))]
fn fit_forest(
    x: Vec<Vec<f64>>,
    labels: Vec<bool>,
    raw: Vec<f64>,
    n_trees: usize,
    max_depth: usize,
    seed: u64,
) -> PyResult<Vec<PyTree>> {
    let x = matrix(x)?;
    let labels = labels_of(&labels);
    let data = TrainingData::new(&x, Target::Labels(&labels), &raw).map_err(err)?;
    let mut params = ForestParams {
        n_trees,
        seed,
        ..ForestParams::default()
    };
    params.tree_params.max_depth = max_depth;
    let forest = core_fit_forest(&data, &params).map_err(err)?;
    Ok(forest
        .into_members()
        .into_iter()
        .map(|inner| PyTree { inner })
        .collect())
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels_of(&labels)).map_err(err)
}

#[pyfunction]
fn gini(n_high: u64, n_low: u64) -> PyResult<f64> {
    metrics::gini(ClassCounts::new(n_high, n_low)).map_err(err)
}

#[pyfunction]
fn r2_to_auc(r2: f64) -> PyResult<f64> {
    metrics::r2_to_auc(r2).map_err(err)
}

#[pymodule(name = "forestlens")]
fn forestlens_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCohort>()?;
    m.add_class::<PyTree>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(planted_tree, m)?)?;
    m.add_function(wrap_pyfunction!(structure_recovery_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tree, m)?)?;
    m.add_function(wrap_pyfunction!(fit_forest, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(gini, m)?)?;
    m.add_function(wrap_pyfunction!(r2_to_auc, m)?)?;
    m.add("FEATURE_NAMES", FEATURE_NAMES.to_vec())?;
    Ok(())
}
