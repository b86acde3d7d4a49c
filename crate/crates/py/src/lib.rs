//! Python bindings: grids and the oracle, small models, the losses, corpora,
//! config resolution, the self-check suites and the two experiments.

use std::path::Path;

use alignlab::checks;
use alignlab::diff::{Graph, PolicyModel};
use alignlab::frozen_lake::{
    load_map, parse_grid, run_grid_experiment, runs_to_csv, shipped_map, value_iteration, GridSpec, OraclePolicy,
    OrderingVerdict, RewardSpec,
};
use alignlab::losses::{
    bellman_residual, dpo_loss, ift_loss, orpo_loss, relation_propagation_weights, sft_loss, Demo, LossConfig,
    LossReport,
};
use alignlab::mdp::TokenSequence;
use alignlab::reporting::{load_config as resolve, ResolvedConfig};
use alignlab::toy_lm::{self, run_toy_experiment, toy_runs_to_csv, CorpusSpec, Task, ToyVerdict};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: alignlab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config(text: &str, overrides: &[String], prefer: Option<&str>) -> PyResult<ResolvedConfig> {
    resolve(text, overrides, prefer).map_err(err)
}

fn loss_config(overrides: &[String]) -> PyResult<LossConfig> {
    Ok(config("", overrides, Some("loss"))?.loss)
}

fn demo(tokens: Vec<usize>, prompt_len: usize) -> PyResult<Demo> {
    Demo::from_tokens(&TokenSequence::new(tokens, prompt_len).map_err(err)?).map_err(err)
}

#[pyclass(name = "Grid", module = "alignlab_py", frozen)]
struct PyGrid(GridSpec);

#[pymethods]
impl PyGrid {
    fn rows(&self) -> usize {
        self.0.rows()
    }

    fn cols(&self) -> usize {
        self.0.cols()
    }

    fn cell_count(&self) -> usize {
        self.0.cell_count()
    }

    /// Cells of a BFS shortest path from start to gift, if any.
    fn shortest_path(&self) -> Option<Vec<usize>> {
        self.0.shortest_path()
    }

    fn to_ascii(&self) -> String {
        self.0.to_ascii()
    }

    fn __repr__(&self) -> String {
        format!("Grid({}x{})", self.0.rows(), self.0.cols())
    }
}

#[pyfunction(name = "parse_grid")]
fn py_parse_grid(text: &str) -> PyResult<PyGrid> {
    parse_grid(text).map(PyGrid).map_err(err)
}

#[pyfunction(name = "shipped_map")]
fn py_shipped_map() -> PyGrid {
    PyGrid(shipped_map())
}

#[pyclass(name = "Oracle", module = "alignlab_py", frozen)]
struct PyOracle(OraclePolicy);

#[pymethods]
impl PyOracle {
    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values.clone()
    }

    #[getter]
    fn sweeps(&self) -> usize {
        self.0.sweeps
    }

    fn row(&self, cell: usize) -> PyResult<Vec<f64>> {
        self.0.row(cell).map(<[f64]>::to_vec).map_err(err)
    }

    /// Greedy action as one of `U`, `D`, `L`, `R`.
    fn greedy_action(&self, cell: usize) -> PyResult<char> {
        self.0.greedy_action(cell).map(|a| a.letter()).map_err(err)
    }

    fn fixed_point_residual(&self, grid: &PyGrid) -> f64 {
        self.0.fixed_point_residual(&grid.0)
    }
}

#[pyfunction(name = "value_iteration")]
#[pyo3(signature = (grid, discount = 0.9))]
fn py_value_iteration(grid: &PyGrid, discount: f64) -> PyResult<PyOracle> {
    value_iteration(&grid.0, discount, RewardSpec::default()).map(PyOracle).map_err(err)
}

#[pyclass(name = "Model", module = "alignlab_py", frozen)]
struct PyModel(PolicyModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn tiny_decoder(vocab: usize, dim: usize, hidden: usize, max_len: usize, seed: u64) -> PyResult<Self> {
        PolicyModel::tiny_decoder(vocab, dim, hidden, max_len, seed).map(Self).map_err(err)
    }

    #[staticmethod]
    fn grid_mlp(cells: usize, hidden: usize, actions: usize, seed: u64) -> PyResult<Self> {
        PolicyModel::grid_mlp(cells, hidden, actions, seed).map(Self).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.0.num_params()
    }

    /// Next-token distribution after `inputs`.
    fn next_distribution(&self, inputs: Vec<usize>) -> PyResult<Vec<f64>> {
        self.0.next_distribution(&inputs).map_err(err)
    }
}

#[pyclass(name = "LossResult", module = "alignlab_py", frozen, get_all)]
struct PyLossResult {
    token_losses: Vec<f64>,
    weights: Vec<f64>,
    total: f64,
    greedy_tokens: Vec<usize>,
    corollary_failures: usize,
    margin: Option<f64>,
    /// `None` for the pairwise losses.
    bellman_residual: Option<Vec<f64>>,
}

#[pymethods]
impl PyLossResult {
    fn __repr__(&self) -> String {
        format!("LossResult(total={}, positions={})", self.total, self.token_losses.len())
    }
}

impl From<LossReport> for PyLossResult {
    fn from(r: LossReport) -> Self {
        Self {
            bellman_residual: bellman_residual(&r).ok(),
            token_losses: r.token_losses,
            weights: r.weights,
            total: r.total_value,
            greedy_tokens: r.fused_greedy_tokens,
            corollary_failures: r.diagnostics.corollary_failures,
            margin: r.diagnostics.margin,
        }
    }
}

/// Overrides name `[loss]` keys, e.g. `["lambda=0", "propagation=off"]`.
#[pyfunction(name = "sft_loss")]
#[pyo3(signature = (model, tokens, prompt_len, overrides = vec![]))]
fn py_sft_loss(model: &PyModel, tokens: Vec<usize>, prompt_len: usize, overrides: Vec<String>) -> PyResult<PyLossResult> {
    let cfg = loss_config(&overrides)?;
    let d = demo(tokens, prompt_len)?;
    sft_loss(&mut Graph::new(), &model.0, &d, &cfg).map(Into::into).map_err(err)
}

#[pyfunction(name = "ift_loss")]
#[pyo3(signature = (model, tokens, prompt_len, overrides = vec![]))]
fn py_ift_loss(model: &PyModel, tokens: Vec<usize>, prompt_len: usize, overrides: Vec<String>) -> PyResult<PyLossResult> {
    let cfg = loss_config(&overrides)?;
    let d = demo(tokens, prompt_len)?;
    ift_loss(&mut Graph::new(), &model.0, &d, &cfg).map(Into::into).map_err(err)
}

#[pyfunction(name = "dpo_loss")]
#[pyo3(signature = (model, reference, chosen, rejected, prompt_len, overrides = vec![]))]
fn py_dpo_loss(
    model: &PyModel,
    reference: &PyModel,
    chosen: Vec<usize>,
    rejected: Vec<usize>,
    prompt_len: usize,
    overrides: Vec<String>,
) -> PyResult<PyLossResult> {
    let cfg = loss_config(&overrides)?;
    let (pos, neg) = (demo(chosen, prompt_len)?, demo(rejected, prompt_len)?);
    dpo_loss(&mut Graph::new(), &model.0, Some(&reference.0), &pos, &neg, &cfg).map(Into::into).map_err(err)
}

#[pyfunction(name = "orpo_loss")]
#[pyo3(signature = (model, chosen, rejected, prompt_len, overrides = vec![]))]
fn py_orpo_loss(
    model: &PyModel,
    chosen: Vec<usize>,
    rejected: Vec<usize>,
    prompt_len: usize,
    overrides: Vec<String>,
) -> PyResult<PyLossResult> {
    let c = config("", &overrides, Some("loss"))?;
    let cfg = LossConfig { beta: c.grid.orpo_beta, ..c.loss };
    let (pos, neg) = (demo(chosen, prompt_len)?, demo(rejected, prompt_len)?);
    orpo_loss(&mut Graph::new(), &model.0, &pos, &neg, &cfg).map(Into::into).map_err(err)
}

#[pyfunction(name = "propagation_weights")]
#[pyo3(signature = (losses, alpha = 0.95, mode = "eq20_suffix_sum"))]
fn py_propagation_weights(losses: Vec<f64>, alpha: f64, mode: &str) -> PyResult<Vec<f64>> {
    let cfg = loss_config(&[format!("alpha={alpha}"), format!("propagation={mode}")])?;
    relation_propagation_weights(&losses, alpha, cfg.propagation).map_err(err)
}

type Split = Vec<(Vec<usize>, usize)>;

/// `(train, eval)`, each a list of `(tokens, prompt_len)`.
#[pyfunction(name = "generate_corpus")]
#[pyo3(signature = (task = "modular_chain", vocab_size = 22, min_len = 8, max_len = 8, train_size = 300, eval_size = 50, seed = 1))]
fn py_generate_corpus(
    task: &str,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    train_size: usize,
    eval_size: usize,
    seed: u64,
) -> PyResult<(Split, Split)> {
    let task: Task = task.parse().map_err(err)?;
    let spec = CorpusSpec { task, vocab_size, min_len, max_len, train_size, eval_size, seed };
    let data = toy_lm::generate_corpus(&spec).map_err(err)?;
    let split = |s: &[TokenSequence]| s.iter().map(|t| (t.tokens().to_vec(), t.prompt_len())).collect();
    Ok((split(&data.train), split(&data.eval)))
}

/// `(echo, sha256)` of the resolved configuration.
#[pyfunction(name = "load_config")]
#[pyo3(signature = (text = "", overrides = vec![]))]
fn py_load_config(text: &str, overrides: Vec<String>) -> PyResult<(String, String)> {
    let c = config(text, &overrides, None)?;
    Ok((c.echo(), c.hash()))
}

/// `(loss, model, params, worst relative error, passed)` per case.
#[pyfunction(name = "gradient_suite")]
#[pyo3(signature = (fixtures = 3, seed = 1))]
fn py_gradient_suite(fixtures: usize, seed: u64) -> PyResult<Vec<(String, String, usize, f64, bool)>> {
    let cases = checks::gradient_suite(fixtures, seed).map_err(err)?;
    Ok(cases.into_iter().map(|c| (c.loss.into(), c.model.into(), c.params, c.worst, c.passed)).collect())
}

/// `(name, cases, worst, tolerance, passed)` per suite.
#[pyfunction(name = "property_suites")]
#[pyo3(signature = (cases = 100, seed = 1))]
fn py_property_suites(cases: usize, seed: u64) -> PyResult<Vec<(String, usize, f64, f64, bool)>> {
    let suites = checks::property_suites(cases, seed).map_err(err)?;
    Ok(suites.into_iter().map(|s| (s.name.into(), s.cases, s.worst, s.tolerance, s.passed())).collect())
}

/// `(csv, verdict line, passed)`.
#[pyfunction(name = "run_frozenlake")]
#[pyo3(signature = (text = "", overrides = vec![]))]
fn py_run_frozenlake(py: Python<'_>, text: &str, overrides: Vec<String>) -> PyResult<(String, String, bool)> {
    let cfg = config(text, &overrides, Some("frozenlake"))?;
    py.detach(|| {
        let spec = if cfg.map == "shipped" { shipped_map() } else { load_map(Path::new(&cfg.map))? };
        let oracle = value_iteration(&spec, cfg.discount, RewardSpec::default())?;
        let runs = run_grid_experiment(&spec, &oracle, &cfg.grid_methods, &cfg.seed_list(), &cfg.grid)?;
        let v = OrderingVerdict::from_runs(&runs);
        Ok((runs_to_csv(&runs), v.line(), v.passed()))
    })
    .map_err(err)
}

/// `(csv, verdict line, passed)`.
#[pyfunction(name = "run_toylm")]
#[pyo3(signature = (text = "", overrides = vec![]))]
fn py_run_toylm(py: Python<'_>, text: &str, overrides: Vec<String>) -> PyResult<(String, String, bool)> {
    let cfg = config(text, &overrides, Some("toylm"))?;
    py.detach(|| {
        let runs = run_toy_experiment(&cfg.toy, &cfg.toy_methods, &cfg.seed_list())?;
        let v = ToyVerdict::from_runs(&runs);
        Ok((toy_runs_to_csv(&runs), v.line(), v.passed()))
    })
    .map_err(err)
}

#[pymodule]
fn alignlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLossResult>()?;
    m.add_function(wrap_pyfunction!(py_parse_grid, m)?)?;
    m.add_function(wrap_pyfunction!(py_shipped_map, m)?)?;
    m.add_function(wrap_pyfunction!(py_value_iteration, m)?)?;
    m.add_function(wrap_pyfunction!(py_sft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_ift_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_dpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_orpo_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_propagation_weights, m)?)?;
    m.add_function(wrap_pyfunction!(py_generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(py_load_config, m)?)?;
    m.add_function(wrap_pyfunction!(py_gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(py_property_suites, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_frozenlake, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_toylm, m)?)?;
    Ok(())
}
