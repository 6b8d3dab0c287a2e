//! Python bindings. Structured values cross the boundary as plain dicts and
//! lists with the same field names as the JSON artifacts.

use archopt::arch_cost::{self, BlockVariantSpec, CostModel, ParentArch, Precision};
use archopt::block_library::{Activation, Catalog, FfnWeights, RmsNorm};
use archopt::ffn_fusion;
use archopt::linalg::Matrix;
use archopt::pipeline_planner::{self, ArchProfile, ClusterShape, MemoryRequest, SearchOptions};
use archopt::rl_curriculum::{self, CurriculumConfig, PassRateRecord, ReasoningMode};
use archopt::search::{self, ConstraintSet, PuzzleSolution, SearchError};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(archopt, InfeasibleError, PyException);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn search_err(e: SearchError) -> PyErr {
    match e {
        SearchError::Infeasible(_) => InfeasibleError::new_err(e.to_string()),
        other => value_err(other),
    }
}

/// Python object (dict, list, str of JSON) → Rust value via JSON.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if let Ok(s) = obj.extract::<String>() {
        s
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(value_err)
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn precision(name: &str) -> PyResult<Precision> {
    name.parse().map_err(value_err)
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "silu" => Ok(Activation::Silu),
        "tanh" => Ok(Activation::Tanh),
        other => Err(PyValueError::new_err(format!("unknown activation {other:?}"))),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Matrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() })
}

fn ffn_members(members: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>) -> PyResult<Vec<FfnWeights>> {
    members.into_iter().map(|(w1, w2)| Ok(FfnWeights { w1: matrix(w1)?, w2: matrix(w2)? })).collect()
}

#[pyfunction]
fn model_weight_bytes(total_params: u64, precision_name: &str) -> PyResult<u64> {
    Ok(arch_cost::model_weight_bytes(total_params, precision(precision_name)?))
}

#[pyfunction]
#[pyo3(signature = (kv_bytes_per_token, device_memory, weight_bytes, reserve_fraction = 0.0))]
fn max_cached_tokens(kv_bytes_per_token: u64, device_memory: u64, weight_bytes: u64, reserve_fraction: f64) -> PyResult<u64> {
    arch_cost::max_cached_tokens(kv_bytes_per_token, device_memory, weight_bytes, reserve_fraction).map_err(value_err)
}

/// Cost vector of one block variant. `cost_model` may be omitted for defaults.
#[pyfunction]
#[pyo3(signature = (arch, spec, precision_name = "BF16", cost_model = None))]
fn block_costs<'py>(
    py: Python<'py>,
    arch: &Bound<'py, PyAny>,
    spec: &Bound<'py, PyAny>,
    precision_name: &str,
    cost_model: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let arch: ParentArch = from_py(arch)?;
    let spec: BlockVariantSpec = from_py(spec)?;
    let cm: CostModel = cost_model.map(from_py).transpose()?.unwrap_or_default();
    let c = arch_cost::block_costs(&arch, &spec, precision(precision_name)?, &cm).map_err(value_err)?;
    to_py(py, &c)
}

#[pyfunction]
fn solve<'py>(py: Python<'py>, catalog: &Bound<'py, PyAny>, constraints: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let cat: Catalog = from_py(catalog)?;
    let c: ConstraintSet = from_py(constraints)?;
    to_py(py, &search::solve(&cat, &c).map_err(search_err)?)
}

#[pyfunction]
#[pyo3(signature = (catalog, constraints, cap = search::DEFAULT_BRUTE_FORCE_CAP))]
fn brute_force<'py>(
    py: Python<'py>,
    catalog: &Bound<'py, PyAny>,
    constraints: &Bound<'py, PyAny>,
    cap: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cat: Catalog = from_py(catalog)?;
    let c: ConstraintSet = from_py(constraints)?;
    to_py(py, &search::brute_force(&cat, &c, cap).map_err(search_err)?)
}

#[pyfunction]
fn pareto_frontier<'py>(
    py: Python<'py>,
    catalog: &Bound<'py, PyAny>,
    latency_grid: Vec<f64>,
    fixed: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let cat: Catalog = from_py(catalog)?;
    let c: ConstraintSet = from_py(fixed)?;
    to_py(py, &search::pareto_frontier(&cat, &latency_grid, &c).map_err(search_err)?)
}

/// Finds all fusable runs and applies them; returns the fused solution.
#[pyfunction]
fn fuse_solution<'py>(py: Python<'py>, solution: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let sol: PuzzleSolution = from_py(solution)?;
    let runs = ffn_fusion::find_fusable_runs(&sol);
    to_py(py, &ffn_fusion::apply_fusion(&sol, &runs).map_err(value_err)?)
}

/// Max relative deviation of the fused block from `x + Σ FFN_i(norm(x))`.
/// `members` is a list of `(w1, w2)` pairs given as nested lists.
#[pyfunction]
#[pyo3(signature = (members, inputs, activation_name = "silu"))]
fn fusion_residual(
    members: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    inputs: Vec<Vec<f64>>,
    activation_name: &str,
) -> PyResult<f64> {
    let ms = ffn_members(members)?;
    let first = ms.first().ok_or_else(|| PyValueError::new_err("no members"))?;
    let d = first.d_model();
    let run = ffn_fusion::FusableRun {
        start_layer: 0,
        length: ms.len(),
        member_params: ms.iter().map(|m| 2 * (m.d_model() * m.hidden()) as u64).collect(),
    };
    let fused = ffn_fusion::fuse_run(&run, &ms).map_err(value_err)?;
    Ok(ffn_fusion::equivalence_residual(&fused, &ms, &RmsNorm::ones(d), activation(activation_name)?, &inputs))
}

#[pyfunction]
#[pyo3(signature = (costs, pp, uniform_count = false))]
fn balance_stages<'py>(py: Python<'py>, costs: Vec<f64>, pp: usize, uniform_count: bool) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &pipeline_planner::balance_stages(&costs, pp, uniform_count).map_err(value_err)?)
}

#[pyfunction]
fn plan_memory<'py>(py: Python<'py>, request: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let req: MemoryRequest = from_py(request)?;
    to_py(py, &pipeline_planner::plan_memory(&req).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (profile, cluster, options = None))]
fn search_parallelism<'py>(
    py: Python<'py>,
    profile: &Bound<'py, PyAny>,
    cluster: &Bound<'py, PyAny>,
    options: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let profile: ArchProfile = from_py(profile)?;
    let cluster: ClusterShape = from_py(cluster)?;
    let opts: SearchOptions = options.map(from_py).transpose()?.unwrap_or_default();
    to_py(py, &pipeline_planner::search_parallelism(&profile, &cluster, &opts).map_err(value_err)?)
}

fn records(items: Vec<(String, u32, u32)>) -> PyResult<Vec<PassRateRecord>> {
    items.into_iter().map(|(id, k, n)| PassRateRecord::new(id, k, n).map_err(value_err)).collect()
}

/// Keeps `(prompt_id, successes, attempts)` triples whose pass rate is below the threshold.
#[pyfunction]
#[pyo3(signature = (records_in, threshold = 0.75))]
fn filter_prompts(records_in: Vec<(String, u32, u32)>, threshold: f64) -> PyResult<Vec<String>> {
    Ok(rl_curriculum::filter_prompts(&records(records_in)?, threshold).into_iter().map(|r| r.prompt_id).collect())
}

#[pyfunction]
fn gaussian_targets<'py>(
    py: Python<'py>,
    n_batches: usize,
    levels: Vec<f64>,
    start_level: f64,
    end_level: f64,
    sigma: f64,
) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &rl_curriculum::gaussian_targets(n_batches, &levels, start_level, end_level, sigma).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (records_in, config = None, seed = 0))]
fn build_curriculum<'py>(
    py: Python<'py>,
    records_in: Vec<(String, u32, u32)>,
    config: Option<&Bound<'py, PyAny>>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: CurriculumConfig = config.map(from_py).transpose()?.unwrap_or_default();
    to_py(py, &rl_curriculum::build_curriculum(&records(records_in)?, &cfg, seed).map_err(value_err)?)
}

#[pyfunction]
#[pyo3(signature = (rewards, epsilon = 1e-6))]
fn grpo_advantages(rewards: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    rl_curriculum::grpo_advantages(&rewards, epsilon).map_err(value_err)
}

/// Format reward of `response` under the mode selected by `system_prompt`.
#[pyfunction]
fn format_reward(response: &str, system_prompt: &str) -> PyResult<u8> {
    let mode = ReasoningMode::from_system_prompt(system_prompt).map_err(value_err)?;
    Ok(rl_curriculum::format_reward(response, mode))
}

#[pymodule]
#[pyo3(name = "archopt")]
fn archopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("REASONING_ON", rl_curriculum::REASONING_ON)?;
    m.add("REASONING_OFF", rl_curriculum::REASONING_OFF)?;
    m.add_function(wrap_pyfunction!(model_weight_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(max_cached_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(block_costs, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_solution, m)?)?;
    m.add_function(wrap_pyfunction!(fusion_residual, m)?)?;
    m.add_function(wrap_pyfunction!(balance_stages, m)?)?;
    m.add_function(wrap_pyfunction!(plan_memory, m)?)?;
    m.add_function(wrap_pyfunction!(search_parallelism, m)?)?;
    m.add_function(wrap_pyfunction!(filter_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_targets, m)?)?;
    m.add_function(wrap_pyfunction!(build_curriculum, m)?)?;
    m.add_function(wrap_pyfunction!(grpo_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(format_reward, m)?)?;
    Ok(())
}
