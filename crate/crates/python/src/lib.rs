//! Python bindings: plant, channel, GP window, reachability and scenarios.

use std::sync::Arc;

use pyo3::exceptions::{PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gpmpc::channel::{self, Bump};
use gpmpc::dynamics;
use gpmpc::gp::Input;
use gpmpc::sim::{self, ScenarioConfig};
use gpmpc::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Csv(_) | Error::Singular | Error::Collision { .. } => PyRuntimeError::new_err(e.to_string()),
        Error::CacheTooSmall { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "VehicleState", from_py_object)]
#[derive(Clone, Copy)]
struct PyVehicleState(dynamics::VehicleState);

#[pymethods]
impl PyVehicleState {
    #[new]
    fn new(position: f64, velocity: f64) -> Self {
        Self(dynamics::VehicleState::new(position, velocity))
    }

    #[getter]
    fn position(&self) -> f64 {
        self.0.position
    }

    #[getter]
    fn velocity(&self) -> f64 {
        self.0.velocity
    }

    fn coast(&self, steps: usize, dt: f64) -> Self {
        Self(self.0.coast(steps, dt))
    }

    fn __repr__(&self) -> String {
        format!("VehicleState(position={}, velocity={})", self.0.position, self.0.velocity)
    }
}

#[pyclass(name = "Bounds", from_py_object)]
#[derive(Clone, Copy)]
struct PyBounds(dynamics::Bounds);

#[pymethods]
impl PyBounds {
    #[new]
    fn new(v_min: f64, v_max: f64, u_min: f64, u_max: f64, dt: f64) -> PyResult<Self> {
        dynamics::Bounds::new(v_min, v_max, u_min, u_max, dt).map(Self).map_err(py_err)
    }

    /// v in [3, 10], u in [-3, 2], dt = 1.
    #[staticmethod]
    fn scenario() -> Self {
        Self(dynamics::Bounds::scenario())
    }

    fn __repr__(&self) -> String {
        let b = self.0;
        format!("Bounds(v=[{}, {}], u=[{}, {}], dt={})", b.v_min, b.v_max, b.u_min, b.u_max, b.dt)
    }
}

#[pyfunction]
fn step(state: PyVehicleState, u: f64, bounds: PyBounds) -> PyResult<PyVehicleState> {
    dynamics::step(state.0, dynamics::ControlInput::new(u), &bounds.0).map(PyVehicleState).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (ego, lead, vehicle_length = 0.0))]
fn gap(ego: PyVehicleState, lead: PyVehicleState, vehicle_length: f64) -> f64 {
    dynamics::gap(&ego.0, &lead.0, vehicle_length)
}

/// Time to collision; `inf` when the ego is not closing in.
#[pyfunction]
#[pyo3(signature = (ego, lead, vehicle_length = 0.0))]
fn ttc(ego: PyVehicleState, lead: PyVehicleState, vehicle_length: f64) -> PyResult<f64> {
    dynamics::ttc(&ego.0, &lead.0, vehicle_length).map_err(py_err)
}

#[pyfunction]
fn effective_horizon(origin_time: i64, now: i64, horizon: usize) -> usize {
    channel::effective_horizon(origin_time, now, horizon)
}

/// Delay field with its seeded noise stream. `bumps` holds
/// `(center, amplitude, width)` triples.
#[pyclass(name = "Channel")]
struct PyChannel(channel::Channel);

#[pymethods]
impl PyChannel {
    #[new]
    #[pyo3(signature = (base_delay, bumps = Vec::new(), noise_std = 0.0, seed = 0))]
    fn new(base_delay: f64, bumps: Vec<(f64, f64, f64)>, noise_std: f64, seed: u64) -> PyResult<Self> {
        let field = channel::ChannelField {
            base_delay,
            bumps: bumps.into_iter().map(|(center, amplitude, width)| Bump { center, amplitude, width }).collect(),
            noise_std,
            rng_seed: seed,
        };
        channel::Channel::new(field).map(Self).map_err(py_err)
    }

    fn mean_delay(&self, ego: PyVehicleState, lead: PyVehicleState) -> f64 {
        self.0.field().mean_delay(&ego.0, &lead.0)
    }

    fn true_delay(&mut self, ego: PyVehicleState, lead: PyVehicleState) -> f64 {
        self.0.true_delay(&ego.0, &lead.0)
    }
}

#[pyclass(name = "Hyperparameters", from_py_object)]
#[derive(Clone)]
struct PyHyperparameters(gpmpc::Hyperparameters);

#[pymethods]
impl PyHyperparameters {
    #[new]
    fn new(signal_var: f64, length_scales: [f64; 4], noise_var: f64) -> PyResult<Self> {
        gpmpc::Hyperparameters::new(signal_var, length_scales, noise_var).map(Self).map_err(py_err)
    }

    #[getter]
    fn signal_var(&self) -> f64 {
        self.0.signal_var
    }

    #[getter]
    fn length_scales(&self) -> [f64; 4] {
        self.0.length_scales
    }

    #[getter]
    fn noise_var(&self) -> f64 {
        self.0.noise_var
    }
}

fn parse_prior(prior: &str, value: f64) -> PyResult<gpmpc::PriorMean> {
    match prior {
        "zero" => Ok(gpmpc::PriorMean::Zero),
        "constant" => Ok(gpmpc::PriorMean::Constant(value)),
        "window_mean" => Ok(gpmpc::PriorMean::WindowMean),
        other => Err(PyValueError::new_err(format!("unknown prior mean {other:?}"))),
    }
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Windowed kernel matrix with its recursively maintained inverse.
#[pyclass(name = "KernelCache")]
struct PyKernelCache(gpmpc::KernelCache);

#[pymethods]
impl PyKernelCache {
    #[new]
    #[pyo3(signature = (hyper, prior = "window_mean", prior_value = 0.0))]
    fn new(hyper: PyHyperparameters, prior: &str, prior_value: f64) -> PyResult<Self> {
        Ok(Self(gpmpc::KernelCache::new(hyper.0, parse_prior(prior, prior_value)?)))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    /// Returns False when the point is rejected as numerically redundant.
    fn append(&mut self, x: Input, target: f64, tag: i64, id: usize) -> PyResult<bool> {
        self.0.append_point(x, target, tag, id).map_err(py_err)
    }

    fn remove_first(&mut self) -> PyResult<()> {
        self.0.remove_first().map_err(py_err)
    }

    fn remove_at(&mut self, i: usize) -> PyResult<()> {
        self.0.remove_at(i).map_err(py_err)
    }

    /// Drops rows tagged at or before `stale_tag`, then appends `points`
    /// given as `(x, target, tag, id)`. Returns `(removed, appended, rejected)`.
    fn slide_window(&mut self, stale_tag: i64, points: Vec<(Input, f64, i64, usize)>) -> PyResult<(usize, usize, usize)> {
        let r = self.0.slide_window(stale_tag, points).map_err(py_err)?;
        Ok((r.removed, r.appended, r.rejected))
    }

    /// `(mean, variance)` at `x`.
    fn posterior(&self, x: Input) -> (f64, f64) {
        self.0.posterior(&x)
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        rows(self.0.matrix())
    }

    fn inverse(&self) -> Vec<Vec<f64>> {
        rows(self.0.inverse())
    }

    fn tags(&self) -> Vec<i64> {
        self.0.tags().to_vec()
    }

    /// `max_r Σ_c |(K̄ K̄⁻¹ − I)_rc|`.
    fn residual(&self) -> f64 {
        self.0.residual()
    }
}

/// Interval boxes `(pos_lo, pos_hi, vel_lo, vel_hi)` for steps `0..=horizon`.
#[pyfunction]
fn reach_n(x0: PyVehicleState, horizon: usize, bounds: PyBounds) -> Vec<(f64, f64, f64, f64)> {
    gpmpc::reach_n(&x0.0, horizon, &bounds.0).boxes.iter().map(|b| (b.pos_lo, b.pos_hi, b.vel_lo, b.vel_hi)).collect()
}

fn parse_config(config_json: &str) -> PyResult<ScenarioConfig> {
    let cfg: ScenarioConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// The built-in leader-follower scenario as a JSON string.
#[pyfunction]
fn reference_config() -> PyResult<String> {
    to_json(&ScenarioConfig::reference())
}

/// `(ego_pos, ego_vel, lead_pos, lead_vel, delay, step_tag)`
type Row = (f64, f64, f64, f64, f64, i64);

/// Training rows in CSV column order.
#[pyfunction]
fn generate_training_data(config_json: &str) -> PyResult<Vec<Row>> {
    let cfg = parse_config(config_json)?;
    let set = sim::generate_training_data(&cfg).map_err(py_err)?;
    Ok(set
        .samples
        .iter()
        .map(|s| {
            let x = s.input.to_array();
            (x[0], x[1], x[2], x[3], s.delay, s.step_tag)
        })
        .collect())
}

/// Runs the scenario (or the aware/baseline pair) and returns the summary
/// as a JSON string. The GIL is released while the loop runs.
#[pyfunction]
#[pyo3(signature = (config_json, paired = false))]
fn run_scenario(py: Python<'_>, config_json: &str, paired: bool) -> PyResult<String> {
    let cfg = parse_config(config_json)?;
    py.detach(|| -> PyResult<String> {
        let set = Arc::new(sim::generate_training_data(&cfg).map_err(py_err)?);
        if paired {
            let (a, b) = sim::run_paired(&cfg, set).map_err(py_err)?;
            to_json(&serde_json::json!({
                "aware": a.summary(&cfg),
                "baseline": b.summary(&cfg.baseline()),
            }))
        } else {
            let t = sim::run_scenario(&cfg, set).map_err(py_err)?;
            to_json(&t.summary(&cfg))
        }
    })
}

#[pymodule]
fn gpmpc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVehicleState>()?;
    m.add_class::<PyBounds>()?;
    m.add_class::<PyChannel>()?;
    m.add_class::<PyHyperparameters>()?;
    m.add_class::<PyKernelCache>()?;
    m.add_function(wrap_pyfunction!(step, m)?)?;
    m.add_function(wrap_pyfunction!(gap, m)?)?;
    m.add_function(wrap_pyfunction!(ttc, m)?)?;
    m.add_function(wrap_pyfunction!(effective_horizon, m)?)?;
    m.add_function(wrap_pyfunction!(reach_n, m)?)?;
    m.add_function(wrap_pyfunction!(reference_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate_training_data, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    Ok(())
}
