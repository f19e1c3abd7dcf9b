//! Scenario orchestration: training data, closed-loop runs and traces.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{midpoint, Bump, Channel, ChannelField, Step};
use crate::dynamics::{Bounds, VehicleState};
use crate::error::{Error, Result};
use crate::gp::{AggregatedInput, HyperGrid, Hyperparameters, TrainingSample, TrainingSet};
use crate::mpc::receding::{ClosedLoop, ControllerConfig, GpConfig, PlanMode, StepRecord};
use crate::mpc::{MpcWeights, SolverOptions};
use crate::reachable::LeadTolerance;
use crate::recinv::PriorMean;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    pub initial_position: f64,
    /// Constant cruising velocity.
    pub velocity: f64,
}

impl LeadProfile {
    pub fn state_at(&self, step: Step, dt: f64) -> VehicleState {
        VehicleState::new(self.initial_position + self.velocity * dt * step as f64, self.velocity)
    }
}

/// How synthetic training rows are spread around the nominal lead trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSampling {
    /// Ego rows are placed `gap_min..gap_max` behind the sampled lead position.
    pub gap_min: f64,
    pub gap_max: f64,
    /// Uniform jitter of the lead part around its nominal state.
    pub lead_position_jitter: f64,
    pub lead_velocity_jitter: f64,
}

impl Default for DataSampling {
    fn default() -> Self {
        Self { gap_min: 1.0, gap_max: 60.0, lead_position_jitter: 4.0, lead_velocity_jitter: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub channel: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub grid: HyperGrid,
    /// Rows used for the marginal likelihood; larger sets are subsampled.
    #[serde(default = "default_fit_points")]
    pub max_points: usize,
}

fn default_fit_points() -> usize {
    400
}

fn default_max_steps() -> usize {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Episode ends once the ego passes this position.
    pub road_length: f64,
    pub lead: LeadProfile,
    pub ego: VehicleState,
    pub field: ChannelField,
    pub controller: ControllerConfig,
    /// ν: average training rows per step.
    pub samples_per_step: usize,
    /// r: total training rows.
    pub training_samples: usize,
    #[serde(default)]
    pub data: DataSampling,
    pub seeds: Seeds,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub fit: Option<FitConfig>,
}

impl ScenarioConfig {
    /// Constant-velocity lead at 5 m/s, N = 10, dt = 1 s, one delay bump.
    pub fn reference() -> Self {
        let bounds = Bounds::scenario();
        Self {
            road_length: 600.0,
            lead: LeadProfile { initial_position: 12.0, velocity: 5.0 },
            ego: VehicleState::new(0.0, 5.0),
            field: ChannelField {
                base_delay: 0.1,
                bumps: vec![Bump { center: 200.0, amplitude: 2.0, width: 20.0 }],
                noise_std: 0.05,
                rng_seed: 0,
            },
            controller: ControllerConfig {
                horizon: 10,
                bounds,
                weights: MpcWeights {
                    lead: [0.05, 0.05],
                    reference: [0.0, 0.5],
                    effort: 0.1,
                    terminal: None,
                    channel: 10.0,
                },
                gap_ref: 10.0,
                phi: 2.0,
                min_gap: 2.0,
                vehicle_length: 0.0,
                v_ref: 5.0,
                conservative_speed_factor: 0.8,
                lead_tol: LeadTolerance::default(),
                solver: SolverOptions::default(),
                warm_start: true,
                refresh_every: 100,
                gp: GpConfig {
                    hyper: Hyperparameters {
                        signal_var: 1.0,
                        length_scales: [15.0, 5.0, 15.0, 5.0],
                        noise_var: 0.0025,
                    },
                    prior_mean: PriorMean::WindowMean,
                },
            },
            samples_per_step: 30,
            training_samples: 3900,
            data: DataSampling::default(),
            seeds: Seeds { data: 1, channel: 2 },
            max_steps: 120,
            fit: Some(FitConfig {
                grid: HyperGrid {
                    signal_vars: vec![0.25, 1.0, 4.0],
                    position_scales: vec![5.0, 10.0, 20.0, 40.0],
                    velocity_scales: vec![2.0, 5.0, 10.0],
                    noise_vars: vec![1e-3, 2.5e-3, 1e-2],
                },
                max_points: 400,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        self.field.validate()?;
        let b = &self.controller.bounds;
        let need = self.samples_per_step * (self.controller.horizon + 1);
        if self.samples_per_step == 0 {
            return Err(Error::Config("samples_per_step (nu) must be >= 1".into()));
        }
        if self.training_samples < need {
            return Err(Error::Config(format!(
                "training_samples (r = {}) must be >= samples_per_step * (horizon + 1) = {}",
                self.training_samples, need
            )));
        }
        if !self.ego.is_finite() || self.ego.velocity < b.v_min || self.ego.velocity > b.v_max {
            return Err(Error::Config(format!("ego initial velocity {} outside bounds", self.ego.velocity)));
        }
        if !(self.lead.velocity.is_finite() && self.lead.velocity >= 0.0 && self.lead.initial_position.is_finite()) {
            return Err(Error::Config("lead profile must be finite with velocity >= 0".into()));
        }
        if self.lead.initial_position - self.ego.position <= self.controller.min_gap + self.controller.vehicle_length {
            return Err(Error::Config("initial gap must exceed min_gap".into()));
        }
        if !(self.road_length > self.ego.position) {
            return Err(Error::Config(format!("road_length {} does not extend past the ego", self.road_length)));
        }
        let d = &self.data;
        if !(d.gap_min.is_finite() && d.gap_max > d.gap_min && d.gap_min >= 0.0) {
            return Err(Error::Config(format!("degenerate sampling gap range [{}, {}]", d.gap_min, d.gap_max)));
        }
        let tol = &self.controller.lead_tol;
        if !(d.lead_position_jitter >= 0.0 && d.lead_velocity_jitter >= 0.0)
            || d.lead_position_jitter > tol.position
            || d.lead_velocity_jitter > tol.velocity
        {
            return Err(Error::Config("lead jitter must be within the lead tolerance".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        if let Some(fit) = &self.fit {
            if fit.max_points == 0 || fit.grid.candidates().is_empty() {
                return Err(Error::Config("fit grid must be non-empty with max_points >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Channel used by closed-loop runs, seeded from `seeds.channel`.
    pub fn run_channel(&self) -> Result<Channel> {
        Channel::new(ChannelField { rng_seed: self.seeds.channel, ..self.field.clone() })
    }

    /// Same scenario with the channel term switched off.
    pub fn baseline(&self) -> Self {
        let mut cfg = self.clone();
        cfg.controller.weights.channel = 0.0;
        cfg
    }

    /// Number of distinct step tags in generated data.
    pub fn tagged_steps(&self) -> usize {
        self.training_samples / self.samples_per_step
    }

    /// Whether a pair midpoint lies within two widths of a bump center.
    pub fn in_degraded_region(&self, mid: f64) -> bool {
        self.field.bumps.iter().any(|b| (mid - b.center).abs() <= 2.0 * b.width)
    }

    fn end_position(&self) -> f64 {
        self.field.bumps.iter().map(|b| b.center + 3.0 * b.width).fold(self.road_length, f64::min)
    }
}

/// Draws `r` rows: a tag `s` uniform over the tagged steps, the lead near
/// its nominal state at `s`, the ego uniformly behind it, and a noisy delay
/// label from the field. Deterministic under `seeds.data`.
pub fn generate_training_data(cfg: &ScenarioConfig) -> Result<TrainingSet> {
    cfg.validate()?;
    let dt = cfg.controller.bounds.dt;
    let b = &cfg.controller.bounds;
    let d = &cfg.data;
    let steps = cfg.tagged_steps() as Step;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.data);
    let mut channel = Channel::new(ChannelField { rng_seed: cfg.seeds.data.wrapping_add(1), ..cfg.field.clone() })?;
    let jitter = |rng: &mut ChaCha8Rng, half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };

    let mut samples = Vec::with_capacity(cfg.training_samples);
    for _ in 0..cfg.training_samples {
        let tag = rng.random_range(0..steps);
        let nominal = cfg.lead.state_at(tag, dt);
        let lead = VehicleState::new(
            nominal.position + jitter(&mut rng, d.lead_position_jitter),
            (nominal.velocity + jitter(&mut rng, d.lead_velocity_jitter)).max(0.0),
        );
        let ego = VehicleState::new(
            lead.position - rng.random_range(d.gap_min..=d.gap_max),
            rng.random_range(b.v_min..=b.v_max),
        );
        let delay = channel.true_delay(&ego, &lead);
        samples.push(TrainingSample { input: AggregatedInput::new(ego, lead), delay, step_tag: tag });
    }
    TrainingSet::new(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    /// Reached the end of the road or the step limit.
    Completed { steps: usize },
    Collision { step: Step, gap: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioTrace {
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
    pub lambda: f64,
}

pub const TRACE_HEADER: [&str; 24] = [
    "time",
    "ego_pos",
    "ego_vel",
    "lead_pos",
    "lead_vel",
    "control",
    "gap",
    "n_eff",
    "packet_origin",
    "mode",
    "predicted_delay",
    "realized_delay",
    "cost_tracking",
    "cost_reference",
    "cost_effort",
    "cost_terminal",
    "cost_channel",
    "cost_total",
    "iterations",
    "converged",
    "infeasible",
    "window_size",
    "window_rebuilt",
    "slide_seconds",
];

impl ScenarioTrace {
    pub fn collided(&self) -> bool {
        matches!(self.outcome, Outcome::Collision { .. })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(TRACE_HEADER)?;
        for r in &self.records {
            let mode = match r.mode {
                PlanMode::Packet => "packet",
                PlanMode::Conservative => "conservative",
            };
            out.write_record([
                r.time.to_string(),
                r.ego.position.to_string(),
                r.ego.velocity.to_string(),
                r.lead.position.to_string(),
                r.lead.velocity.to_string(),
                r.control.to_string(),
                r.gap.to_string(),
                r.n_eff.to_string(),
                r.packet_origin.map(|o| o.to_string()).unwrap_or_default(),
                mode.to_string(),
                r.predicted_delay.to_string(),
                r.realized_delay.to_string(),
                r.cost.tracking.to_string(),
                r.cost.reference.to_string(),
                r.cost.effort.to_string(),
                r.cost.terminal.to_string(),
                r.cost.channel.to_string(),
                r.cost.total().to_string(),
                r.iterations.to_string(),
                r.converged.to_string(),
                r.infeasible.to_string(),
                r.window_size.to_string(),
                r.window_rebuilt.to_string(),
                r.slide_seconds.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn summary(&self, cfg: &ScenarioConfig) -> ScenarioSummary {
        let recs = &self.records;
        let fold = |f: fn(&StepRecord) -> f64, init: f64, pick: fn(f64, f64) -> f64| {
            recs.iter().map(f).fold(init, pick)
        };
        let delay_cost: f64 = recs.iter().map(|r| r.realized_delay * r.realized_delay).sum();
        let region: Vec<f64> =
            recs.iter().filter(|r| cfg.in_degraded_region(midpoint(&r.ego, &r.lead))).map(|r| r.gap).collect();
        ScenarioSummary {
            steps: recs.len(),
            outcome: self.outcome.clone(),
            lambda: self.lambda,
            min_gap: fold(|r| r.gap, f64::INFINITY, f64::min),
            min_velocity: fold(|r| r.ego.velocity, f64::INFINITY, f64::min),
            max_velocity: fold(|r| r.ego.velocity, f64::NEG_INFINITY, f64::max),
            min_control: fold(|r| r.control, f64::INFINITY, f64::min),
            max_control: fold(|r| r.control, f64::NEG_INFINITY, f64::max),
            delay_cost,
            channel_cost_total: self.lambda * delay_cost,
            max_gap_in_region: region.iter().copied().reduce(f64::max),
            steps_in_region: region.len(),
            conservative_steps: recs.iter().filter(|r| r.mode == PlanMode::Conservative).count(),
            infeasible_steps: recs.iter().filter(|r| r.infeasible).count(),
            mean_n_eff: recs.iter().map(|r| r.n_eff as f64).sum::<f64>() / recs.len().max(1) as f64,
            solver_iterations: recs.iter().map(|r| r.iterations).sum(),
        }
    }
}

/// Quantities reported per run. `delay_cost` is Σ w_t² over the realized
/// delivery times; `channel_cost_total` weights it by the run's λ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub steps: usize,
    pub outcome: Outcome,
    pub lambda: f64,
    pub min_gap: f64,
    pub min_velocity: f64,
    pub max_velocity: f64,
    pub min_control: f64,
    pub max_control: f64,
    pub delay_cost: f64,
    pub channel_cost_total: f64,
    pub max_gap_in_region: Option<f64>,
    pub steps_in_region: usize,
    pub conservative_steps: usize,
    pub infeasible_steps: usize,
    pub mean_n_eff: f64,
    pub solver_iterations: usize,
}

/// Runs the closed loop until the ego passes the degraded region by three
/// widths, reaches the road end, or hits the step limit. A collision ends
/// the run and is reported in the outcome, not as an error.
pub fn run_scenario(cfg: &ScenarioConfig, training: Arc<TrainingSet>) -> Result<ScenarioTrace> {
    cfg.validate()?;
    let dt = cfg.controller.bounds.dt;
    let mut sim = ClosedLoop::new(
        cfg.controller.clone(),
        training,
        cfg.run_channel()?,
        cfg.ego,
        cfg.lead.state_at(0, dt),
    )?;
    let end = cfg.end_position();
    let mut records = Vec::new();
    let outcome = loop {
        if records.len() >= cfg.max_steps || sim.ego().position > end {
            break Outcome::Completed { steps: records.len() };
        }
        let step = sim.now();
        match sim.receding_step() {
            Ok(r) => records.push(r),
            Err(Error::Collision { gap }) => {
                log::error!("collision at step {step}, gap {gap}");
                records.extend(sim.last_record().filter(|r| r.time == step).cloned());
                break Outcome::Collision { step: step + 1, gap };
            }
            Err(e) => return Err(e),
        }
    };
    Ok(ScenarioTrace { records, outcome, lambda: cfg.controller.weights.channel })
}

/// Channel-aware run and its λ = 0 baseline on the same seeds, concurrently.
pub fn run_paired(cfg: &ScenarioConfig, training: Arc<TrainingSet>) -> Result<(ScenarioTrace, ScenarioTrace)> {
    let base = cfg.baseline();
    let (aware, baseline) = std::thread::scope(|s| {
        let t = Arc::clone(&training);
        let h = s.spawn(move || run_scenario(&base, t));
        let aware = run_scenario(cfg, training);
        (aware, h.join().expect("baseline run panicked"))
    });
    Ok((aware?, baseline?))
}
