//! Receding-horizon loop with the channel in the loop.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{Channel, Mailbox, Step};
use crate::dynamics::{self, Bounds, ControlInput, VehicleState};
use crate::error::{Error, Result};
use crate::gp::{AggregatedInput, Hyperparameters, TrainingSet};
use crate::mpc::{extend_constant_velocity, solve, CostBreakdown, MpcProblem, MpcSolution, MpcWeights, SolverOptions};
use crate::reachable::{reach_n, select_training, LeadTolerance};
use crate::recinv::{KernelCache, PriorMean};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub hyper: Hyperparameters,
    #[serde(default)]
    pub prior_mean: PriorMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub horizon: usize,
    pub bounds: Bounds,
    pub weights: MpcWeights,
    pub gap_ref: f64,
    pub phi: f64,
    #[serde(default)]
    pub min_gap: f64,
    #[serde(default)]
    pub vehicle_length: f64,
    /// Desired cruising speed of the reference trajectory.
    pub v_ref: f64,
    /// Reference speed scale while no usable packet is available.
    #[serde(default = "default_conservative_factor")]
    pub conservative_speed_factor: f64,
    #[serde(default)]
    pub lead_tol: LeadTolerance,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Slides between dense re-inversions of the window.
    #[serde(default = "default_refresh")]
    pub refresh_every: usize,
    pub gp: GpConfig,
}

fn default_conservative_factor() -> f64 {
    0.8
}
fn default_true() -> bool {
    true
}
fn default_refresh() -> usize {
    100
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.weights.validate()?;
        self.gp.hyper.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.phi > 0.0) {
            return Err(Error::Config(format!("phi must be > 0, got {}", self.phi)));
        }
        if !(self.min_gap >= 0.0 && self.vehicle_length >= 0.0) {
            return Err(Error::Config("min_gap and vehicle_length must be >= 0".into()));
        }
        if !(self.v_ref >= self.bounds.v_min && self.v_ref <= self.bounds.v_max) {
            return Err(Error::Config(format!("v_ref {} outside velocity bounds", self.v_ref)));
        }
        if !(self.conservative_speed_factor > 0.0 && self.conservative_speed_factor <= 1.0) {
            return Err(Error::Config("conservative_speed_factor must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Planning against the freshest packet.
    Packet,
    /// No usable packet: last known lead state at constant velocity, reduced speed.
    Conservative,
}

/// What happened during one control step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub time: Step,
    pub ego: VehicleState,
    pub lead: VehicleState,
    pub control: f64,
    pub gap: f64,
    pub n_eff: usize,
    pub packet_origin: Option<Step>,
    pub mode: PlanMode,
    /// GP mean delay at the realized pair state.
    pub predicted_delay: f64,
    /// Delivery time of the packet sent this step.
    pub realized_delay: f64,
    pub cost: CostBreakdown,
    pub iterations: usize,
    pub converged: bool,
    pub infeasible: bool,
    pub window_size: usize,
    pub window_rebuilt: bool,
    pub slide_seconds: f64,
}

/// Plant, channel, mailbox and kernel window of one leader–follower run.
pub struct ClosedLoop {
    cfg: ControllerConfig,
    training: Arc<TrainingSet>,
    channel: Channel,
    mailbox: Mailbox,
    cache: Option<KernelCache>,
    now: Step,
    ego: VehicleState,
    lead: VehicleState,
    /// Latest lead state known to the ego and the step it refers to.
    last_known_lead: (Step, VehicleState),
    previous: Option<MpcSolution>,
    last: Option<StepRecord>,
    rebuilds: usize,
}

impl ClosedLoop {
    /// The ego knows the lead's initial state from onboard sensing.
    pub fn new(
        cfg: ControllerConfig,
        training: Arc<TrainingSet>,
        channel: Channel,
        ego: VehicleState,
        lead: VehicleState,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            training,
            channel,
            mailbox: Mailbox::new(),
            cache: None,
            now: 0,
            ego,
            lead,
            last_known_lead: (0, lead),
            previous: None,
            last: None,
            rebuilds: 0,
        })
    }

    pub fn now(&self) -> Step {
        self.now
    }

    pub fn ego(&self) -> VehicleState {
        self.ego
    }

    pub fn lead(&self) -> VehicleState {
        self.lead
    }

    pub fn cache(&self) -> Option<&KernelCache> {
        self.cache.as_ref()
    }

    /// Record of the most recent step, also kept when that step ended in a
    /// collision.
    pub fn last_record(&self) -> Option<&StepRecord> {
        self.last.as_ref()
    }

    pub fn window_rebuilds(&self) -> usize {
        self.rebuilds
    }

    fn lead_plan(&self, from: &VehicleState) -> Vec<VehicleState> {
        (0..=self.cfg.horizon).map(|k| from.coast(k, self.cfg.bounds.dt)).collect()
    }

    /// Freshest lead prediction for steps `now..`, with the packet it came from.
    fn lead_prediction(&mut self) -> (Vec<VehicleState>, Option<Step>, PlanMode) {
        let n = self.cfg.horizon;
        if let Some(p) = self.mailbox.latest_packet(self.now) {
            let pruned = p.prune(self.now);
            if let Some(last) = pruned.last() {
                let at = p.origin_time + p.horizon() as Step;
                if at >= self.last_known_lead.0 {
                    self.last_known_lead = (at, *last);
                }
            }
            if p.effective_horizon(self.now, n) >= 1 {
                let pred: Vec<_> = pruned.iter().take(n + 1).copied().collect();
                return (pred, Some(p.origin_time), PlanMode::Packet);
            }
        }
        let (at, state) = self.last_known_lead;
        let lag = (self.now - at).max(0) as usize;
        let current = state.coast(lag, self.cfg.bounds.dt);
        (self.lead_plan(&current), None, PlanMode::Conservative)
    }

    /// Brings the window to `R_N(x_now) ∩ X`: stale rows leave and the newest
    /// step's rows enter through the recursive update, rows that fell out of
    /// the tube are removed, and only out-of-order additions force a dense
    /// rebuild.
    fn update_window(&mut self, lead_ext: &[VehicleState]) -> Result<(bool, f64)> {
        let started = Instant::now();
        let tube = reach_n(&self.ego, self.cfg.horizon, &self.cfg.bounds);
        let fresh = select_training(&self.training, &tube, self.now, lead_ext, &self.cfg.lead_tol);
        let samples = &self.training.samples;
        let point = |i: usize| {
            let s = &samples[i];
            (s.input.to_array(), s.delay, s.step_tag, i)
        };
        let build = |this: &Self| -> Result<KernelCache> {
            Ok(KernelCache::from_points(this.cfg.gp.hyper.clone(), this.cfg.gp.prior_mean, fresh.iter().map(|&i| point(i)))?
                .with_fallback_mean(this.training.mean_delay())
                .with_refresh_every(this.cfg.refresh_every))
        };

        let Some(cache) = self.cache.as_mut() else {
            self.cache = Some(build(self)?);
            self.rebuilds += 1;
            return Ok((true, started.elapsed().as_secs_f64()));
        };

        let newest = self.now + self.cfg.horizon as Step;
        let present: HashSet<usize> = cache.ids().iter().copied().collect();
        let incoming: Vec<_> =
            fresh.iter().filter(|&&i| samples[i].step_tag == newest && !present.contains(&i)).map(|&i| point(i)).collect();
        let report = cache.slide_window(self.now - 1, incoming)?;
        if report.is_degenerate() {
            log::warn!("step {}: {} of {} window points rejected", self.now, report.rejected, report.rejected + report.appended);
        }

        let wanted: HashSet<usize> = fresh.iter().copied().collect();
        for pos in (0..cache.len()).rev() {
            if !wanted.contains(&cache.ids()[pos]) {
                cache.remove_at(pos)?;
            }
        }
        let present: HashSet<usize> = cache.ids().iter().copied().collect();
        let missing: Vec<usize> = fresh.iter().copied().filter(|i| !present.contains(i)).collect();
        let last_tag = cache.tags().last().copied().unwrap_or(Step::MIN);
        let mut rebuilt = false;
        if missing.iter().all(|&i| samples[i].step_tag >= last_tag) {
            for i in missing {
                let (x, y, tag, id) = point(i);
                cache.append_point(x, y, tag, id)?;
            }
        } else {
            log::debug!("step {}: out-of-order window rows, rebuilding", self.now);
            rebuilt = true;
        }
        if rebuilt {
            self.cache = Some(build(self)?);
            self.rebuilds += 1;
        }
        Ok((rebuilt, started.elapsed().as_secs_f64()))
    }

    /// One control step: the lead transmits, the ego reads its mailbox,
    /// recomputes the effective horizon, slides the window, solves, and
    /// applies the first control.
    pub fn receding_step(&mut self) -> Result<StepRecord> {
        let n = self.cfg.horizon;
        let dt = self.cfg.bounds.dt;

        let plan = self.lead_plan(&self.lead);
        let (packet, realized_delay) = self.channel.transmit(plan, self.now, &self.ego, &self.lead, dt);
        self.mailbox.push(packet);

        let (lead_pred, packet_origin, mode) = self.lead_prediction();
        self.mailbox.compact(self.now);
        if mode == PlanMode::Conservative {
            log::info!("step {}: no usable packet, planning conservatively", self.now);
        }
        let n_eff = match mode {
            PlanMode::Packet => lead_pred.len().saturating_sub(1).min(n),
            PlanMode::Conservative => 0,
        };
        let lead_ext = extend_constant_velocity(&lead_pred, n + 1, dt);

        let (window_rebuilt, slide_seconds) = self.update_window(&lead_ext)?;
        let cache = self.cache.as_ref().expect("window initialized");
        if cache.is_empty() {
            log::debug!("step {}: empty window, GP prior in use", self.now);
        }

        let v_ref = match mode {
            PlanMode::Packet => self.cfg.v_ref,
            PlanMode::Conservative => {
                (self.cfg.v_ref * self.cfg.conservative_speed_factor).max(self.cfg.bounds.v_min)
            }
        };
        let problem = MpcProblem {
            x0: self.ego,
            horizon: n,
            lead_pred,
            reference: (0..=n)
                .map(|k| VehicleState::new(self.ego.position + v_ref * dt * k as f64, v_ref))
                .collect(),
            weights: self.cfg.weights,
            gap_ref: self.cfg.gap_ref,
            phi: self.cfg.phi,
            min_gap: self.cfg.min_gap,
            vehicle_length: self.cfg.vehicle_length,
            bounds: self.cfg.bounds,
        };
        let warm: Option<Vec<f64>> = match (&self.previous, self.cfg.warm_start) {
            (Some(prev), true) => {
                let mut w: Vec<f64> = prev.controls.iter().skip(1).copied().collect();
                w.push(*prev.controls.last().unwrap_or(&0.0));
                Some(w)
            }
            _ => None,
        };
        let sol = solve(&problem, cache, warm.as_deref(), &self.cfg.solver)?;
        if sol.infeasible {
            log::warn!("step {}: infeasible, applying maximal braking", self.now);
        }
        let predicted_delay = cache.posterior_mean(&AggregatedInput::new(self.ego, self.lead).to_array());
        let window_size = cache.len();
        let u = sol.controls[0].clamp(self.cfg.bounds.u_min, self.cfg.bounds.u_max);

        let record = StepRecord {
            time: self.now,
            ego: self.ego,
            lead: self.lead,
            control: u,
            gap: dynamics::gap(&self.ego, &self.lead, self.cfg.vehicle_length),
            n_eff,
            packet_origin,
            mode,
            predicted_delay,
            realized_delay,
            cost: sol.cost,
            iterations: sol.iterations,
            converged: sol.converged,
            infeasible: sol.infeasible,
            window_size,
            window_rebuilt,
            slide_seconds,
        };

        self.ego = dynamics::step(self.ego, ControlInput::new(u), &self.cfg.bounds)?;
        self.lead = self.lead.coast(1, dt);
        self.now += 1;
        self.previous = Some(sol);
        self.last = Some(record.clone());

        let gap = dynamics::gap(&self.ego, &self.lead, self.cfg.vehicle_length);
        if gap <= 0.0 {
            return Err(Error::Collision { gap });
        }
        Ok(record)
    }
}
