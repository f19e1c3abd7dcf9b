//! Channel-aware finite-horizon optimizer.
//!
//! Controls are the decision variables and states follow by rollout. Under the
//! double integrator every state is affine in the controls, so bounds, the
//! minimum gap and the linearized TTC condition `d − φ (v − v_lead) ≥ 0` are
//! linear constraints on the controls. Each SQP iteration solves a convex QP
//! with the exact Hessian of the quadratic motion cost plus a damped-BFGS
//! estimate for the GP delay term, and then backtracks on the true objective
//! from a feasible point, so iterates stay feasible and the cost never rises.

pub mod qp;
pub mod receding;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_unchecked, Bounds, VehicleState};
use crate::error::{Error, Result};
use crate::gp::{AggregatedInput, Input};
use crate::recinv::KernelCache;

/// Anything that predicts a delivery time for an aggregated input.
pub trait DelayPredictor {
    fn predict(&self, x: &Input) -> f64;
}

impl DelayPredictor for KernelCache {
    fn predict(&self, x: &Input) -> f64 {
        self.posterior_mean(x)
    }
}

impl<F: Fn(&Input) -> f64> DelayPredictor for F {
    fn predict(&self, x: &Input) -> f64 {
        self(x)
    }
}

/// Diagonal stage weights over (position, velocity).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MpcWeights {
    /// R1: tracking of the lead state shifted back by the desired gap.
    pub lead: [f64; 2],
    /// R2: tracking of the reference trajectory.
    pub reference: [f64; 2],
    /// R3: control effort.
    pub effort: f64,
    /// Q on the final state; R2 when absent.
    #[serde(default)]
    pub terminal: Option<[f64; 2]>,
    /// λ in y(w) = λ w².
    pub channel: f64,
}

impl MpcWeights {
    pub fn terminal(&self) -> [f64; 2] {
        self.terminal.unwrap_or(self.reference)
    }

    pub fn validate(&self) -> Result<()> {
        let terminal = self.terminal();
        let all = self.lead.iter().chain(&self.reference).chain(&terminal).chain([&self.effort, &self.channel]);
        for w in all {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("weights must be finite and >= 0, got {w}")));
            }
        }
        if self.effort <= 0.0 {
            return Err(Error::Config("effort weight must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Converged when the QP step satisfies ‖d‖∞ below this.
    pub stationarity_tol: f64,
    /// Relative finite-difference step for the delay-term gradient.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 200, stationarity_tol: 1e-4, fd_step: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcProblem {
    pub x0: VehicleState,
    /// Planning horizon N; controls span steps 0..N.
    pub horizon: usize,
    /// Known lead states for steps 0..=N_eff, index 0 being now.
    pub lead_pred: Vec<VehicleState>,
    /// Reference states for steps 0..=N.
    pub reference: Vec<VehicleState>,
    pub weights: MpcWeights,
    /// Desired free distance behind the lead in the R1 term, meters.
    pub gap_ref: f64,
    /// TTC floor φ, seconds.
    pub phi: f64,
    /// Minimum free distance, meters.
    pub min_gap: f64,
    pub vehicle_length: f64,
    pub bounds: Bounds,
}

impl MpcProblem {
    pub fn effective_horizon(&self) -> usize {
        self.lead_pred.len().saturating_sub(1).min(self.horizon)
    }

    /// Lead states for steps 0..=N: the prediction, continued at constant
    /// velocity from its last state.
    pub fn lead_extended(&self) -> Vec<VehicleState> {
        extend_constant_velocity(&self.lead_pred, self.horizon + 1, self.bounds.dt)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.weights.validate()?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.lead_pred.is_empty() {
            return Err(Error::Config("lead prediction is empty".into()));
        }
        if self.reference.len() != self.horizon + 1 {
            return Err(Error::DimensionMismatch { expected: self.horizon + 1, got: self.reference.len() });
        }
        if !(self.phi.is_finite() && self.phi > 0.0) {
            return Err(Error::Config(format!("phi must be > 0, got {}", self.phi)));
        }
        if !(self.min_gap >= 0.0 && self.vehicle_length >= 0.0 && self.gap_ref.is_finite()) {
            return Err(Error::Config("min_gap, vehicle_length must be >= 0".into()));
        }
        if !self.x0.is_finite() {
            return Err(Error::NonFinite("initial state"));
        }
        Ok(())
    }
}

pub fn extend_constant_velocity(states: &[VehicleState], len: usize, dt: f64) -> Vec<VehicleState> {
    let mut out: Vec<VehicleState> = states.iter().take(len).copied().collect();
    if let Some(&last) = states.last() {
        let mut k = 1;
        while out.len() < len {
            out.push(last.coast(k, dt));
            k += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub tracking: f64,
    pub reference: f64,
    pub effort: f64,
    pub terminal: f64,
    pub channel: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.tracking + self.reference + self.effort + self.terminal + self.channel
    }

    /// Everything except the delay term.
    pub fn motion(&self) -> f64 {
        self.tracking + self.reference + self.effort + self.terminal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// States for steps 1..=N.
    pub states: Vec<VehicleState>,
    /// Controls for steps 0..N.
    pub controls: Vec<f64>,
    pub cost: CostBreakdown,
    pub iterations: usize,
    pub converged: bool,
    /// No control sequence satisfies the constraints; `controls` is the
    /// maximal-braking sequence.
    pub infeasible: bool,
    pub stationarity: f64,
    /// Objective after each accepted iterate, starting from the initial guess.
    pub cost_history: Vec<f64>,
}

#[inline]
fn weighted_sq(w: [f64; 2], dp: f64, dv: f64) -> f64 {
    w[0] * dp * dp + w[1] * dv * dv
}

/// `‖x − (x_p − gap)‖²_R1 + ‖x − x_ref‖²_R2 + ‖u‖²_R3`, the lead state being
/// shifted back by `gap_ref` in position.
pub fn stage_cost(
    x: &VehicleState,
    u: f64,
    x_p: &VehicleState,
    x_ref: &VehicleState,
    weights: &MpcWeights,
    gap_ref: f64,
) -> f64 {
    weighted_sq(weights.lead, x.position - (x_p.position - gap_ref), x.velocity - x_p.velocity)
        + weighted_sq(weights.reference, x.position - x_ref.position, x.velocity - x_ref.velocity)
        + weights.effort * u * u
}

/// `Σ_k λ m(x_k, x^p_k)²` with m the predicted delivery time.
pub fn channel_cost(states: &[VehicleState], lead_pred: &[VehicleState], predictor: &impl DelayPredictor, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    states
        .iter()
        .zip(lead_pred)
        .map(|(x, l)| {
            let w = predictor.predict(&AggregatedInput::new(*x, *l).to_array());
            lambda * w * w
        })
        .sum()
}

/// States for steps 0..=N under `controls` (unsaturated rollout).
pub fn rollout(x0: &VehicleState, controls: &[f64], bounds: &Bounds) -> Vec<VehicleState> {
    let free = Bounds { v_min: f64::NEG_INFINITY, v_max: f64::INFINITY, ..*bounds };
    let mut out = Vec::with_capacity(controls.len() + 1);
    out.push(*x0);
    for &u in controls {
        let s = step_unchecked(*out.last().unwrap(), u, &free);
        out.push(s);
    }
    out
}

/// The full objective on a control sequence, term by term.
pub fn objective(p: &MpcProblem, controls: &[f64], predictor: &impl DelayPredictor) -> CostBreakdown {
    let states = rollout(&p.x0, controls, &p.bounds);
    objective_on_states(p, &states, controls, predictor)
}

fn objective_on_states(
    p: &MpcProblem,
    states: &[VehicleState],
    controls: &[f64],
    predictor: &impl DelayPredictor,
) -> CostBreakdown {
    let w = &p.weights;
    let n_eff = p.effective_horizon();
    let mut c = CostBreakdown::default();
    for (x, l) in states.iter().zip(&p.lead_pred).take(n_eff + 1) {
        c.tracking += weighted_sq(w.lead, x.position - (l.position - p.gap_ref), x.velocity - l.velocity);
    }
    for (x, r) in states.iter().zip(&p.reference) {
        c.reference += weighted_sq(w.reference, x.position - r.position, x.velocity - r.velocity);
    }
    c.effort = controls.iter().map(|u| w.effort * u * u).sum();
    let (xn, rn) = (states[p.horizon], p.reference[p.horizon]);
    c.terminal = weighted_sq(w.terminal(), xn.position - rn.position, xn.velocity - rn.velocity);
    c.channel = channel_cost(states, &p.lead_extended(), predictor, w.channel);
    c
}

/// Affine maps from controls to positions and velocities, steps 0..=N.
struct Lifted {
    pos_off: Vec<f64>,
    vel_off: Vec<f64>,
    pos: DMatrix<f64>,
    vel: DMatrix<f64>,
}

impl Lifted {
    fn new(x0: &VehicleState, n: usize, dt: f64) -> Self {
        let mut pos = DMatrix::zeros(n + 1, n);
        let mut vel = DMatrix::zeros(n + 1, n);
        for k in 1..=n {
            for j in 0..k {
                pos[(k, j)] = dt * dt * ((k - j) as f64 - 0.5);
                vel[(k, j)] = dt;
            }
        }
        let pos_off = (0..=n).map(|k| x0.position + k as f64 * x0.velocity * dt).collect();
        let vel_off = vec![x0.velocity; n + 1];
        Self { pos_off, vel_off, pos, vel }
    }
}

/// Exact quadratic model `½ uᵀ H u + cᵀ u + const` of the motion cost.
struct Quadratic {
    h: DMatrix<f64>,
    c: DVector<f64>,
}

impl Quadratic {
    fn new(p: &MpcProblem, lifted: &Lifted) -> Self {
        let n = p.horizon;
        let w = &p.weights;
        let mut h = DMatrix::identity(n, n) * (2.0 * w.effort);
        let mut c = DVector::zeros(n);
        let mut add = |row: DVector<f64>, offset: f64, target: f64, weight: f64| {
            if weight == 0.0 {
                return;
            }
            h.ger(2.0 * weight, &row, &row, 1.0);
            c.axpy(2.0 * weight * (offset - target), &row, 1.0);
        };
        let n_eff = p.effective_horizon();
        for k in 0..=n {
            let prow = lifted.pos.row(k).transpose();
            let vrow = lifted.vel.row(k).transpose();
            let (po, vo) = (lifted.pos_off[k], lifted.vel_off[k]);
            if k <= n_eff {
                let l = p.lead_pred[k];
                add(prow.clone(), po, l.position - p.gap_ref, w.lead[0]);
                add(vrow.clone(), vo, l.velocity, w.lead[1]);
            }
            let r = p.reference[k];
            add(prow.clone(), po, r.position, w.reference[0]);
            add(vrow.clone(), vo, r.velocity, w.reference[1]);
            if k == n {
                let q = w.terminal();
                add(prow, po, r.position, q[0]);
                add(vrow, vo, r.velocity, q[1]);
            }
        }
        Self { h, c }
    }

    fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.h * u + &self.c
    }
}

/// Linear constraints `A u ≥ b` on the controls.
struct Constraints {
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Constraints {
    fn new(p: &MpcProblem, lifted: &Lifted) -> Self {
        let n = p.horizon;
        let n_eff = p.effective_horizon();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e.clone(), p.bounds.u_min));
            rows.push((-e, -p.bounds.u_max));
        }
        for k in 1..=n {
            let vrow = lifted.vel.row(k).transpose();
            let vo = lifted.vel_off[k];
            rows.push((vrow.clone(), p.bounds.v_min - vo));
            rows.push((-vrow, vo - p.bounds.v_max));
        }
        for k in 1..=n_eff {
            let l = p.lead_pred[k];
            let prow = lifted.pos.row(k).transpose();
            let vrow = lifted.vel.row(k).transpose();
            let (po, vo) = (lifted.pos_off[k], lifted.vel_off[k]);
            // gap: l − p − L ≥ min_gap
            rows.push((-prow.clone(), p.min_gap + p.vehicle_length + po - l.position));
            // ttc: (l − p − L) − φ (v − v_l) ≥ 0
            rows.push((-prow - p.phi * vrow, po + p.vehicle_length - l.position + p.phi * (vo - l.velocity)));
        }
        let mut a = DMatrix::zeros(rows.len(), n);
        let mut b = DVector::zeros(rows.len());
        for (i, (r, rhs)) in rows.into_iter().enumerate() {
            a.set_row(i, &r.transpose());
            b[i] = rhs;
        }
        Self { a, b }
    }

    fn violation(&self, u: &DVector<f64>) -> f64 {
        qp::max_violation(&self.a, &self.b, u)
    }
}

/// Brakes as hard as the bounds allow without dropping below `v_min`. It
/// minimizes every future position and velocity at once, so no control
/// sequence is safer.
pub fn max_braking(x0: &VehicleState, n: usize, bounds: &Bounds) -> Vec<f64> {
    let mut v = x0.velocity;
    (0..n)
        .map(|_| {
            let u = ((bounds.v_min - v) / bounds.dt).max(bounds.u_min).min(bounds.u_max);
            v += u * bounds.dt;
            u
        })
        .collect()
}

const FEAS_TOL: f64 = 1e-9;

/// Gradient of the delay term by central differences in state space, chained
/// through the affine rollout.
fn channel_gradient(
    p: &MpcProblem,
    lifted: &Lifted,
    states: &[VehicleState],
    lead: &[VehicleState],
    predictor: &impl DelayPredictor,
    rel_step: f64,
) -> DVector<f64> {
    let n = p.horizon;
    let lambda = p.weights.channel;
    let mut g = DVector::zeros(n);
    if lambda == 0.0 {
        return g;
    }
    for k in 1..=n {
        let base = AggregatedInput::new(states[k], lead[k]).to_array();
        let m = predictor.predict(&base);
        let mut partial = [0.0; 2];
        for (d, slot) in partial.iter_mut().enumerate() {
            let h = rel_step * base[d].abs().max(1.0);
            let (mut hi, mut lo) = (base, base);
            hi[d] += h;
            lo[d] -= h;
            *slot = (predictor.predict(&hi) - predictor.predict(&lo)) / (2.0 * h);
        }
        let coef = 2.0 * lambda * m;
        g.axpy(coef * partial[0], &lifted.pos.row(k).transpose(), 1.0);
        g.axpy(coef * partial[1], &lifted.vel.row(k).transpose(), 1.0);
    }
    g
}

#[allow(clippy::too_many_arguments)]
fn finish(
    p: &MpcProblem,
    u: &DVector<f64>,
    predictor: &impl DelayPredictor,
    iterations: usize,
    converged: bool,
    infeasible: bool,
    stationarity: f64,
    cost_history: Vec<f64>,
) -> MpcSolution {
    let controls: Vec<f64> = u.iter().copied().collect();
    let mut states = Vec::with_capacity(p.horizon + 1);
    states.push(p.x0);
    for &c in &controls {
        let next = step_unchecked(*states.last().unwrap(), c, &p.bounds);
        states.push(next);
    }
    let cost = objective_on_states(p, &states, &controls, predictor);
    states.remove(0);
    MpcSolution { states, controls, cost, iterations, converged, infeasible, stationarity, cost_history }
}

/// Solves the problem from `warm_start` when it is feasible, otherwise from
/// the maximal-braking sequence. Without any feasible sequence the braking
/// sequence is returned flagged infeasible.
pub fn solve(
    p: &MpcProblem,
    predictor: &impl DelayPredictor,
    warm_start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<MpcSolution> {
    p.validate()?;
    let n = p.horizon;
    let lifted = Lifted::new(&p.x0, n, p.bounds.dt);
    let quad = Quadratic::new(p, &lifted);
    let cons = Constraints::new(p, &lifted);
    let lead = p.lead_extended();

    let braking = DVector::from_vec(max_braking(&p.x0, n, &p.bounds));
    let mut u = match warm_start {
        Some(w) if w.len() == n && cons.violation(&DVector::from_column_slice(w)) <= FEAS_TOL => {
            DVector::from_column_slice(w)
        }
        _ => braking.clone(),
    };
    if cons.violation(&u) > FEAS_TOL {
        log::warn!("no feasible control sequence (violation {:e}); braking", cons.violation(&u));
        return Ok(finish(p, &braking, predictor, 0, false, true, f64::INFINITY, Vec::new()));
    }

    let eval = |u: &DVector<f64>| -> (f64, Vec<VehicleState>) {
        let states = rollout(&p.x0, u.as_slice(), &p.bounds);
        let c = objective_on_states(p, &states, u.as_slice(), predictor);
        (c.total(), states)
    };
    let grad = |u: &DVector<f64>, states: &[VehicleState]| -> DVector<f64> {
        quad.gradient(u) + channel_gradient(p, &lifted, states, &lead, predictor, opts.fd_step)
    };

    let (mut f, mut states) = eval(&u);
    let mut g = grad(&u, &states);
    let mut hess = quad.h.clone();
    let mut history = vec![f];
    let mut stationarity = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let rhs = &cons.b - &cons.a * &u;
        let sub = qp::solve(&hess, &g, &cons.a, &rhs, DVector::zeros(n), 20 * (n + cons.a.nrows()));
        let d = sub.x;
        stationarity = d.amax();
        if stationarity <= opts.stationarity_tol {
            converged = true;
            break;
        }
        let slope = g.dot(&d);
        if slope >= 0.0 {
            // the model no longer predicts descent; treat as stationary
            converged = stationarity <= 10.0 * opts.stationarity_tol;
            break;
        }
        let mut alpha = 1.0;
        let accepted = loop {
            let trial = &u + alpha * &d;
            let (ft, st) = eval(&trial);
            if ft <= f + 1e-4 * alpha * slope {
                break Some((trial, ft, st));
            }
            alpha *= 0.5;
            if alpha < 1e-10 {
                break None;
            }
        };
        let Some((u_new, f_new, st_new)) = accepted else {
            log::debug!("line search stalled at iteration {iterations}");
            converged = stationarity <= 10.0 * opts.stationarity_tol;
            break;
        };
        let g_new = grad(&u_new, &st_new);
        damped_bfgs(&mut hess, &(&u_new - &u), &(&g_new - &g));
        u = u_new;
        f = f_new;
        g = g_new;
        states = st_new;
        history.push(f);
    }
    let _ = states;
    Ok(finish(p, &u, predictor, iterations, converged, false, stationarity, history))
}

/// Powell-damped BFGS update; keeps `b` positive definite.
fn damped_bfgs(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-16 {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = theta * y + (1.0 - theta) * &bs;
    let sr = s.dot(&r);
    if sr <= 1e-16 {
        return;
    }
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    b.ger(1.0 / sr, &r, &r, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero(_: &Input) -> f64 {
        0.0
    }

    fn weights(channel: f64) -> MpcWeights {
        MpcWeights { lead: [1.0, 1.0], reference: [0.0, 1.0], effort: 1.0, terminal: None, channel }
    }

    fn problem(x0: VehicleState, lead0: VehicleState, n: usize, channel: f64) -> MpcProblem {
        let bounds = Bounds::scenario();
        MpcProblem {
            x0,
            horizon: n,
            lead_pred: (0..=n).map(|k| lead0.coast(k, bounds.dt)).collect(),
            reference: (0..=n).map(|k| VehicleState::new(x0.position + 5.0 * k as f64, 5.0)).collect(),
            weights: weights(channel),
            gap_ref: 10.0,
            phi: 2.0,
            min_gap: 2.0,
            vehicle_length: 0.0,
            bounds,
        }
    }

    #[test]
    fn stage_cost_cases() {
        let w = weights(0.0);
        let x = VehicleState::new(10.0, 5.0);
        let lead = VehicleState::new(20.0, 5.0);
        assert_eq!(stage_cost(&x, 0.0, &lead, &x, &w, 10.0), 0.0);
        let effort_only = MpcWeights { lead: [0.0; 2], reference: [0.0; 2], effort: 1.0, terminal: None, channel: 0.0 };
        assert_eq!(stage_cost(&x, 2.0, &lead, &lead, &effort_only, 0.0), 4.0);
    }

    #[test]
    fn stage_cost_matches_expanded_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let r = |rng: &mut ChaCha8Rng| rng.random_range(-10.0..10.0);
            let (p, v, pl, vl, pr, vr, u, g) =
                (r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng), r(&mut rng));
            let w = MpcWeights {
                lead: [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)],
                reference: [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)],
                effort: rng.random_range(0.1..3.0),
                terminal: None,
                channel: 0.0,
            };
            // expanded polynomial
            let want = w.lead[0] * (p * p - 2.0 * p * (pl - g) + (pl - g) * (pl - g))
                + w.lead[1] * (v * v - 2.0 * v * vl + vl * vl)
                + w.reference[0] * (p * p - 2.0 * p * pr + pr * pr)
                + w.reference[1] * (v * v - 2.0 * v * vr + vr * vr)
                + w.effort * u * u;
            let got = stage_cost(
                &VehicleState::new(p, v),
                u,
                &VehicleState::new(pl, vl),
                &VehicleState::new(pr, vr),
                &w,
                g,
            );
            assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn channel_cost_cases() {
        let states = vec![VehicleState::new(0.0, 5.0); 4];
        let lead = vec![VehicleState::new(10.0, 5.0); 4];
        let c = |_: &Input| 0.3;
        assert_eq!(channel_cost(&states, &lead, &c, 0.0), 0.0);
        assert!((channel_cost(&states, &lead, &c, 2.0) - 4.0 * 2.0 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn quadratic_model_matches_rollout() {
        let p = problem(VehicleState::new(0.0, 6.0), VehicleState::new(12.0, 5.0), 8, 0.0);
        let lifted = Lifted::new(&p.x0, p.horizon, p.bounds.dt);
        let q = Quadratic::new(&p, &lifted);
        let u0 = DVector::zeros(p.horizon);
        let f0 = objective(&p, u0.as_slice(), &zero).total();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = DVector::from_fn(p.horizon, |_, _| rng.random_range(-3.0..2.0));
            let model = f0 + 0.5 * u.dot(&(&q.h * &u)) + q.c.dot(&u);
            let exact = objective(&p, u.as_slice(), &zero).total();
            assert!((model - exact).abs() <= 1e-9 * (1.0 + exact.abs()));
        }
    }

    #[test]
    fn on_reference_needs_no_control() {
        // lead far ahead, no R1 pull, start on the reference
        let mut p = problem(VehicleState::new(0.0, 5.0), VehicleState::new(500.0, 5.0), 10, 0.0);
        p.weights.lead = [0.0, 0.0];
        let s = solve(&p, &zero, None, &SolverOptions::default()).unwrap();
        assert!(s.converged);
        assert!(s.controls.iter().all(|u| u.abs() < 1e-6));
        assert!(s.cost.total() < 1e-9);
    }

    #[test]
    fn cost_history_nonincreasing_and_feasible() {
        let mut p = problem(VehicleState::new(0.0, 8.0), VehicleState::new(14.0, 5.0), 10, 5.0);
        p.gap_ref = 4.0;
        let bump = |x: &Input| 0.1 + 2.0 * (-0.5 * ((0.5 * (x[0] + x[2]) - 40.0) / 10.0f64).powi(2)).exp();
        let s = solve(&p, &bump, None, &SolverOptions::default()).unwrap();
        assert!(!s.infeasible);
        for w in s.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let mut prev = p.x0;
        for (k, (x, u)) in s.states.iter().zip(&s.controls).enumerate() {
            assert!(*u >= -3.0 - 1e-6 && *u <= 2.0 + 1e-6);
            assert!(x.velocity >= 3.0 - 1e-6 && x.velocity <= 10.0 + 1e-6);
            assert_eq!(*x, step_unchecked(prev, *u, &p.bounds));
            let l = p.lead_pred[k + 1];
            let d = l.position - x.position;
            assert!(d >= 2.0 - 1e-6);
            assert!(d - p.phi * (x.velocity - l.velocity).max(0.0) >= -1e-6);
            prev = *x;
        }
    }

    #[test]
    fn infeasible_start_returns_braking() {
        // closing fast with almost no gap
        let p = problem(VehicleState::new(0.0, 10.0), VehicleState::new(3.0, 3.0), 5, 0.0);
        let s = solve(&p, &zero, None, &SolverOptions::default()).unwrap();
        assert!(s.infeasible && !s.converged);
        assert_eq!(s.controls, max_braking(&p.x0, 5, &p.bounds));
    }

    #[test]
    fn braking_respects_velocity_floor() {
        let u = max_braking(&VehicleState::new(0.0, 7.0), 4, &Bounds::scenario());
        assert_eq!(u, vec![-3.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn bfgs_keeps_positive_definite() {
        let mut b = DMatrix::identity(3, 3);
        let s = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![-1.0, 0.5, 0.0]);
        damped_bfgs(&mut b, &s, &y);
        assert!(b.clone().cholesky().is_some());
    }

    #[test]
    fn extension_is_constant_velocity() {
        let v = extend_constant_velocity(&[VehicleState::new(0.0, 5.0), VehicleState::new(5.0, 5.0)], 4, 1.0);
        assert_eq!(v[3], VehicleState::new(15.0, 5.0));
        assert_eq!(extend_constant_velocity(&v, 2, 1.0).len(), 2);
    }

    #[test]
    fn shrunken_horizon_drops_tail_constraints() {
        let mut p = problem(VehicleState::new(0.0, 5.0), VehicleState::new(12.0, 5.0), 10, 0.0);
        p.lead_pred.truncate(4);
        assert_eq!(p.effective_horizon(), 3);
        let lifted = Lifted::new(&p.x0, p.horizon, p.bounds.dt);
        let c = Constraints::new(&p, &lifted);
        assert_eq!(c.a.nrows(), 2 * 10 + 2 * 10 + 2 * 3);
    }
}
