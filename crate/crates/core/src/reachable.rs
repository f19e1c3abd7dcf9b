//! Exact interval reachable sets of the ego double integrator and the
//! training-window selection built on them.

use serde::{Deserialize, Serialize};

use crate::channel::Step;
use crate::dynamics::{Bounds, VehicleState};
use crate::gp::TrainingSet;

/// Slack for floating-point roundoff at box faces.
const MEMBERSHIP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub pos_lo: f64,
    pub pos_hi: f64,
    pub vel_lo: f64,
    pub vel_hi: f64,
}

impl IntervalBox {
    pub fn point(s: &VehicleState) -> Self {
        Self { pos_lo: s.position, pos_hi: s.position, vel_lo: s.velocity, vel_hi: s.velocity }
    }

    pub fn contains(&self, s: &VehicleState) -> bool {
        s.position >= self.pos_lo - MEMBERSHIP_EPS
            && s.position <= self.pos_hi + MEMBERSHIP_EPS
            && s.velocity >= self.vel_lo - MEMBERSHIP_EPS
            && s.velocity <= self.vel_hi + MEMBERSHIP_EPS
    }

    pub fn pos_width(&self) -> f64 {
        self.pos_hi - self.pos_lo
    }

    pub fn is_subset_of(&self, other: &IntervalBox) -> bool {
        self.pos_lo >= other.pos_lo - MEMBERSHIP_EPS
            && self.pos_hi <= other.pos_hi + MEMBERSHIP_EPS
            && self.vel_lo >= other.vel_lo - MEMBERSHIP_EPS
            && self.vel_hi <= other.vel_hi + MEMBERSHIP_EPS
    }
}

/// One-step reachable box. Both coordinates of the double-integrator step are
/// monotone in the initial velocity and the input, so the extreme corners map
/// to the extreme corners and the result is exact.
pub fn reach_one(b: &IntervalBox, bounds: &Bounds) -> IntervalBox {
    let dt = bounds.dt;
    IntervalBox {
        pos_lo: b.pos_lo + b.vel_lo * dt + 0.5 * bounds.u_min * dt * dt,
        pos_hi: b.pos_hi + b.vel_hi * dt + 0.5 * bounds.u_max * dt * dt,
        vel_lo: bounds.clamp_velocity(b.vel_lo + bounds.u_min * dt),
        vel_hi: bounds.clamp_velocity(b.vel_hi + bounds.u_max * dt),
    }
}

/// Boxes for steps `0..=N`; `boxes[0]` is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReachTube {
    pub boxes: Vec<IntervalBox>,
}

impl ReachTube {
    pub fn horizon(&self) -> usize {
        self.boxes.len() - 1
    }

    pub fn contains(&self, k: usize, s: &VehicleState) -> bool {
        self.boxes.get(k).is_some_and(|b| b.contains(s))
    }
}

pub fn reach_n(x0: &VehicleState, horizon: usize, bounds: &Bounds) -> ReachTube {
    let mut boxes = Vec::with_capacity(horizon + 1);
    boxes.push(IntervalBox::point(x0));
    for k in 0..horizon {
        let next = reach_one(&boxes[k], bounds);
        boxes.push(next);
    }
    ReachTube { boxes }
}

/// Allowed deviation of a training row's lead part from the predicted lead state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadTolerance {
    pub position: f64,
    pub velocity: f64,
}

impl Default for LeadTolerance {
    fn default() -> Self {
        Self { position: 5.0, velocity: 1.0 }
    }
}

impl LeadTolerance {
    pub fn matches(&self, sample: &VehicleState, predicted: &VehicleState) -> bool {
        (sample.position - predicted.position).abs() <= self.position
            && (sample.velocity - predicted.velocity).abs() <= self.velocity
    }
}

/// Rows whose tag `s` lies in `[now, now + N]`, whose ego part lies in
/// `boxes[s - now]`, and whose lead part is within `tol` of `lead_pred[s - now]`.
/// Rows tagged beyond the prediction are skipped. Output is ordered by tag,
/// then by row index.
pub fn select_training(
    set: &TrainingSet,
    tube: &ReachTube,
    now: Step,
    lead_pred: &[VehicleState],
    tol: &LeadTolerance,
) -> Vec<usize> {
    let mut rows: Vec<(Step, usize)> = set
        .samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let k = s.step_tag - now;
            if k < 0 {
                return None;
            }
            let k = k as usize;
            let (b, lead) = (tube.boxes.get(k)?, lead_pred.get(k)?);
            (b.contains(&s.input.ego) && tol.matches(&s.input.lead, lead)).then_some((s.step_tag, i))
        })
        .collect();
    rows.sort_unstable();
    rows.into_iter().map(|(_, i)| i).collect()
}
