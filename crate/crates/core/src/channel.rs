//! Ground-truth delay field, packet transmission and mailbox semantics.
//!
//! The field is a constant base delay plus Gaussian bumps along the road,
//! evaluated at the midpoint between the two vehicles. Delays are turned into
//! whole-step latencies by rounding up, so a packet is never delivered early.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};

/// Simulation step index.
pub type Step = i64;

/// One region of degraded delivery time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    /// Road position of the peak, in meters.
    pub center: f64,
    /// Extra delay at the peak, in seconds.
    pub amplitude: f64,
    /// Gaussian width, in meters.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelField {
    pub base_delay: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl ChannelField {
    pub fn constant(base_delay: f64) -> Self {
        Self { base_delay, bumps: Vec::new(), noise_std: 0.0, rng_seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_delay.is_finite() && self.base_delay >= 0.0) {
            return Err(Error::Config(format!("base_delay must be >= 0, got {}", self.base_delay)));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        for b in &self.bumps {
            if !(b.amplitude.is_finite() && b.amplitude >= 0.0) {
                return Err(Error::Config(format!("bump amplitude must be >= 0, got {}", b.amplitude)));
            }
            if !(b.width.is_finite() && b.width > 0.0) {
                return Err(Error::Config(format!("bump width must be > 0, got {}", b.width)));
            }
            if !b.center.is_finite() {
                return Err(Error::Config("bump center must be finite".into()));
            }
        }
        Ok(())
    }

    /// Noise-free delay at a given pair midpoint.
    pub fn mean_delay_at(&self, midpoint: f64) -> f64 {
        self.base_delay
            + self
                .bumps
                .iter()
                .map(|b| {
                    let z = (midpoint - b.center) / b.width;
                    b.amplitude * (-0.5 * z * z).exp()
                })
                .sum::<f64>()
    }

    /// Noise-free delay for a vehicle pair.
    pub fn mean_delay(&self, ego: &VehicleState, lead: &VehicleState) -> f64 {
        self.mean_delay_at(midpoint(ego, lead))
    }
}

pub fn midpoint(ego: &VehicleState, lead: &VehicleState) -> f64 {
    0.5 * (ego.position + lead.position)
}

/// A field together with its seeded noise stream. Single owner.
#[derive(Debug, Clone)]
pub struct Channel {
    field: ChannelField,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
}

impl Channel {
    pub fn new(field: ChannelField) -> Result<Self> {
        field.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(field.rng_seed);
        let noise = Normal::new(0.0, field.noise_std)
            .map_err(|e| Error::Config(format!("noise_std: {e}")))?;
        Ok(Self { field, rng, noise })
    }

    pub fn field(&self) -> &ChannelField {
        &self.field
    }

    /// Realized delivery time: field value plus one noise draw, floored at zero.
    /// Every call advances the stream by exactly one draw.
    pub fn true_delay(&mut self, ego: &VehicleState, lead: &VehicleState) -> f64 {
        let eps = self.noise.sample(&mut self.rng);
        (self.field.mean_delay(ego, lead) + eps).max(0.0)
    }

    /// Sends `states` at `send_time`, drawing the delay from the field.
    pub fn transmit(
        &mut self,
        states: Vec<VehicleState>,
        send_time: Step,
        ego: &VehicleState,
        lead: &VehicleState,
        dt: f64,
    ) -> (Packet, f64) {
        let delay = self.true_delay(ego, lead);
        (Packet::sent(states, send_time, delay_steps(delay, dt)), delay)
    }
}

/// Whole steps of latency for a delivery time: `ceil(delay / dt)`, zero only
/// for a zero delay.
pub fn delay_steps(delay: f64, dt: f64) -> Step {
    if delay <= 0.0 {
        0
    } else {
        ((delay / dt).ceil() as Step).max(1)
    }
}

/// A lead-vehicle plan: states for steps `origin_time ..= origin_time + N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Packet {
    pub origin_time: Step,
    pub arrival_time: Step,
    pub states: Vec<VehicleState>,
}

impl Packet {
    pub fn sent(states: Vec<VehicleState>, send_time: Step, latency: Step) -> Self {
        debug_assert!(latency >= 0);
        debug_assert!(!states.is_empty());
        Self { origin_time: send_time, arrival_time: send_time + latency, states }
    }

    /// Planning horizon the packet was built for.
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// States still in the future at `now` (including `now` itself). Empty
    /// once the packet is fully stale.
    pub fn prune(&self, now: Step) -> &[VehicleState] {
        let stale = now - self.origin_time;
        if stale < 0 {
            return &self.states;
        }
        let stale = stale as usize;
        if stale >= self.states.len() {
            &[]
        } else {
            &self.states[stale..]
        }
    }

    /// Usable horizon at `now`: `origin_time + N - now`, clamped to `[0, N]`.
    pub fn effective_horizon(&self, now: Step, horizon: usize) -> usize {
        effective_horizon(self.origin_time, now, horizon)
    }
}

pub fn effective_horizon(origin_time: Step, now: Step, horizon: usize) -> usize {
    (origin_time + horizon as Step - now).clamp(0, horizon as Step) as usize
}

/// Everything the lead has sent so far; only arrived packets are visible.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    packets: Vec<Packet>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: Packet) {
        self.packets.push(p);
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn arrived(&self, now: Step) -> impl Iterator<Item = &Packet> {
        self.packets.iter().filter(move |p| p.arrival_time <= now)
    }

    /// Freshest arrived packet: maximum origin time, ties broken by the later
    /// arrival, then by the earlier insertion.
    pub fn latest_packet(&self, now: Step) -> Option<&Packet> {
        let mut best: Option<&Packet> = None;
        for p in self.arrived(now) {
            best = match best {
                Some(b) if (p.origin_time, p.arrival_time) <= (b.origin_time, b.arrival_time) => Some(b),
                _ => Some(p),
            };
        }
        best
    }

    /// Drops arrived packets that can never be selected again.
    pub fn compact(&mut self, now: Step) {
        let Some(best) = self.latest_packet(now).map(|p| p.origin_time) else {
            return;
        };
        self.packets.retain(|p| p.arrival_time > now || p.origin_time >= best);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(n: usize) -> Vec<VehicleState> {
        (0..n).map(|i| VehicleState::new(i as f64, 5.0)).collect()
    }

    fn pkt(origin: Step, arrival: Step, n: usize) -> Packet {
        Packet { origin_time: origin, arrival_time: arrival, states: states(n) }
    }

    #[test]
    fn field_values() {
        let s = VehicleState::new(180.0, 5.0);
        let l = VehicleState::new(220.0, 5.0);
        let mut flat = Channel::new(ChannelField::constant(0.1)).unwrap();
        assert_eq!(flat.true_delay(&s, &l), 0.1);

        let bump = Bump { center: 200.0, amplitude: 2.0, width: 20.0 };
        let f = ChannelField { base_delay: 0.1, bumps: vec![bump], noise_std: 0.0, rng_seed: 1 };
        assert!((f.mean_delay(&s, &l) - 2.1).abs() < 1e-15);
        assert!((f.mean_delay_at(220.0) - 1.313_061_319_425_266_6).abs() < 1e-12);
    }

    #[test]
    fn noise_is_reproducible_and_floored() {
        let f = ChannelField { base_delay: 0.0, bumps: vec![], noise_std: 0.5, rng_seed: 9 };
        let s = VehicleState::new(0.0, 5.0);
        let mut a = Channel::new(f.clone()).unwrap();
        let mut b = Channel::new(f).unwrap();
        for _ in 0..100 {
            let x = a.true_delay(&s, &s);
            assert_eq!(x.to_bits(), b.true_delay(&s, &s).to_bits());
            assert!(x >= 0.0);
        }
    }

    #[test]
    fn invalid_field_rejected() {
        let mut f = ChannelField::constant(0.1);
        f.bumps.push(Bump { center: 0.0, amplitude: 1.0, width: 0.0 });
        assert!(Channel::new(f).is_err());
        assert!(Channel::new(ChannelField::constant(-1.0)).is_err());
    }

    #[test]
    fn delay_rounding() {
        assert_eq!(delay_steps(0.1, 1.0), 1);
        assert_eq!(delay_steps(2.3, 1.0), 3);
        assert_eq!(delay_steps(0.0, 1.0), 0);
        assert_eq!(delay_steps(2.0, 1.0), 2);
        assert_eq!(delay_steps(0.3, 0.1), 3);
    }

    #[test]
    fn transmit_sets_times() {
        let s = VehicleState::new(0.0, 5.0);
        let mut ch = Channel::new(ChannelField::constant(0.1)).unwrap();
        let (p, d) = ch.transmit(states(11), 4, &s, &s, 1.0);
        assert_eq!((p.origin_time, p.arrival_time, d), (4, 5, 0.1));
        let mut ch = Channel::new(ChannelField::constant(2.3)).unwrap();
        assert_eq!(ch.transmit(states(11), 4, &s, &s, 1.0).0.arrival_time, 7);
        let mut ch = Channel::new(ChannelField::constant(0.0)).unwrap();
        assert_eq!(ch.transmit(states(11), 4, &s, &s, 1.0).0.arrival_time, 4);
    }

    #[test]
    fn latest_packet_selection() {
        let mut mb = Mailbox::new();
        assert!(mb.latest_packet(10).is_none());
        mb.push(pkt(2, 3, 11));
        mb.push(pkt(4, 5, 11));
        mb.push(pkt(3, 4, 11));
        assert_eq!(mb.latest_packet(10).unwrap().origin_time, 4);
        // not yet arrived
        mb.push(pkt(6, 12, 11));
        assert_eq!(mb.latest_packet(10).unwrap().origin_time, 4);

        let mut mb = Mailbox::new();
        mb.push(pkt(4, 5, 11));
        mb.push(pkt(4, 6, 11));
        assert_eq!(mb.latest_packet(10).unwrap().arrival_time, 6);
        let mut mb = Mailbox::new();
        mb.push(pkt(4, 6, 11));
        mb.push(pkt(4, 5, 11));
        assert_eq!(mb.latest_packet(10).unwrap().arrival_time, 6);
    }

    #[test]
    fn compact_keeps_selection() {
        let mut mb = Mailbox::new();
        for o in 0..6 {
            mb.push(pkt(o, o + 2, 3));
        }
        let before = mb.latest_packet(5).cloned();
        mb.compact(5);
        assert_eq!(mb.latest_packet(5).cloned(), before);
        assert_eq!(mb.len(), 3);
        assert_eq!(mb.latest_packet(7).unwrap().origin_time, 5);
    }

    #[test]
    fn prune_and_effective_horizon() {
        let p = pkt(4, 5, 11);
        assert_eq!(p.prune(6).len(), 9);
        assert_eq!(p.prune(6)[0], p.states[2]);
        assert_eq!(p.effective_horizon(6, 10), 8);
        assert_eq!(p.prune(4).len(), 11);
        assert_eq!(p.effective_horizon(4, 10), 10);
        assert!(p.prune(15).is_empty());
        assert_eq!(p.effective_horizon(15, 10), 0);
        assert_eq!(p.effective_horizon(20, 10), 0);
        assert_eq!(p.prune(14).len(), 1);
    }
}
