//! RBF-kernel Gaussian-process regression of packet delivery time over the
//! aggregated ego + lead state.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::channel::Step;
use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::recinv::KernelCache;

/// Dimension of the aggregated input: ego (position, velocity) followed by
/// lead (position, velocity).
pub const INPUT_DIM: usize = 4;

pub type Input = [f64; INPUT_DIM];

/// Ego and lead state concatenated into one regression input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedInput {
    pub ego: VehicleState,
    pub lead: VehicleState,
}

impl AggregatedInput {
    pub const fn new(ego: VehicleState, lead: VehicleState) -> Self {
        Self { ego, lead }
    }

    pub fn to_array(&self) -> Input {
        [self.ego.position, self.ego.velocity, self.lead.position, self.lead.velocity]
    }

    pub fn from_array(x: &Input) -> Self {
        Self::new(VehicleState::new(x[0], x[1]), VehicleState::new(x[2], x[3]))
    }
}

impl From<AggregatedInput> for Input {
    fn from(a: AggregatedInput) -> Self {
        a.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    /// σ_Ω², seconds².
    pub signal_var: f64,
    /// One scale per input dimension, in the units of that dimension.
    pub length_scales: [f64; INPUT_DIM],
    /// σ_ε², seconds².
    pub noise_var: f64,
}

impl Hyperparameters {
    pub fn new(signal_var: f64, length_scales: [f64; INPUT_DIM], noise_var: f64) -> Result<Self> {
        let h = Self { signal_var, length_scales, noise_var };
        h.validate()?;
        Ok(h)
    }

    pub fn isotropic(signal_var: f64, length_scale: f64, noise_var: f64) -> Result<Self> {
        Self::new(signal_var, [length_scale; INPUT_DIM], noise_var)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_var.is_finite() && self.signal_var > 0.0) {
            return Err(Error::InvalidHyperparameters(format!(
                "signal_var must be > 0, got {}",
                self.signal_var
            )));
        }
        if self.length_scales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidHyperparameters(format!(
                "length scales must be > 0, got {:?}",
                self.length_scales
            )));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::InvalidHyperparameters(format!(
                "noise_var must be >= 0, got {}",
                self.noise_var
            )));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Rbf {
        let mut inv_sq = [0.0; INPUT_DIM];
        for (o, l) in inv_sq.iter_mut().zip(self.length_scales) {
            *o = 1.0 / (l * l);
        }
        Rbf { signal_var: self.signal_var, inv_sq_scales: inv_sq }
    }
}

/// Squared-exponential kernel with per-dimension length scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rbf {
    signal_var: f64,
    inv_sq_scales: [f64; INPUT_DIM],
}

impl Rbf {
    #[inline]
    pub fn eval(&self, a: &Input, b: &Input) -> f64 {
        let mut q = 0.0;
        for i in 0..INPUT_DIM {
            let d = a[i] - b[i];
            q += d * d * self.inv_sq_scales[i];
        }
        self.signal_var * (-0.5 * q).exp()
    }

    pub fn signal_var(&self) -> f64 {
        self.signal_var
    }
}

pub fn kernel(a: &AggregatedInput, b: &AggregatedInput, h: &Hyperparameters) -> f64 {
    h.kernel().eval(&a.to_array(), &b.to_array())
}

/// Gram matrix `K_ij = k(x_i, x_j)` without the noise ridge.
pub fn gram(inputs: &[Input], h: &Hyperparameters) -> DMatrix<f64> {
    let k = h.kernel();
    let n = inputs.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = k.signal_var;
        for j in 0..i {
            let v = k.eval(&inputs[i], &inputs[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Cross-covariance vector `k(X, x)`.
pub fn cross_cov(inputs: &[Input], x: &Input, h: &Hyperparameters) -> DVector<f64> {
    let k = h.kernel();
    DVector::from_iterator(inputs.len(), inputs.iter().map(|xi| k.eval(xi, x)))
}

const JITTER_RETRIES: usize = 3;

/// Cholesky factor of `m`, adding `1e-8·σ_Ω²` to the diagonal on failure and
/// growing it tenfold per retry. Returns the factor and the jitter used.
pub fn cholesky_with_jitter(mut m: DMatrix<f64>, signal_var: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = m.clone().cholesky() {
        return Ok((c, 0.0));
    }
    let mut jitter = 1e-8 * signal_var;
    let mut added = 0.0;
    for _ in 0..JITTER_RETRIES {
        for i in 0..m.nrows() {
            m[(i, i)] += jitter - added;
        }
        added = jitter;
        if let Some(c) = m.clone().cholesky() {
            log::debug!("cholesky needed jitter {jitter:e}");
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Singular)
}

/// Posterior mean and variance at `x` given the windowed cache. An empty
/// window returns the prior.
pub fn posterior(x: &AggregatedInput, cache: &KernelCache) -> (f64, f64) {
    cache.posterior(&x.to_array())
}

/// `log p(ω | X)` for a zero-mean GP with the given hyperparameters.
pub fn log_marginal_likelihood(inputs: &[Input], targets: &[f64], h: &Hyperparameters) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: targets.len() });
    }
    let r = inputs.len();
    let mut k = gram(inputs, h);
    for i in 0..r {
        k[(i, i)] += h.noise_var;
    }
    let (chol, _) = cholesky_with_jitter(k, h.signal_var)?;
    let w = DVector::from_column_slice(targets);
    let alpha = chol.solve(&w);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * w.dot(&alpha) - 0.5 * log_det - 0.5 * r as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Picks the grid candidate with the largest log marginal likelihood of the
/// targets minus `prior_mean`. Ties keep the earliest candidate.
pub fn fit_hyperparameters(
    set: &TrainingSet,
    grid: &[Hyperparameters],
    prior_mean: f64,
) -> Result<(Hyperparameters, f64)> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if set.len() < 5 {
        return Err(Error::InvalidTrainingSet(format!("need at least 5 rows to fit, got {}", set.len())));
    }
    let inputs = set.inputs();
    let targets: Vec<f64> = set.samples.iter().map(|s| s.delay - prior_mean).collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in grid.iter().enumerate() {
        h.validate()?;
        let lml = match log_marginal_likelihood(&inputs, &targets, h) {
            Ok(v) => v,
            Err(Error::Singular) => {
                log::warn!("candidate {i} skipped: kernel matrix singular");
                continue;
            }
            Err(e) => return Err(e),
        };
        log::debug!("candidate {i}: {h:?} lml {lml:.6}");
        if best.is_none_or(|(_, b)| lml > b) {
            best = Some((i, lml));
        }
    }
    let (i, lml) = best.ok_or(Error::Singular)?;
    Ok((grid[i].clone(), lml))
}

/// Candidate lists whose Cartesian product forms a fitting grid. Position
/// scales apply to both vehicles' positions, velocity scales to both
/// velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub signal_vars: Vec<f64>,
    pub position_scales: Vec<f64>,
    pub velocity_scales: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

impl HyperGrid {
    pub fn candidates(&self) -> Vec<Hyperparameters> {
        let mut out = Vec::new();
        for &s in &self.signal_vars {
            for &lp in &self.position_scales {
                for &lv in &self.velocity_scales {
                    for &n in &self.noise_vars {
                        out.push(Hyperparameters { signal_var: s, length_scales: [lp, lv, lp, lv], noise_var: n });
                    }
                }
            }
        }
        out
    }

    /// `count` log-spaced values from `lo` to `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
        match count {
            0 => Vec::new(),
            1 => vec![lo],
            _ => {
                let (a, b) = (lo.ln(), hi.ln());
                (0..count).map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp()).collect()
            }
        }
    }
}

/// One labelled observation of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub input: AggregatedInput,
    pub delay: f64,
    pub step_tag: Step,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    ego_pos: f64,
    ego_vel: f64,
    lead_pos: f64,
    lead_vel: f64,
    delay: f64,
    step_tag: Step,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
}

impl TrainingSet {
    pub fn new(samples: Vec<TrainingSample>) -> Result<Self> {
        let s = Self { samples };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidTrainingSet("no rows".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.input.ego.is_finite() && s.input.lead.is_finite() && s.delay.is_finite()) {
                return Err(Error::InvalidTrainingSet(format!("row {i} is not finite")));
            }
            if s.delay < 0.0 {
                return Err(Error::InvalidTrainingSet(format!("row {i} has negative delay {}", s.delay)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn inputs(&self) -> Vec<Input> {
        self.samples.iter().map(|s| s.input.to_array()).collect()
    }

    pub fn mean_delay(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.delay).sum::<f64>() / self.samples.len() as f64
    }

    /// Every `len / max_rows`-th row, so at most `max_rows` rows remain.
    pub fn subsample(&self, max_rows: usize) -> TrainingSet {
        if self.len() <= max_rows || max_rows == 0 {
            return self.clone();
        }
        let stride = self.len().div_ceil(max_rows);
        TrainingSet { samples: self.samples.iter().step_by(stride).copied().collect() }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.samples {
            wr.serialize(CsvRow {
                ego_pos: s.input.ego.position,
                ego_vel: s.input.ego.velocity,
                lead_pos: s.input.lead.position,
                lead_vel: s.input.lead.velocity,
                delay: s.delay,
                step_tag: s.step_tag,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut samples = Vec::new();
        for row in rd.deserialize() {
            let row: CsvRow = row?;
            samples.push(TrainingSample {
                input: AggregatedInput::new(
                    VehicleState::new(row.ego_pos, row.ego_vel),
                    VehicleState::new(row.lead_pos, row.lead_vel),
                ),
                delay: row.delay,
                step_tag: row.step_tag,
            });
        }
        Self::new(samples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recinv::{KernelCache, PriorMean};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_input(rng: &mut impl Rng, scale: f64) -> Input {
        [0.0; INPUT_DIM].map(|_| rng.random_range(-scale..scale))
    }

    #[test]
    fn kernel_values() {
        let h = Hyperparameters::isotropic(1.0, 1.0, 0.0).unwrap();
        let a = AggregatedInput::from_array(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(kernel(&a, &a, &h), 1.0);
        let b = AggregatedInput::from_array(&[1.0, 3.0, 3.0, 4.0]);
        assert!((kernel(&a, &b, &h) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((kernel(&a, &b, &h) - 0.6065).abs() < 1e-4);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Hyperparameters::new(2.5, [1.0, 3.0, 0.5, 7.0], 0.1).unwrap();
        for _ in 0..100 {
            let a = AggregatedInput::from_array(&rand_input(&mut rng, 5.0));
            let b = AggregatedInput::from_array(&rand_input(&mut rng, 5.0));
            assert_eq!(kernel(&a, &b, &h), kernel(&b, &a, &h));
            assert!(kernel(&a, &b, &h) <= 2.5);
        }
    }

    #[test]
    fn hyperparameter_validation() {
        assert!(Hyperparameters::isotropic(0.0, 1.0, 0.0).is_err());
        assert!(Hyperparameters::isotropic(1.0, -1.0, 0.0).is_err());
        assert!(Hyperparameters::isotropic(1.0, 1.0, -1e-3).is_err());
    }

    #[test]
    fn gram_matches_elementwise_kernel() {
        let h = Hyperparameters::new(1.7, [2.0, 1.0, 3.0, 0.5], 0.0).unwrap();
        let one = gram(&[[0.0; 4]], &h);
        assert_eq!(one.as_slice(), &[1.7]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs: Vec<Input> = (0..5).map(|_| rand_input(&mut rng, 3.0)).collect();
        let g = gram(&xs, &h);
        for i in 0..5 {
            for j in 0..5 {
                let k = kernel(&AggregatedInput::from_array(&xs[i]), &AggregatedInput::from_array(&xs[j]), &h);
                assert!((g[(i, j)] - k).abs() <= 1e-15);
            }
        }
        let eig = g.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn duplicated_row_needs_ridge() {
        let h = Hyperparameters::isotropic(1.0, 1.0, 1e-4).unwrap();
        let x = [1.0, 2.0, 3.0, 4.0];
        let mut g = gram(&[x, x, [0.0; 4]], &h);
        assert!(g.clone().cholesky().is_none() || g.determinant().abs() < 1e-12);
        for i in 0..3 {
            g[(i, i)] += h.noise_var;
        }
        assert!(g.try_inverse().is_some());
    }

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        let m = DMatrix::from_element(3, 3, 1.0);
        let (c, jitter) = cholesky_with_jitter(m, 1.0).unwrap();
        assert!(jitter > 0.0);
        assert!(c.l().iter().all(|v| v.is_finite()));
        assert!(matches!(cholesky_with_jitter(-DMatrix::identity(2, 2), 1.0), Err(Error::Singular)));
    }

    #[test]
    fn empty_cache_returns_prior() {
        let h = Hyperparameters::isotropic(0.7, 1.0, 0.01).unwrap();
        let c = KernelCache::new(h, PriorMean::Constant(0.3));
        let (m, v) = posterior(&AggregatedInput::from_array(&[0.0; 4]), &c);
        assert_eq!((m, v), (0.3, 0.7));
    }

    #[test]
    fn interpolates_and_reverts() {
        let h = Hyperparameters::isotropic(1.0, 1.0, 1e-10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(Input, f64)> = (0..10).map(|_| (rand_input(&mut rng, 5.0), rng.random_range(0.0..3.0))).collect();
        let cache = KernelCache::from_points(h, PriorMean::Zero, pts.iter().enumerate().map(|(i, (x, y))| (*x, *y, 0, i))).unwrap();
        for (x, y) in &pts {
            let (m, v) = cache.posterior(x);
            assert!((m - y).abs() < 1e-6, "{m} vs {y}");
            assert!(v <= 1e-6);
        }
        let far = [100.0; 4];
        let (m, v) = cache.posterior(&far);
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn centered_prior_mean() {
        let h = Hyperparameters::isotropic(1.0, 1.0, 1e-3).unwrap();
        let pts = [([0.0; 4], 2.0), ([1.0, 0.0, 0.0, 0.0], 3.0)];
        let cache = KernelCache::from_points(h, PriorMean::WindowMean, pts.iter().map(|(x, y)| (*x, *y, 0, 0))).unwrap();
        let (m, _) = cache.posterior(&[500.0; 4]);
        assert!((m - 2.5).abs() < 1e-12);
    }

    #[test]
    fn lml_and_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples: Vec<TrainingSample> = (0..12)
            .map(|i| TrainingSample {
                input: AggregatedInput::from_array(&rand_input(&mut rng, 4.0)),
                delay: 0.0,
                step_tag: i,
            })
            .collect();
        let set = TrainingSet::new(samples).unwrap();
        let h1 = Hyperparameters::isotropic(1.0, 1.0, 0.1).unwrap();
        assert!(fit_hyperparameters(&set, &[], 0.0).is_err());
        assert_eq!(fit_hyperparameters(&set, std::slice::from_ref(&h1), 0.0).unwrap().0, h1);

        // zero targets: the data term vanishes, smallest log det wins
        let grid: Vec<_> = [0.5, 1.0, 2.0, 4.0]
            .iter()
            .map(|&l| Hyperparameters::isotropic(1.0, l, 0.1).unwrap())
            .collect();
        let inputs = set.inputs();
        let mut best = (0, f64::INFINITY);
        for (i, h) in grid.iter().enumerate() {
            let mut k = gram(&inputs, h);
            for d in 0..k.nrows() {
                k[(d, d)] += h.noise_var;
            }
            let ld = k.determinant().ln();
            if ld < best.1 {
                best = (i, ld);
            }
        }
        assert_eq!(fit_hyperparameters(&set, &grid, 0.0).unwrap().0, grid[best.0]);
    }

    #[test]
    fn csv_round_trip() {
        let set = TrainingSet::new(vec![TrainingSample {
            input: AggregatedInput::from_array(&[1.5, 2.0, 3.25, 4.0]),
            delay: 0.1,
            step_tag: -3,
        }])
        .unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("ego_pos,ego_vel,lead_pos,lead_vel,delay,step_tag\n"));
        assert_eq!(TrainingSet::read_csv(&buf[..]).unwrap(), set);
    }

    #[test]
    fn rejects_negative_delay() {
        let s = TrainingSample { input: AggregatedInput::from_array(&[0.0; 4]), delay: -0.1, step_tag: 0 };
        assert!(TrainingSet::new(vec![s]).is_err());
        assert!(TrainingSet::new(vec![]).is_err());
    }

    #[test]
    fn log_spacing() {
        let v = HyperGrid::log_spaced(1.0, 100.0, 3);
        assert!((v[1] - 10.0).abs() < 1e-12 && (v[2] - 100.0).abs() < 1e-9);
    }
}
