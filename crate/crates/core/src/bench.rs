//! Timing of the recursive window update against dense re-inversion.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::Step;
use crate::error::{Error, Result};
use crate::gp::{Hyperparameters, Input};
use crate::recinv::{dense_inverse, KernelCache, PriorMean};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub window: usize,
    pub nu: usize,
    pub reps: usize,
    pub recursive_median_s: f64,
    pub dense_median_s: f64,
    pub speedup: f64,
    /// Worst relative Frobenius distance between the maintained and the
    /// freshly inverted matrix over all trials.
    pub max_rel_error: f64,
}

pub fn bench_hyper() -> Hyperparameters {
    Hyperparameters { signal_var: 1.0, length_scales: [10.0, 3.0, 10.0, 3.0], noise_var: 0.01 }
}

fn random_input(rng: &mut ChaCha8Rng) -> Input {
    [rng.random_range(0.0..100.0), rng.random_range(3.0..10.0), rng.random_range(0.0..100.0), rng.random_range(3.0..10.0)]
}

/// Relative Frobenius distance `‖a − b‖ / ‖b‖`.
pub fn rel_frobenius(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Window of `m` rows, `nu` per tag, sliding by one tag per trial. Each trial
/// times one `slide_window` call and one dense inversion of the resulting
/// `K̄`, and checks the two inverses agree.
pub fn bench_window(m: usize, nu: usize, reps: usize, seed: u64) -> Result<BenchRow> {
    if nu == 0 || m < 2 * nu || reps == 0 {
        return Err(Error::Config(format!("bench needs nu >= 1, window >= 2 nu and reps >= 1 (window {m}, nu {nu})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (m as u64) << 8 ^ nu as u64);
    let h = bench_hyper();
    let points: Vec<_> = (0..m).map(|i| (random_input(&mut rng), rng.random::<f64>(), (i / nu) as Step, i)).collect();
    let mut cache = KernelCache::from_points(h.clone(), PriorMean::Zero, points)?.with_refresh_every(0);
    let mut next_id = m;
    let mut rec = Vec::with_capacity(reps);
    let mut dense = Vec::with_capacity(reps);
    let mut worst: f64 = 0.0;
    for next_tag in ((m / nu) as Step + 1..).take(reps) {
        let stale = cache.tags()[nu - 1];
        let removed = cache.tags().iter().take_while(|&&t| t <= stale).count();
        let fresh: Vec<_> = (0..removed)
            .map(|j| (random_input(&mut rng), rng.random::<f64>(), next_tag, next_id + j))
            .collect();
        next_id += removed;

        let t0 = Instant::now();
        let report = cache.slide_window(stale, fresh)?;
        rec.push(t0.elapsed().as_secs_f64());
        if report.refreshed {
            return Err(Error::Singular);
        }

        let t0 = Instant::now();
        let oracle = dense_inverse(cache.matrix(), h.signal_var)?;
        dense.push(t0.elapsed().as_secs_f64());
        worst = worst.max(rel_frobenius(cache.inverse(), &oracle));
    }
    let r = median(&mut rec);
    let d = median(&mut dense);
    Ok(BenchRow {
        window: m,
        nu,
        reps,
        recursive_median_s: r,
        dense_median_s: d,
        speedup: d / r,
        max_rel_error: worst,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn write_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(3)).collect();
        assert!((loglog_slope(&xs, &ys) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn minimum_window_runs_without_fallback() {
        let row = bench_window(10, 5, 3, 1).unwrap();
        assert!(row.max_rel_error < 1e-8, "{row:?}");
    }

    #[test]
    fn window_below_two_nu_rejected() {
        assert!(bench_window(9, 5, 3, 1).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
