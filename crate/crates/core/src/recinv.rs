//! Windowed kernel cache with O(m²) inverse maintenance.
//!
//! The stored matrix already includes the noise ridge, `K̄ = K(X̄, X̄) + σ_ε² I`,
//! so `inverse()` is exactly the matrix the posterior needs. Rows leave through
//! a rank-one Sherman–Morrison correction followed by dropping the row and
//! column, and enter through a Schur-complement bordering of the inverse.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::Step;
use crate::error::{Error, Result};
use crate::gp::{cholesky_with_jitter, gram, Hyperparameters, Input, Rbf};

/// Smallest Schur complement accepted when appending a point.
pub const SCHUR_MIN: f64 = 1e-12;
/// Smallest Sherman–Morrison denominator before falling back to dense inversion.
pub const SM_DENOM_MIN: f64 = 1e-12;
/// Tolerance of the sampled `K̄·K̄⁻¹ = I` self-check.
pub const SELF_CHECK_TOL: f64 = 1e-6;

/// Constant prior mean of the delay process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum PriorMean {
    Zero,
    Constant(f64),
    /// Mean of the window targets.
    #[default]
    WindowMean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub appended: usize,
    pub removed: usize,
    pub rejected: usize,
    pub dense_fallbacks: usize,
    pub refreshes: usize,
    pub self_check_failures: usize,
    pub slides: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SlideReport {
    pub removed: usize,
    pub appended: usize,
    pub rejected: usize,
    pub refreshed: bool,
}

impl SlideReport {
    /// More than half of the offered points were rejected.
    pub fn is_degenerate(&self) -> bool {
        let offered = self.appended + self.rejected;
        offered > 0 && 2 * self.rejected > offered
    }

    pub fn check(&self) -> Result<()> {
        if self.is_degenerate() {
            Err(Error::DegenerateSampling { rejected: self.rejected, offered: self.appended + self.rejected })
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone)]
struct Weights {
    prior: f64,
    alpha: DVector<f64>,
}

/// The active training window `(X̄, ω̄, K̄, K̄⁻¹)`. Rows are kept in ascending
/// step-tag order.
#[derive(Debug, Clone)]
pub struct KernelCache {
    hyper: Hyperparameters,
    rbf: Rbf,
    prior: PriorMean,
    fallback_mean: f64,
    inputs: Vec<Input>,
    targets: Vec<f64>,
    tags: Vec<Step>,
    ids: Vec<usize>,
    k: DMatrix<f64>,
    k_inv: DMatrix<f64>,
    weights: OnceLock<Weights>,
    refresh_every: usize,
    slides_since_refresh: usize,
    check_cursor: usize,
    stats: CacheStats,
}

impl KernelCache {
    pub fn new(hyper: Hyperparameters, prior: PriorMean) -> Self {
        Self {
            rbf: hyper.kernel(),
            hyper,
            prior,
            fallback_mean: match prior {
                PriorMean::Constant(c) => c,
                _ => 0.0,
            },
            inputs: Vec::new(),
            targets: Vec::new(),
            tags: Vec::new(),
            ids: Vec::new(),
            k: DMatrix::zeros(0, 0),
            k_inv: DMatrix::zeros(0, 0),
            weights: OnceLock::new(),
            refresh_every: 100,
            slides_since_refresh: 0,
            check_cursor: 0,
            stats: CacheStats::default(),
        }
    }

    /// Builds the window directly with one dense inversion. Points are
    /// `(input, target, step_tag, id)` and must come in tag order.
    pub fn from_points(
        hyper: Hyperparameters,
        prior: PriorMean,
        points: impl IntoIterator<Item = (Input, f64, Step, usize)>,
    ) -> Result<Self> {
        let mut c = Self::new(hyper, prior);
        for (x, y, tag, id) in points {
            if let Some(&last) = c.tags.last() {
                if tag < last {
                    return Err(Error::TagOrder { tag, last });
                }
            }
            c.inputs.push(x);
            c.targets.push(y);
            c.tags.push(tag);
            c.ids.push(id);
        }
        c.k = gram(&c.inputs, &c.hyper);
        for i in 0..c.len() {
            c.k[(i, i)] += c.hyper.noise_var;
        }
        c.k_inv = dense_inverse(&c.k, c.hyper.signal_var)?;
        Ok(c)
    }

    /// Mean used where the window is empty and `PriorMean::WindowMean` is set.
    pub fn with_fallback_mean(mut self, mean: f64) -> Self {
        self.fallback_mean = mean;
        self.weights = OnceLock::new();
        self
    }

    /// Number of slides between full dense re-inversions; 0 disables them.
    pub fn with_refresh_every(mut self, slides: usize) -> Self {
        self.refresh_every = slides;
        self
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn hyper(&self) -> &Hyperparameters {
        &self.hyper
    }

    pub fn inputs(&self) -> &[Input] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn tags(&self) -> &[Step] {
        &self.tags
    }

    /// Caller-assigned identifiers of the cached rows (training-set row indices
    /// in the simulation).
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `K̄` including the noise ridge.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.k_inv
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn invalidate(&mut self) {
        self.weights = OnceLock::new();
    }

    /// Current constant prior mean.
    pub fn prior_mean(&self) -> f64 {
        match self.prior {
            PriorMean::Zero => 0.0,
            PriorMean::Constant(c) => c,
            PriorMean::WindowMean if self.targets.is_empty() => self.fallback_mean,
            PriorMean::WindowMean => self.targets.iter().sum::<f64>() / self.targets.len() as f64,
        }
    }

    fn weights(&self) -> &Weights {
        self.weights.get_or_init(|| {
            let prior = self.prior_mean();
            let centered = DVector::from_iterator(self.len(), self.targets.iter().map(|y| y - prior));
            Weights { prior, alpha: &self.k_inv * centered }
        })
    }

    /// Posterior mean only, O(m).
    pub fn posterior_mean(&self, x: &Input) -> f64 {
        let w = self.weights();
        let mut m = w.prior;
        for (xi, a) in self.inputs.iter().zip(w.alpha.iter()) {
            m += a * self.rbf.eval(xi, x);
        }
        m
    }

    /// Posterior mean and variance; variance is clamped at zero from below.
    pub fn posterior(&self, x: &Input) -> (f64, f64) {
        if self.is_empty() {
            return (self.prior_mean(), self.hyper.signal_var);
        }
        let kx = self.cross(x);
        let w = self.weights();
        let mean = w.prior + kx.dot(&w.alpha);
        let var = self.hyper.signal_var - kx.dot(&(&self.k_inv * &kx));
        (mean, var.max(0.0))
    }

    fn cross(&self, x: &Input) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.inputs.iter().map(|xi| self.rbf.eval(xi, x)))
    }

    /// Drops the oldest row.
    pub fn remove_first(&mut self) -> Result<()> {
        self.remove_at(0)
    }

    /// Drops row `i` via `(K̄ − p qᵀ)⁻¹ = K̄⁻¹ + K̄⁻¹ p qᵀ K̄⁻¹ / (1 − qᵀ K̄⁻¹ p)` with
    /// `p = K̄ e_i − e_i`, `q = e_i`. The corrected matrix has `e_i` as its
    /// i-th column, so removing row and column i from its inverse leaves the
    /// inverse of the minor. Since `K̄⁻¹ p = e_i − K̄⁻¹ e_i` the denominator is
    /// `(K̄⁻¹)_ii` and the update is a rank-one downdate by the i-th column.
    pub fn remove_at(&mut self, i: usize) -> Result<()> {
        let m = self.len();
        if m == 0 || i >= m {
            return Err(Error::CacheTooSmall { needed: i + 1, have: m });
        }
        self.invalidate();
        self.stats.removed += 1;
        self.inputs.remove(i);
        self.targets.remove(i);
        self.tags.remove(i);
        self.ids.remove(i);
        let k = std::mem::replace(&mut self.k, DMatrix::zeros(0, 0));
        self.k = k.remove_row(i).remove_column(i);
        let mut inv = std::mem::replace(&mut self.k_inv, DMatrix::zeros(0, 0));
        if m == 1 {
            return Ok(());
        }

        let denom = inv[(i, i)];
        if denom.abs() < SM_DENOM_MIN || !denom.is_finite() {
            log::warn!("sherman-morrison denominator {denom:e}; re-inverting {}x{} window", m - 1, m - 1);
            self.stats.dense_fallbacks += 1;
            self.k_inv = dense_inverse(&self.k, self.hyper.signal_var)?;
            return Ok(());
        }
        let col = inv.column(i).clone_owned();
        inv.ger(-1.0 / denom, &col, &col, 1.0);
        self.k_inv = inv.remove_row(i).remove_column(i);
        Ok(())
    }

    /// Borders the window with one point. Returns `Ok(false)` and leaves the
    /// cache untouched when the Schur complement falls below [`SCHUR_MIN`].
    pub fn append_point(&mut self, x: Input, target: f64, tag: Step, id: usize) -> Result<bool> {
        if let Some(&last) = self.tags.last() {
            if tag < last {
                return Err(Error::TagOrder { tag, last });
            }
        }
        if x.iter().any(|v| !v.is_finite()) || !target.is_finite() {
            return Err(Error::NonFinite("appended point"));
        }
        let m = self.len();
        let kv = self.cross(&x);
        let kxx = self.hyper.signal_var + self.hyper.noise_var;
        let a = &self.k_inv * &kv;
        let schur = kxx - kv.dot(&a);
        if !(schur >= SCHUR_MIN) {
            self.stats.rejected += 1;
            log::debug!("rejected near-duplicate point (schur {schur:e})");
            return Ok(false);
        }
        self.invalidate();
        let s_inv = 1.0 / schur;

        let k = std::mem::replace(&mut self.k, DMatrix::zeros(0, 0));
        let mut k = k.insert_row(m, 0.0).insert_column(m, 0.0);
        k.view_mut((0, m), (m, 1)).copy_from(&kv);
        k.view_mut((m, 0), (1, m)).copy_from(&kv.transpose());
        k[(m, m)] = kxx;

        let inv = std::mem::replace(&mut self.k_inv, DMatrix::zeros(0, 0));
        let mut inv = inv.insert_row(m, 0.0).insert_column(m, 0.0);
        inv.view_mut((0, 0), (m, m)).ger(s_inv, &a, &a, 1.0);
        let border = &a * -s_inv;
        inv.view_mut((0, m), (m, 1)).copy_from(&border);
        inv.view_mut((m, 0), (1, m)).copy_from(&border.transpose());
        inv[(m, m)] = s_inv;

        self.k = k;
        self.k_inv = inv;
        self.inputs.push(x);
        self.targets.push(target);
        self.tags.push(tag);
        self.ids.push(id);
        self.stats.appended += 1;
        Ok(true)
    }

    /// One window update: drops the leading rows tagged at or before
    /// `stale_tag`, then appends `new_points` in order.
    pub fn slide_window(
        &mut self,
        stale_tag: Step,
        new_points: impl IntoIterator<Item = (Input, f64, Step, usize)>,
    ) -> Result<SlideReport> {
        let mut report = SlideReport::default();
        while self.tags.first().is_some_and(|&t| t <= stale_tag) {
            self.remove_first()?;
            report.removed += 1;
        }
        for (x, y, tag, id) in new_points {
            if self.append_point(x, y, tag, id)? {
                report.appended += 1;
            } else {
                report.rejected += 1;
            }
        }
        if report.is_degenerate() {
            log::warn!("degenerate sampling: {} of {} points rejected", report.rejected, report.rejected + report.appended);
        }
        self.stats.slides += 1;
        self.slides_since_refresh += 1;
        report.refreshed = self.maintain()?;
        Ok(report)
    }

    /// Periodic dense refresh plus a sampled residual check. Returns whether the
    /// inverse was rebuilt.
    fn maintain(&mut self) -> Result<bool> {
        if self.is_empty() {
            return Ok(false);
        }
        if self.refresh_every > 0 && self.slides_since_refresh >= self.refresh_every {
            self.refresh()?;
            return Ok(true);
        }
        let m = self.len();
        let rows = [self.check_cursor % m, m - 1];
        self.check_cursor = self.check_cursor.wrapping_add(7919);
        let residual = rows.iter().map(|&r| self.row_residual(r)).fold(0.0, f64::max);
        if residual > SELF_CHECK_TOL {
            log::warn!("inverse self-check residual {residual:e}; rebuilding");
            self.stats.self_check_failures += 1;
            self.refresh()?;
            return Ok(true);
        }
        Ok(false)
    }

    /// `‖(K̄ K̄⁻¹ − I)_{r,·}‖_∞`, O(m²).
    pub fn row_residual(&self, r: usize) -> f64 {
        let row = self.k.row(r) * &self.k_inv;
        row.iter()
            .enumerate()
            .map(|(c, v)| (v - if c == r { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// Full `‖K̄ K̄⁻¹ − I‖_∞`, O(m³).
    pub fn residual(&self) -> f64 {
        let m = self.len();
        let prod = &self.k * &self.k_inv - DMatrix::<f64>::identity(m, m);
        prod.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    /// Rebuilds the inverse from `K̄` by dense inversion.
    pub fn refresh(&mut self) -> Result<()> {
        self.k_inv = dense_inverse(&self.k, self.hyper.signal_var)?;
        self.slides_since_refresh = 0;
        self.stats.refreshes += 1;
        self.invalidate();
        Ok(())
    }
}

/// Inverse of a symmetric positive-definite matrix through Cholesky, with
/// jitter on failure.
pub fn dense_inverse(k: &DMatrix<f64>, signal_var: f64) -> Result<DMatrix<f64>> {
    if k.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let (chol, _) = cholesky_with_jitter(k.clone(), signal_var)?;
    Ok(chol.inverse())
}
