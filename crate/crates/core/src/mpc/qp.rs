//! Primal active-set solver for small dense strictly convex QPs,
//! `min ½ xᵀGx + cᵀx` subject to `Ax ≥ b`, started from a feasible point.

use nalgebra::{DMatrix, DVector};

const STEP_TOL: f64 = 1e-13;
const MULT_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub working_set: Vec<usize>,
    pub iterations: usize,
    pub optimal: bool,
}

/// Solves the QP from feasible `x0`. `G` must be positive definite. Stops
/// after `max_iter` working-set changes with `optimal = false`.
pub fn solve(
    g: &DMatrix<f64>,
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    x0: DVector<f64>,
    max_iter: usize,
) -> QpSolution {
    let n = g.nrows();
    let m = a.nrows();
    let mut x = x0;
    let mut work: Vec<usize> = Vec::new();

    for it in 0..max_iter {
        let grad = g * &x + c;
        let Some((p, mult)) = eqp(g, &grad, a, &work) else {
            // dependent working set; drop the newest constraint and retry
            log::debug!("qp: singular KKT system with {} active rows", work.len());
            if work.pop().is_none() {
                break;
            }
            continue;
        };
        let scale = 1.0 + x.amax();
        if p.amax() <= STEP_TOL * scale {
            let worst = mult.iter().enumerate().min_by(|l, r| l.1.total_cmp(r.1)).map(|(i, &v)| (i, v));
            match worst {
                Some((i, v)) if v < -MULT_TOL => {
                    work.remove(i);
                }
                _ => return QpSolution { x, working_set: work, iterations: it + 1, optimal: true },
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..m {
            if work.contains(&i) {
                continue;
            }
            let ai = a.row(i);
            let ap = ai.dot(&p.transpose());
            if ap < -1e-14 {
                let slack = ai.dot(&x.transpose()) - b[i];
                let t = (-slack / ap).max(0.0);
                if t < alpha {
                    alpha = t;
                    blocking = Some(i);
                }
            }
        }
        x += alpha * &p;
        if let Some(i) = blocking {
            work.push(i);
        }
        debug_assert!(work.len() <= n + 1);
    }
    QpSolution { x, working_set: work, iterations: max_iter, optimal: false }
}

/// Equality-constrained step: minimize ½pᵀGp + gradᵀp with A_W p = 0.
/// Returns the step and the multipliers of the working rows.
fn eqp(g: &DMatrix<f64>, grad: &DVector<f64>, a: &DMatrix<f64>, work: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = g.nrows();
    let w = work.len();
    let mut kkt = DMatrix::zeros(n + w, n + w);
    kkt.view_mut((0, 0), (n, n)).copy_from(g);
    for (j, &i) in work.iter().enumerate() {
        for col in 0..n {
            let v = a[(i, col)];
            kkt[(col, n + j)] = -v;
            kkt[(n + j, col)] = v;
        }
    }
    let mut rhs = DVector::zeros(n + w);
    rhs.rows_mut(0, n).copy_from(&(-grad));
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some((sol.rows(0, n).into_owned(), sol.rows(n, w).into_owned()))
}

/// Largest violation of `A x ≥ b`, zero when feasible.
pub fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    (a * x - b).iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_minimum() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let c = DVector::from_vec(vec![-2.0, -4.0]);
        let a = DMatrix::zeros(0, 2);
        let b = DVector::zeros(0);
        let s = solve(&g, &c, &a, &b, DVector::zeros(2), 50);
        assert!(s.optimal);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && (s.x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bound_becomes_active() {
        // min (x-1)² + (y-1)²  s.t.  x + y ≤ 1  →  (0.5, 0.5)
        let g = DMatrix::identity(2, 2) * 2.0;
        let c = DVector::from_vec(vec![-2.0, -2.0]);
        let a = DMatrix::from_row_slice(1, 2, &[-1.0, -1.0]);
        let b = DVector::from_vec(vec![-1.0]);
        let s = solve(&g, &c, &a, &b, DVector::zeros(2), 50);
        assert!(s.optimal);
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
        assert_eq!(s.working_set, vec![0]);
    }

    #[test]
    fn releases_constraint_with_negative_multiplier() {
        // start on x ≥ 0 face, optimum is interior at x = 2
        let g = DMatrix::identity(1, 1);
        let c = DVector::from_vec(vec![-2.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let b = DVector::from_vec(vec![0.0, -5.0]);
        let s = solve(&g, &c, &a, &b, DVector::zeros(1), 50);
        assert!(s.optimal);
        assert!((s.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_constraints_at_vertex() {
        // duplicate rows must not make the KKT system singular
        let g = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![3.0, 3.0]);
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0]);
        let b = DVector::from_vec(vec![-1.0, -1.0, -1.0, -2.0]);
        let s = solve(&g, &c, &a, &b, DVector::zeros(2), 50);
        assert!(s.optimal);
        assert!((s.x[0] + 1.0).abs() < 1e-12 && (s.x[1] + 1.0).abs() < 1e-12);
        assert!(max_violation(&a, &b, &s.x) < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_box() {
        // separable objective on a box: optimum is the clamped unconstrained minimizer
        let n = 4;
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let c = DVector::from_vec(vec![-5.0, 1.0, -0.3, 10.0]);
        let mut a = DMatrix::zeros(2 * n, n);
        let mut b = DVector::zeros(2 * n);
        for i in 0..n {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = -1.0;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -1.0;
        }
        let s = solve(&g, &c, &a, &b, DVector::zeros(n), 100);
        for i in 0..n {
            let want = (-c[i] / g[(i, i)]).clamp(-1.0, 1.0);
            assert!((s.x[i] - want).abs() < 1e-12);
        }
    }
}
