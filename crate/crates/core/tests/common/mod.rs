//! Random QPs and a dual projected-gradient oracle shared by the QP checks.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use scora::qp::QuadraticProgram;

/// Random strictly convex QP with a known feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng) -> QuadraticProgram {
    let n = rng.random_range(1..=20);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let feasible = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let m = rng.random_range(0..=2 * n);
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let slack = DVector::from_fn(m, |_, _| rng.random_range(0.0..0.5));
    let rhs = &a * &feasible + slack;
    let p = rng.random_range(0..=n.min(3) / 2);
    let c = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    let d = &c * &feasible;
    let lower = DVector::from_fn(n, |j, _| if rng.random_bool(0.5) { feasible[j] - rng.random_range(0.0..1.0) } else { f64::NEG_INFINITY });
    let upper = DVector::from_fn(n, |j, _| if rng.random_bool(0.5) { feasible[j] + rng.random_range(0.0..1.0) } else { f64::INFINITY });
    QuadraticProgram::new(h, f)
        .with_inequalities(a, rhs)
        .with_equalities(c, d)
        .with_bounds(lower, upper)
}

/// Accelerated projected gradient on the Lagrange dual. Every iterate gives a
/// lower bound on the optimal value; returns the best one found.
pub fn dual_bound(qp: &QuadraticProgram, target: f64) -> f64 {
    let n = qp.dim();
    // stack all constraints as G z ≤ h (sign-free rows for equalities)
    let mut rows: Vec<(DVector<f64>, f64, bool)> = Vec::new();
    for i in 0..qp.a.nrows() {
        rows.push((qp.a.row(i).transpose(), qp.b[i], true));
    }
    for i in 0..qp.c.nrows() {
        rows.push((qp.c.row(i).transpose(), qp.d[i], false));
    }
    for j in 0..n {
        let e = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
        if qp.upper[j].is_finite() {
            rows.push((e.clone(), qp.upper[j], true));
        }
        if qp.lower[j].is_finite() {
            rows.push((-e, -qp.lower[j], true));
        }
    }
    let m = rows.len();
    let g = DMatrix::from_fn(m, n, |i, j| rows[i].0[j]);
    let h = DVector::from_fn(m, |i, _| rows[i].1);
    let chol = Cholesky::new(qp.hessian.clone()).unwrap();
    let hinv = chol.inverse();
    let q = &g * &hinv * g.transpose();
    let lip = if m == 0 { 1.0 } else { q.symmetric_eigen().eigenvalues.max().max(1e-12) };
    let value = |y: &DVector<f64>| {
        let w = &qp.linear + g.transpose() * y;
        -0.5 * w.dot(&(&hinv * &w)) - h.dot(y)
    };
    let grad = |y: &DVector<f64>| {
        let z = -(&hinv * (&qp.linear + g.transpose() * y));
        &g * z - &h
    };
    let project = |y: &mut DVector<f64>| {
        for i in 0..m {
            if rows[i].2 {
                y[i] = y[i].max(0.0);
            }
        }
    };
    let mut y = DVector::zeros(m);
    let mut x = y.clone();
    let mut t = 1.0_f64;
    let mut best = value(&y);
    for _ in 0..200_000 {
        let mut next = &x + grad(&x) / lip;
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        x = &next + (&next - &y) * ((t - 1.0) / t_next);
        y = next;
        t = t_next;
        best = best.max(value(&y));
        if target - best <= 1e-6 {
            break;
        }
    }
    best
}
