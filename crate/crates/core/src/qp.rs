//! Dense convex quadratic programs:
//!
//! ```text
//! minimize   ½ zᵀHz + fᵀz
//! subject to A z ≤ b,  C z = d,  lo ≤ z ≤ hi
//! ```
//!
//! Solved with a primal active-set method. Bounds are handled by fixing
//! variables rather than as rows, so each iteration factors only the Hessian
//! block of the free variables.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

const PHASE_ONE_ROUNDS: usize = 50;

/// Diagonal shift applied when the Hessian is singular.
pub const HESSIAN_REGULARIZATION: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Inequality rows `A z ≤ b`.
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Equality rows `C z = d`.
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QuadraticProgram {
    /// Objective only; add constraints with the `with_*` methods.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>) -> Self {
        let n = linear.len();
        Self {
            hessian,
            linear,
            a: DMatrix::zeros(0, n),
            b: DVector::zeros(0),
            c: DMatrix::zeros(0, n),
            d: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a = a;
        self.b = b;
        self
    }

    pub fn with_equalities(mut self, c: DMatrix<f64>, d: DVector<f64>) -> Self {
        self.c = c;
        self.d = d;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z)
    }

    /// Largest constraint violation at `z` (0 when feasible).
    pub fn violation(&self, z: &DVector<f64>) -> f64 {
        let ineq = (&self.a * z - &self.b).iter().fold(0.0_f64, |m, &r| m.max(r));
        let eq = (&self.c * z - &self.d).amax();
        let bounds = (0..self.dim()).fold(0.0_f64, |m, j| {
            m.max(self.lower[j] - z[j]).max(z[j] - self.upper[j])
        });
        ineq.max(eq).max(bounds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        let shapes = [
            ("hessian", self.hessian.nrows(), n),
            ("hessian", self.hessian.ncols(), n),
            ("inequality matrix", self.a.ncols(), n),
            ("inequality rows", self.a.nrows(), self.b.len()),
            ("equality matrix", self.c.ncols(), n),
            ("equality rows", self.c.nrows(), self.d.len()),
            ("lower bounds", self.lower.len(), n),
            ("upper bounds", self.upper.len(), n),
        ];
        for (what, got, want) in shapes {
            if got != want {
                return Err(Error::domain(format!("{what}: dimension {got}, expected {want}")));
            }
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !finite(self.hessian.as_slice())
            || !finite(self.linear.as_slice())
            || !finite(self.a.as_slice())
            || !finite(self.b.as_slice())
            || !finite(self.c.as_slice())
            || !finite(self.d.as_slice())
        {
            return Err(Error::domain("quadratic program has non-finite data"));
        }
        if self.lower.iter().chain(self.upper.iter()).any(|v| v.is_nan()) {
            return Err(Error::domain("bounds must not be NaN"));
        }
        let asym = (&self.hessian - self.hessian.transpose()).amax();
        if asym > 1e-9 * self.hessian.amax().max(1.0) {
            return Err(Error::domain(format!("hessian is not symmetric (asymmetry {asym:.3e})")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

/// Constraints held active at a solution; feed back as a warm start.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActiveSet {
    pub rows: Vec<usize>,
    pub at_lower: Vec<usize>,
    pub at_upper: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    /// Multipliers of `A z ≤ b` (non-negative).
    pub ineq_duals: DVector<f64>,
    /// Multipliers of `C z = d`.
    pub eq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub active: ActiveSet,
    pub iterations: usize,
    /// Set when the Hessian needed a diagonal shift to factor.
    pub regularized: bool,
    pub kkt: KktResiduals,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpTolerances {
    /// Allowed constraint violation.
    pub feasibility: f64,
    /// Allowed negative multiplier, relative to the gradient scale.
    pub optimality: f64,
    /// Defaults to 10·(variables + constraints) + 100.
    pub max_iterations: Option<usize>,
}

impl Default for QpTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-9,
            optimality: 1e-10,
            max_iterations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub z: DVector<f64>,
    pub active: ActiveSet,
}

pub fn solve_qp(qp: &QuadraticProgram, tol: &QpTolerances) -> Result<QpSolution> {
    solve_qp_warm(qp, tol, None)
}

pub fn solve_qp_warm(qp: &QuadraticProgram, tol: &QpTolerances, warm: Option<&WarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.dim();
    if let Some(w) = warm {
        if w.z.len() != n {
            return Err(Error::domain(format!("warm start has dimension {}, expected {n}", w.z.len())));
        }
    }
    let (h, regularized) = prepare_hessian(&qp.hessian)?;
    let limit = tol
        .max_iterations
        .unwrap_or(10 * (n + qp.a.nrows() + qp.c.nrows()) + 100);
    let scale = 1.0 + qp.b.amax().max(qp.d.amax());
    let feas = tol.feasibility * scale;

    if (0..n).any(|j| qp.lower[j] > qp.upper[j]) {
        return Ok(infeasible(qp, DVector::zeros(n), regularized));
    }

    let anchor = warm.map(|w| w.z.clone()).unwrap_or_else(|| DVector::zeros(n));
    let start = if qp.violation(&anchor) <= feas {
        anchor
    } else {
        match find_feasible(qp, &anchor, feas, limit)? {
            Some(z) => z,
            None => {
                let z = clamp(&anchor, &qp.lower, &qp.upper);
                return Ok(infeasible(qp, z, regularized));
            }
        }
    };

    // Rows: independent equalities first, then inequalities.
    let eq_keep = independent_rows(&qp.c);
    let rows = stack_rows(&qp.c, &qp.d, &eq_keep, &qp.a, &qp.b);
    let n_eq = eq_keep.len();
    let core = Core {
        h: &h,
        coupled: coupling(&h),
        f: &qp.linear,
        rows: &rows.0,
        rhs: &rows.1,
        n_eq,
        lower: &qp.lower,
        upper: &qp.upper,
        feas,
        optimality: tol.optimality,
        limit,
    };

    let mut state = core.initial_state(&start);
    let cold = state.clone();
    if let Some(w) = warm {
        core.seed(&mut state, &start, &w.active);
    }
    let out = match core.run(start.clone(), state) {
        Ok(out) => out,
        // a warm working set can be numerically dependent; retry cold
        Err(_) if warm.is_some() => core.run(start, cold)?,
        Err(e) => return Err(e),
    };
    Ok(finish(qp, &eq_keep, out, regularized))
}

/// Checks convexity and shifts a singular Hessian.
fn prepare_hessian(h: &DMatrix<f64>) -> Result<(DMatrix<f64>, bool)> {
    let n = h.nrows();
    if n == 0 || Cholesky::new(h.clone()).is_some() {
        return Ok((h.clone(), false));
    }
    let min_eig = SymmetricEigen::new(h.clone()).eigenvalues.min();
    if min_eig < -1e-8 * h.amax().max(1.0) {
        return Err(Error::domain(format!(
            "hessian is indefinite (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    Ok((h + DMatrix::identity(n, n) * HESSIAN_REGULARIZATION, true))
}

fn clamp(z: &DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(z.len(), |j, _| z[j].max(lo[j]).min(hi[j]))
}

fn infeasible(qp: &QuadraticProgram, z: DVector<f64>, regularized: bool) -> QpSolution {
    let primal = qp.violation(&z);
    QpSolution {
        objective: qp.objective(&z),
        z,
        status: QpStatus::Infeasible,
        ineq_duals: DVector::zeros(qp.a.nrows()),
        eq_duals: DVector::zeros(qp.c.nrows()),
        lower_duals: DVector::zeros(qp.dim()),
        upper_duals: DVector::zeros(qp.dim()),
        active: ActiveSet::default(),
        iterations: 0,
        regularized,
        kkt: KktResiduals {
            stationarity: f64::NAN,
            primal,
            dual: f64::NAN,
            complementarity: f64::NAN,
        },
    }
}

/// Row indices forming a maximal linearly independent subset (modified
/// Gram-Schmidt with a relative threshold).
fn independent_rows(c: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for i in 0..c.nrows() {
        let row = c.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = row;
        for q in &basis {
            let coef = q.dot(&r);
            r -= q * coef;
        }
        let rn = r.norm();
        if rn > 1e-10 * norm {
            basis.push(r / rn);
            keep.push(i);
        }
    }
    keep
}

fn stack_rows(
    c: &DMatrix<f64>,
    d: &DVector<f64>,
    keep: &[usize],
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.ncols();
    let m = keep.len() + a.nrows();
    let mut rows = DMatrix::zeros(m, n);
    let mut rhs = DVector::zeros(m);
    for (k, &i) in keep.iter().enumerate() {
        rows.set_row(k, &c.row(i));
        rhs[k] = d[i];
    }
    for i in 0..a.nrows() {
        rows.set_row(keep.len() + i, &a.row(i));
        rhs[keep.len() + i] = b[i];
    }
    (rows, rhs)
}

/// Phase 1: minimize the largest violation t over (z, t) plus a proximal
/// term, re-anchored each round. Returns None once t stops shrinking above
/// the tolerance.
fn find_feasible(qp: &QuadraticProgram, anchor: &DVector<f64>, feas: f64, limit: usize) -> Result<Option<DVector<f64>>> {
    let n = qp.dim();
    let (ma, mc) = (qp.a.nrows(), qp.c.nrows());
    let m = ma + 2 * mc;
    let mut rows = DMatrix::zeros(m, n + 1);
    let mut rhs = DVector::zeros(m);
    for i in 0..ma {
        rows.view_mut((i, 0), (1, n)).copy_from(&qp.a.row(i));
        rhs[i] = qp.b[i];
    }
    for i in 0..mc {
        rows.view_mut((ma + i, 0), (1, n)).copy_from(&qp.c.row(i));
        rows.view_mut((ma + mc + i, 0), (1, n)).copy_from(&(-qp.c.row(i)));
        rhs[ma + i] = qp.d[i];
        rhs[ma + mc + i] = -qp.d[i];
    }
    rows.column_mut(n).fill(-1.0);
    let mut lower = qp.lower.clone().insert_row(n, 0.0);
    let upper = qp.upper.clone().insert_row(n, f64::INFINITY);
    // Tighten each row by a distinct tiny amount so that rows tied at the
    // largest violation do not make every step degenerate.
    for i in 0..m {
        rhs[i] -= 0.1 * feas * (1.0 + i as f64 / m as f64);
    }
    lower[n] = 0.0;
    let h = DMatrix::identity(n + 1, n + 1);
    let coupled = vec![false; n + 1];
    let mut z = clamp(anchor, &qp.lower, &qp.upper);
    let mut best = f64::INFINITY;
    for _ in 0..PHASE_ONE_ROUNDS {
        // proximal term anchored at the previous round's point
        let mut f = DVector::zeros(n + 1);
        f.rows_mut(0, n).copy_from(&-&z);
        f[n] = 1.0;
        let t0 = (&rows.columns(0, n) * &z - &rhs).iter().fold(0.0_f64, |a, &r| a.max(r)).max(0.0);
        let start = z.clone().insert_row(n, t0);
        let core = Core {
            h: &h,
            coupled: coupled.clone(),
            f: &f,
            rows: &rows,
            rhs: &rhs,
            n_eq: 0,
            lower: &lower,
            upper: &upper,
            feas: 0.01 * feas,
            optimality: 1e-12,
            limit,
        };
        let state = core.initial_state(&start);
        let out = core.run(start, state)?;
        z = out.z.rows(0, n).into_owned();
        let violation = qp.violation(&z);
        if violation <= feas {
            return Ok(Some(z));
        }
        if violation >= best * (1.0 - 1e-6) {
            break;
        }
        best = violation;
    }
    Ok(None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Debug, Clone)]
struct State {
    /// Working rows; the first `n_eq` are the equalities.
    working: Vec<usize>,
    bounds: Vec<Bound>,
}

struct Outcome {
    z: DVector<f64>,
    state: State,
    /// Multipliers aligned with `state.working`.
    row_duals: Vec<f64>,
    /// Bound multipliers (non-negative), per variable.
    bound_duals: Vec<f64>,
    iterations: usize,
    converged: bool,
}

struct Core<'a> {
    h: &'a DMatrix<f64>,
    coupled: Vec<bool>,
    f: &'a DVector<f64>,
    rows: &'a DMatrix<f64>,
    rhs: &'a DVector<f64>,
    n_eq: usize,
    lower: &'a DVector<f64>,
    upper: &'a DVector<f64>,
    feas: f64,
    optimality: f64,
    limit: usize,
}

struct Step {
    p: DVector<f64>,
    row_duals: Vec<f64>,
    /// Gradient of the Lagrangian restricted to working rows, used for the
    /// bound multipliers.
    residual: DVector<f64>,
}

impl Core<'_> {
    fn n(&self) -> usize {
        self.f.len()
    }

    fn initial_state(&self, _z: &DVector<f64>) -> State {
        State {
            working: (0..self.n_eq).collect(),
            bounds: vec![Bound::Free; self.n()],
        }
    }

    /// Adds hinted constraints that are tight at `z`.
    fn seed(&self, state: &mut State, z: &DVector<f64>, hint: &ActiveSet) {
        let tight = self.feas.max(1e-12);
        for &j in &hint.at_lower {
            if j < self.n() && (z[j] - self.lower[j]).abs() <= tight {
                state.bounds[j] = Bound::Lower;
            }
        }
        for &j in &hint.at_upper {
            if j < self.n() && (z[j] - self.upper[j]).abs() <= tight && state.bounds[j] == Bound::Free {
                state.bounds[j] = Bound::Upper;
            }
        }
        for &i in &hint.rows {
            let r = self.n_eq + i;
            if r < self.rows.nrows() && (self.rows.row(r).dot(&z.transpose()) - self.rhs[r]).abs() <= tight {
                state.working.push(r);
            }
        }
    }

    /// Equality-constrained step from `z` on the current working set.
    fn step(&self, z: &DVector<f64>, state: &State) -> Result<Step> {
        let n = self.n();
        let free: Vec<usize> = (0..n).filter(|&j| state.bounds[j] == Bound::Free).collect();
        let g = self.h * z + self.f;
        let k = state.working.len();
        let nf = free.len();
        let mut p = DVector::zeros(n);
        let mut lambda = DVector::zeros(k);
        if nf > 0 {
            // coupled variables first: only that block needs a dense factor
            let order: Vec<usize> = free
                .iter()
                .filter(|&&j| self.coupled[j])
                .chain(free.iter().filter(|&&j| !self.coupled[j]))
                .copied()
                .collect();
            let factor = Factor::new(self.h, &order, free.iter().filter(|&&j| self.coupled[j]).count())?;
            let mut u = DMatrix::from_fn(nf, 1, |a, _| g[order[a]]);
            factor.solve_lower(&mut u)?;
            let mut v = u.clone();
            if k > 0 {
                let mut y = DMatrix::from_fn(nf, k, |a, r| self.rows[(state.working[r], order[a])]);
                factor.solve_lower(&mut y)?;
                let m = y.transpose() * &y;
                let rhs = -(y.transpose() * &u).column(0);
                lambda = solve_spd(m, &rhs)?;
                v += &y * &lambda;
            }
            factor.solve_upper(&mut v)?;
            for (a, &j) in order.iter().enumerate() {
                p[j] = -v[a];
            }
        }
        let mut residual = g;
        for (r, &row) in state.working.iter().enumerate() {
            residual += self.rows.row(row).transpose() * lambda[r];
        }
        Ok(Step {
            p,
            row_duals: lambda.iter().copied().collect(),
            residual,
        })
    }

    fn run(&self, mut z: DVector<f64>, mut state: State) -> Result<Outcome> {
        let n = self.n();
        // an unblocked full step lands on the working-set minimizer
        let mut at_minimizer = false;
        for iteration in 0..self.limit {
            let step = self.step(&z, &state)?;
            let zscale = 1.0 + z.amax();
            let gscale = 1.0 + self.f.amax() + (self.h * &z).amax();
            // with flat curvature p carries rounding far above its true size;
            // the free part of the Lagrangian gradient does not
            let reduced = (0..n)
                .filter(|&j| state.bounds[j] == Bound::Free)
                .fold(0.0_f64, |m, j| m.max(step.residual[j].abs()));
            let lam_scale: f64 = step
                .row_duals
                .iter()
                .zip(&state.working)
                .map(|(l, &r)| l.abs() * self.rows.row(r).amax())
                .sum();
            if at_minimizer || step.p.amax() <= 1e-12 * zscale || reduced <= 1e-12 * (gscale + lam_scale) {
                at_minimizer = false;
                // stationary on the working set: check multiplier signs
                let cut = -self.optimality * gscale;
                let mut worst: Option<(f64, Drop)> = None;
                for (r, &lam) in step.row_duals.iter().enumerate().skip(self.n_eq) {
                    if lam < cut && worst.as_ref().is_none_or(|(w, _)| lam < *w) {
                        worst = Some((lam, Drop::Row(r)));
                    }
                }
                for j in 0..n {
                    let mu = bound_dual(state.bounds[j], step.residual[j]);
                    if mu < cut && worst.as_ref().is_none_or(|(w, _)| mu < *w) {
                        worst = Some((mu, Drop::Bound(j)));
                    }
                }
                match worst {
                    None => {
                        let bound_duals = (0..n).map(|j| bound_dual(state.bounds[j], step.residual[j]).max(0.0)).collect();
                        return Ok(Outcome {
                            z,
                            state,
                            row_duals: step.row_duals,
                            bound_duals,
                            iterations: iteration,
                            converged: true,
                        });
                    }
                    Some((_, Drop::Row(r))) => {
                        state.working.remove(r);
                    }
                    Some((_, Drop::Bound(j))) => state.bounds[j] = Bound::Free,
                }
                continue;
            }
            // ratio test
            let mut alpha = 1.0;
            let mut block: Option<Block> = None;
            for r in self.n_eq..self.rows.nrows() {
                if state.working.contains(&r) {
                    continue;
                }
                let row = self.rows.row(r);
                let ap = row.dot(&step.p.transpose());
                if ap <= 1e-14 * row.amax() * step.p.amax() {
                    continue;
                }
                let slack = (self.rhs[r] - row.dot(&z.transpose())).max(0.0);
                let t = slack / ap;
                if t < alpha {
                    alpha = t;
                    block = Some(Block::Row(r));
                }
            }
            for j in 0..n {
                if state.bounds[j] != Bound::Free || step.p[j] == 0.0 {
                    continue;
                }
                let (t, side) = if step.p[j] > 0.0 {
                    ((self.upper[j] - z[j]).max(0.0) / step.p[j], Bound::Upper)
                } else {
                    ((self.lower[j] - z[j]).min(0.0) / step.p[j], Bound::Lower)
                };
                if t < alpha {
                    alpha = t;
                    block = Some(Block::Bound(j, side));
                }
            }
            z += &step.p * alpha;
            at_minimizer = block.is_none();
            match block {
                Some(Block::Row(r)) => state.working.push(r),
                Some(Block::Bound(j, side)) => {
                    z[j] = if side == Bound::Upper { self.upper[j] } else { self.lower[j] };
                    state.bounds[j] = side;
                }
                None => {}
            }
        }
        let step = self.step(&z, &state)?;
        let bound_duals = (0..n).map(|j| bound_dual(state.bounds[j], step.residual[j]).max(0.0)).collect();
        Ok(Outcome {
            z,
            state,
            row_duals: step.row_duals,
            bound_duals,
            iterations: self.limit,
            converged: false,
        })
    }
}

enum Drop {
    Row(usize),
    Bound(usize),
}

enum Block {
    Row(usize),
    Bound(usize, Bound),
}

/// Multiplier of an active bound given the Lagrangian gradient without it.
fn bound_dual(bound: Bound, residual: f64) -> f64 {
    match bound {
        Bound::Free => 0.0,
        Bound::Lower => residual,
        Bound::Upper => -residual,
    }
}

/// Cholesky factor of a free Hessian block ordered as [coupled | diagonal]:
/// a dense factor for the coupled part and square roots for the rest.
struct Factor {
    dense: DMatrix<f64>,
    sqrt_diag: Vec<f64>,
}

impl Factor {
    fn new(h: &DMatrix<f64>, order: &[usize], coupled: usize) -> Result<Self> {
        let not_pd = || Error::numerical("qp", "free-variable hessian block is not positive definite");
        let dense = if coupled > 0 {
            let block = DMatrix::from_fn(coupled, coupled, |a, b| h[(order[a], order[b])]);
            Cholesky::new(block).ok_or_else(not_pd)?.unpack()
        } else {
            DMatrix::zeros(0, 0)
        };
        let sqrt_diag = order[coupled..]
            .iter()
            .map(|&j| if h[(j, j)] > 0.0 { Ok(h[(j, j)].sqrt()) } else { Err(not_pd()) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dense, sqrt_diag })
    }

    /// x ← L⁻¹x.
    fn solve_lower(&self, x: &mut DMatrix<f64>) -> Result<()> {
        let nd = self.dense.nrows();
        if nd > 0 && !self.dense.solve_lower_triangular_mut(&mut x.rows_mut(0, nd)) {
            return Err(Error::numerical("qp", "triangular solve failed"));
        }
        for (i, d) in self.sqrt_diag.iter().enumerate() {
            x.row_mut(nd + i).unscale_mut(*d);
        }
        Ok(())
    }

    /// x ← L⁻ᵀx.
    fn solve_upper(&self, x: &mut DMatrix<f64>) -> Result<()> {
        let nd = self.dense.nrows();
        if nd > 0 && !self.dense.tr_solve_lower_triangular_mut(&mut x.rows_mut(0, nd)) {
            return Err(Error::numerical("qp", "triangular solve failed"));
        }
        for (i, d) in self.sqrt_diag.iter().enumerate() {
            x.row_mut(nd + i).unscale_mut(*d);
        }
        Ok(())
    }
}

/// Variables whose Hessian row has an off-diagonal entry.
fn coupling(h: &DMatrix<f64>) -> Vec<bool> {
    (0..h.nrows())
        .map(|j| (0..h.ncols()).any(|k| k != j && h[(j, k)] != 0.0))
        .collect()
}

fn solve_spd(m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(c) = Cholesky::<f64, Dyn>::new(m.clone()) {
        return Ok(c.solve(rhs));
    }
    // nearly dependent working rows
    let k = m.nrows();
    let shift = 1e-13 * m.diagonal().amax().max(1e-300);
    Cholesky::new(m + DMatrix::identity(k, k) * shift)
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::numerical("qp", "working constraints are linearly dependent"))
}

fn finish(qp: &QuadraticProgram, eq_keep: &[usize], out: Outcome, regularized: bool) -> QpSolution {
    let n = qp.dim();
    let n_eq = eq_keep.len();
    let mut ineq_duals = DVector::zeros(qp.a.nrows());
    let mut eq_duals = DVector::zeros(qp.c.nrows());
    let mut active = ActiveSet::default();
    for (r, &row) in out.state.working.iter().enumerate() {
        if row < n_eq {
            eq_duals[eq_keep[row]] = out.row_duals[r];
        } else {
            ineq_duals[row - n_eq] = out.row_duals[r].max(0.0);
            active.rows.push(row - n_eq);
        }
    }
    active.rows.sort_unstable();
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    for j in 0..n {
        match out.state.bounds[j] {
            Bound::Lower => {
                lower_duals[j] = out.bound_duals[j];
                active.at_lower.push(j);
            }
            Bound::Upper => {
                upper_duals[j] = out.bound_duals[j];
                active.at_upper.push(j);
            }
            Bound::Free => {}
        }
    }
    let z = out.z;
    let kkt = kkt_residuals(qp, &z, &ineq_duals, &eq_duals, &lower_duals, &upper_duals);
    QpSolution {
        objective: qp.objective(&z),
        status: if out.converged { QpStatus::Optimal } else { QpStatus::IterationLimit },
        z,
        ineq_duals,
        eq_duals,
        lower_duals,
        upper_duals,
        active,
        iterations: out.iterations,
        regularized,
        kkt,
    }
}

/// KKT residuals of a candidate primal-dual pair.
pub fn kkt_residuals(
    qp: &QuadraticProgram,
    z: &DVector<f64>,
    ineq_duals: &DVector<f64>,
    eq_duals: &DVector<f64>,
    lower_duals: &DVector<f64>,
    upper_duals: &DVector<f64>,
) -> KktResiduals {
    let grad = &qp.hessian * z + &qp.linear + qp.a.transpose() * ineq_duals + qp.c.transpose() * eq_duals
        - lower_duals
        + upper_duals;
    let slack = &qp.a * z - &qp.b;
    let mut comp = 0.0_f64;
    for i in 0..slack.len() {
        comp = comp.max((ineq_duals[i] * slack[i]).abs());
    }
    for j in 0..z.len() {
        if lower_duals[j] != 0.0 {
            comp = comp.max((lower_duals[j] * (z[j] - qp.lower[j])).abs());
        }
        if upper_duals[j] != 0.0 {
            comp = comp.max((upper_duals[j] * (qp.upper[j] - z[j])).abs());
        }
    }
    let dual = ineq_duals
        .iter()
        .chain(lower_duals.iter())
        .chain(upper_duals.iter())
        .fold(0.0_f64, |m, &v| m.max(-v));
    KktResiduals {
        stationarity: grad.amax(),
        primal: qp.violation(z),
        dual,
        complementarity: comp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tol() -> QpTolerances {
        QpTolerances::default()
    }

    #[test]
    fn unconstrained_minimum_is_origin() {
        let qp = QuadraticProgram::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z.amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn active_inequality() {
        // (z − 1)² = z² − 2z + 1
        let qp = QuadraticProgram::new(DMatrix::from_element(1, 1, 2.0), DVector::from_element(1, -2.0))
            .with_inequalities(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.objective + 1.0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ineq_duals[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn projection_onto_half_plane() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-4.0, -4.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 2.0));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.z[1], 1.0, epsilon = 1e-12);
        assert!(s.kkt.max() <= 1e-9);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        // z ≤ 0 as a row, z ≥ 1 as a bound
        let qp = QuadraticProgram::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_inequalities(DMatrix::from_element(1, 1, 1.0), DVector::zeros(1))
            .with_bounds(DVector::from_element(1, 1.0), DVector::from_element(1, f64::INFINITY));
        assert_eq!(solve_qp(&qp, &tol()).unwrap().status, QpStatus::Infeasible);
        // both as rows
        let rows = QuadraticProgram::new(DMatrix::identity(1, 1), DVector::zeros(1))
            .with_inequalities(DMatrix::from_column_slice(2, 1, &[1.0, -1.0]), DVector::from_vec(vec![0.0, -1.0]));
        assert_eq!(solve_qp(&rows, &tol()).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn equalities_and_bounds() {
        // min ‖z‖² s.t. z₁ + z₂ + z₃ = 3, z₃ ≤ 0.5
        let qp = QuadraticProgram::new(DMatrix::identity(3, 3) * 2.0, DVector::zeros(3))
            .with_equalities(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]), DVector::from_element(1, 3.0))
            .with_bounds(DVector::from_element(3, f64::NEG_INFINITY), DVector::from_vec(vec![10.0, 10.0, 0.5]));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.25, epsilon = 1e-10);
        assert_abs_diff_eq!(s.z[1], 1.25, epsilon = 1e-10);
        assert_abs_diff_eq!(s.z[2], 0.5, epsilon = 1e-10);
        assert!(s.kkt.max() <= 1e-9, "{:?}", s.kkt);
    }

    #[test]
    fn redundant_equalities_are_tolerated() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2), DVector::zeros(2))
            .with_equalities(c, DVector::from_vec(vec![1.0, 2.0]));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.5, epsilon = 1e-10);
        assert!(s.kkt.max() <= 1e-9);
    }

    #[test]
    fn singular_hessian_is_regularized() {
        // linear objective in z₂, bounded by the box
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let qp = QuadraticProgram::new(h, DVector::from_vec(vec![-1.0, 1.0]))
            .with_bounds(DVector::from_element(2, -1.0), DVector::from_element(2, 1.0));
        let s = solve_qp(&qp, &tol()).unwrap();
        assert!(s.regularized);
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(s.z[1], -1.0, epsilon = 1e-8);
    }

    #[test]
    fn indefinite_hessian_is_rejected() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let qp = QuadraticProgram::new(h, DVector::zeros(2));
        assert!(matches!(solve_qp(&qp, &tol()), Err(Error::Domain(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2), DVector::zeros(3));
        assert!(matches!(solve_qp(&qp, &tol()), Err(Error::Domain(_))));
    }

    #[test]
    fn warm_start_reuses_active_set() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2) * 2.0, DVector::from_vec(vec![-4.0, -4.0]))
            .with_inequalities(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 2.0));
        let cold = solve_qp(&qp, &tol()).unwrap();
        let warm = WarmStart {
            z: cold.z.clone(),
            active: cold.active.clone(),
        };
        let again = solve_qp_warm(&qp, &tol(), Some(&warm)).unwrap();
        assert_eq!(again.iterations, 0);
        assert_abs_diff_eq!((again.z - cold.z).amax(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic() {
        let qp = QuadraticProgram::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, -3.0]))
            .with_inequalities(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 1.0]), DVector::from_vec(vec![1.0, 0.5]));
        let a = solve_qp(&qp, &tol()).unwrap();
        let b = solve_qp(&qp, &tol()).unwrap();
        assert_eq!(a, b);
    }
}
