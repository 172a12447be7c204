//! Log-barrier interior-point solver for smooth convex problems
//!
//! ```text
//! maximize f0(x)  s.t.  f_i(x) <= 0,  A x = b
//! ```
//!
//! with `f0` concave and every `f_i` convex. Complex unknowns are stacked as
//! interleaved `(re, im)` pairs by the callers.

mod function;
mod linalg;

pub use function::{AffineFunction, HessianBlock, Log1pSum, QuadraticFunction, SmoothFunction, SparseVec};
pub use linalg::{LinearSolver, AUTO_DENSE_LIMIT};

use function::{dot_sparse, Shifted};
use linalg::Assembly;
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

use crate::error::{Error, Result};

pub struct ConvexProblem {
    pub dim: usize,
    pub objective: Box<dyn SmoothFunction>,
    pub constraints: Vec<Box<dyn SmoothFunction>>,
    /// Sparse rows of `A`.
    pub eq_rows: Vec<SparseVec>,
    pub eq_rhs: Vec<f64>,
}

impl ConvexProblem {
    pub fn new(dim: usize, objective: Box<dyn SmoothFunction>) -> Self {
        Self {
            dim,
            objective,
            constraints: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
        }
    }

    pub fn constrain(&mut self, f: impl SmoothFunction + 'static) {
        self.constraints.push(Box::new(f));
    }

    pub fn equality(&mut self, row: SparseVec, rhs: f64) {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
    }

    pub fn bound(&mut self, i: usize, lo: Option<f64>, hi: Option<f64>) {
        if let Some(lo) = lo {
            self.constrain(AffineFunction::lower_bound(i, lo));
        }
        if let Some(hi) = hi {
            self.constrain(AffineFunction::upper_bound(i, hi));
        }
    }

    /// Largest constraint value at `x` (negative means strictly feasible).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.value(x))
            .fold(f64::NEG_INFINITY, |a, v| if v.is_nan() { f64::INFINITY } else { a.max(v) })
    }

    pub fn eq_residual(&self, x: &[f64]) -> f64 {
        self.eq_rows
            .iter()
            .zip(&self.eq_rhs)
            .map(|(r, b)| (dot_sparse(r, x) - b).abs())
            .fold(0.0, f64::max)
    }

    /// One-line size summary for debug logs.
    pub fn summary(&self) -> String {
        let nnz: usize = self.constraints.iter().map(|c| c.gradient(&vec![0.0; self.dim]).len()).sum();
        format!(
            "dim {} | {} inequalities ({} gradient nonzeros at 0) | {} equalities",
            self.dim,
            self.constraints.len(),
            nnz,
            self.eq_rows.len()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target duality gap `m / t`.
    pub tol: f64,
    pub newton_per_stage: usize,
    pub max_newton: usize,
    /// Barrier growth factor per stage.
    pub mu: f64,
    pub t0: f64,
    pub linear_solver: LinearSolver,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            newton_per_stage: 50,
            max_newton: 2000,
            mu: 10.0,
            t0: 1.0,
            linear_solver: LinearSolver::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktResiduals {
    /// `||grad f0 - sum lambda_i grad f_i - A^T nu||_inf / (1 + ||grad f0||_inf)`.
    pub stationarity: f64,
    /// `max(0, max_i f_i, ||A x - b||_inf)`.
    pub primal: f64,
    /// Sum of `lambda_i * (-f_i)`, i.e. `m / t`.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub phase_one_iterations: usize,
    pub wall_ms: f64,
    /// Objective at the end of every barrier stage.
    pub stage_objectives: Vec<f64>,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

enum Outcome {
    Converged,
    IterationLimit,
    Stopped,
}

struct Barrier<'a> {
    dim: usize,
    objective: &'a dyn SmoothFunction,
    constraints: Vec<&'a dyn SmoothFunction>,
    eq_rows: &'a [SparseVec],
    opts: SolverOptions,
}

struct StageState {
    x: Vec<f64>,
    t: f64,
    iterations: usize,
    nu: DVector<f64>,
    stage_objectives: Vec<f64>,
}

impl Barrier<'_> {
    fn feasible_values(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut vals = Vec::with_capacity(self.constraints.len());
        for c in &self.constraints {
            let v = c.value(x);
            if !(v < 0.0) {
                return None;
            }
            vals.push(v);
        }
        Some(vals)
    }

    fn psi(&self, x: &[f64], t: f64) -> f64 {
        let f0 = self.objective.value(x);
        if !f0.is_finite() {
            return f64::INFINITY;
        }
        match self.feasible_values(x) {
            None => f64::INFINITY,
            Some(vals) => -t * f0 - vals.iter().map(|v| (-v).ln()).sum::<f64>(),
        }
    }

    /// One Newton direction of the centering problem at `x`.
    /// Returns `(dx, decrement^2, nu)`.
    fn newton_step(&self, x: &[f64], t: f64) -> Result<(DVector<f64>, f64, DVector<f64>)> {
        let n = self.dim;
        let mut grad = DVector::zeros(n);
        let mut asm = Assembly::new(n, self.opts.linear_solver);
        for &(i, g) in &self.objective.gradient(x) {
            grad[i] -= t * g;
        }
        if let Some(h) = self.objective.hessian(x) {
            asm.add_block(&h, -t);
        }
        for c in &self.constraints {
            let f = c.value(x);
            let g = c.gradient(x);
            let inv = 1.0 / (-f);
            for &(i, gi) in &g {
                grad[i] += inv * gi;
            }
            asm.add_outer(&g, inv * inv);
            if let Some(h) = c.hessian(x) {
                asm.add_block(&h, inv);
            }
        }
        let factor = asm.factor()?;
        let hinv_g = factor.solve(&grad);
        let p = self.eq_rows.len();
        let (dx, nu) = if p == 0 {
            (-hinv_g, DVector::zeros(0))
        } else {
            // Schur complement on the equality multipliers
            let cols: Vec<DVector<f64>> = self.eq_rows.iter().map(|r| factor.solve(&sparse_to_dense(r, n))).collect();
            let mut s = DMatrix::zeros(p, p);
            let mut rhs = DVector::zeros(p);
            for (a, ra) in self.eq_rows.iter().enumerate() {
                rhs[a] = -sparse_dot_dense(ra, &hinv_g);
                for (b, cb) in cols.iter().enumerate() {
                    s[(a, b)] = sparse_dot_dense(ra, cb);
                }
            }
            let s = 0.5 * (&s + s.transpose());
            let nu = s
                .clone()
                .cholesky()
                .map(|c| c.solve(&rhs))
                .or_else(|| s.lu().solve(&rhs))
                .ok_or_else(|| Error::Numerical("equality Schur complement is singular".into()))?;
            let mut dx = -hinv_g;
            for (b, cb) in cols.iter().enumerate() {
                dx -= cb * nu[b];
            }
            (dx, nu)
        };
        let dec2 = -grad.dot(&dx);
        if !dec2.is_finite() {
            return Err(Error::Numerical("non-finite Newton decrement".into()));
        }
        Ok((dx, dec2, nu))
    }

    /// Runs the barrier outer loop from a strictly feasible `x`.
    /// `stop` is checked after every accepted Newton step.
    fn run(&self, x0: Vec<f64>, stop: &dyn Fn(&[f64]) -> bool) -> (StageState, Result<Outcome>) {
        let m = self.constraints.len().max(1) as f64;
        let mut st = StageState {
            x: x0,
            t: self.opts.t0,
            iterations: 0,
            nu: DVector::zeros(self.eq_rows.len()),
            stage_objectives: Vec::new(),
        };
        loop {
            let mut stage_iters = 0;
            loop {
                if st.iterations >= self.opts.max_newton {
                    return (st, Ok(Outcome::IterationLimit));
                }
                let (dx, dec2, nu) = match self.newton_step(&st.x, st.t) {
                    Ok(v) => v,
                    Err(e) => return (st, Err(e)),
                };
                st.nu = nu;
                if dec2 / 2.0 <= 1e-10 {
                    break;
                }
                let psi0 = self.psi(&st.x, st.t);
                let slope = -dec2;
                let mut step = 1.0;
                let mut accepted = None;
                while step > 1e-14 {
                    let trial: Vec<f64> = st.x.iter().zip(dx.iter()).map(|(x, d)| x + step * d).collect();
                    let psi = self.psi(&trial, st.t);
                    if psi.is_finite() && psi <= psi0 + 0.01 * step * slope {
                        accepted = Some(trial);
                        break;
                    }
                    step *= 0.5;
                }
                st.iterations += 1;
                stage_iters += 1;
                match accepted {
                    Some(xn) => st.x = xn,
                    // no progress possible at this precision; treat as centered
                    None => break,
                }
                if stop(&st.x) {
                    return (st, Ok(Outcome::Stopped));
                }
                if stage_iters >= self.opts.newton_per_stage {
                    break;
                }
            }
            st.stage_objectives.push(self.objective.value(&st.x));
            if m / st.t <= self.opts.tol {
                return (st, Ok(Outcome::Converged));
            }
            st.t *= self.opts.mu;
        }
    }
}

fn sparse_to_dense(r: &[(usize, f64)], n: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    for &(i, a) in r {
        v[i] += a;
    }
    v
}

fn sparse_dot_dense(r: &[(usize, f64)], v: &DVector<f64>) -> f64 {
    r.iter().map(|&(i, a)| a * v[i]).sum()
}

/// Moves `x` onto `A x = b` along the least-norm correction.
fn project_equalities(p: &ConvexProblem, x: &mut [f64]) -> Result<()> {
    let m = p.eq_rows.len();
    if m == 0 || p.eq_residual(x) <= 1e-13 {
        return Ok(());
    }
    let rows: Vec<DVector<f64>> = p.eq_rows.iter().map(|r| sparse_to_dense(r, p.dim)).collect();
    let gram = DMatrix::from_fn(m, m, |a, b| rows[a].dot(&rows[b]));
    let resid = DVector::from_fn(m, |a, _| p.eq_rhs[a] - sparse_dot_dense(&p.eq_rows[a], &DVector::from_column_slice(x)));
    let y = gram
        .lu()
        .solve(&resid)
        .ok_or_else(|| Error::Numerical("equality rows are linearly dependent".into()))?;
    for (a, r) in rows.iter().enumerate() {
        for (xi, ri) in x.iter_mut().zip(r.iter()) {
            *xi += y[a] * ri;
        }
    }
    Ok(())
}

fn kkt(p: &ConvexProblem, x: &[f64], t: f64) -> KktResiduals {
    let n = p.dim;
    let g0 = sparse_to_dense(&p.objective.gradient(x), n);
    let mut r = g0.clone();
    let mut comp = 0.0;
    let mut max_f = 0.0f64;
    for c in &p.constraints {
        let f = c.value(x);
        max_f = max_f.max(f);
        let lambda = 1.0 / (t * (-f).max(1e-300));
        comp += lambda * (-f);
        for &(i, g) in &c.gradient(x) {
            r[i] -= lambda * g;
        }
    }
    if !p.eq_rows.is_empty() {
        let rows: Vec<DVector<f64>> = p.eq_rows.iter().map(|row| sparse_to_dense(row, n)).collect();
        let m = rows.len();
        let gram = DMatrix::from_fn(m, m, |a, b| rows[a].dot(&rows[b]));
        let rhs = DVector::from_fn(m, |a, _| rows[a].dot(&r));
        if let Some(nu) = gram.lu().solve(&rhs) {
            for (a, row) in rows.iter().enumerate() {
                r -= row * nu[a];
            }
        }
    }
    KktResiduals {
        stationarity: r.amax() / (1.0 + g0.amax()),
        primal: max_f.max(p.eq_residual(x)),
        complementarity: comp,
    }
}

/// Maximizes `p.objective` from `x0`, running a phase-one problem first when
/// `x0` is not strictly feasible.
pub fn solve_convex(p: &ConvexProblem, x0: &[f64], opts: &SolverOptions) -> SolveReport {
    let start = Instant::now();
    let finish = |status: SolveStatus, x: Vec<f64>, t: f64, iterations: usize, phase_one: usize, stages: Vec<f64>| {
        let objective = p.objective.value(&x);
        SolveReport {
            status,
            kkt: kkt(p, &x, t),
            objective,
            x,
            iterations,
            phase_one_iterations: phase_one,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            stage_objectives: stages,
        }
    };
    if x0.len() != p.dim {
        return finish(SolveStatus::NumericalFailure, vec![0.0; p.dim], 1.0, 0, 0, Vec::new());
    }
    let mut x = x0.to_vec();
    if project_equalities(p, &mut x).is_err() {
        return finish(SolveStatus::NumericalFailure, x, 1.0, 0, 0, Vec::new());
    }

    let mut phase_one = 0;
    let strictly_feasible = p.max_violation(&x) < 0.0 && p.objective.value(&x).is_finite();
    if !strictly_feasible {
        match phase_one_point(p, &x, opts) {
            Ok((xf, iters)) => {
                phase_one = iters;
                x = xf;
            }
            Err((xf, iters, status)) => return finish(status, xf, 1.0, iters, iters, Vec::new()),
        }
        if !p.objective.value(&x).is_finite() {
            return finish(SolveStatus::Infeasible, x, 1.0, phase_one, phase_one, Vec::new());
        }
    }

    let barrier = Barrier {
        dim: p.dim,
        objective: p.objective.as_ref(),
        constraints: p.constraints.iter().map(|c| c.as_ref()).collect(),
        eq_rows: &p.eq_rows,
        opts: *opts,
    };
    let (st, outcome) = barrier.run(x, &|_| false);
    let status = match outcome {
        Ok(Outcome::Converged) => SolveStatus::Optimal,
        Ok(Outcome::IterationLimit) => SolveStatus::IterationLimit,
        Ok(Outcome::Stopped) => unreachable!("phase two has no early stop"),
        Err(_) => SolveStatus::NumericalFailure,
    };
    finish(status, st.x, st.t, st.iterations + phase_one, phase_one, st.stage_objectives)
}

/// Minimizes a shared slack `s` with `f_i(x) <= s`, stopping as soon as `s < 0`.
#[allow(clippy::type_complexity)]
fn phase_one_point(
    p: &ConvexProblem,
    x0: &[f64],
    opts: &SolverOptions,
) -> std::result::Result<(Vec<f64>, usize), (Vec<f64>, usize, SolveStatus)> {
    let n = p.dim;
    let slack = n;
    let worst = p.max_violation(x0);
    if !worst.is_finite() {
        return Err((x0.to_vec(), 0, SolveStatus::NumericalFailure));
    }
    let objective = AffineFunction::new(vec![(slack, -1.0)], 0.0);
    let shifted: Vec<Shifted> = p.constraints.iter().map(|c| Shifted { inner: c.as_ref(), slack }).collect();
    // keeps the slack bounded below so every centering problem is bounded
    let floor = AffineFunction::new(vec![(slack, -1.0)], -1.0);
    let mut constraints: Vec<&dyn SmoothFunction> = shifted.iter().map(|s| s as &dyn SmoothFunction).collect();
    constraints.push(&floor);
    let eq_rows: Vec<SparseVec> = p.eq_rows.clone();
    let barrier = Barrier {
        dim: n + 1,
        objective: &objective,
        constraints,
        eq_rows: &eq_rows,
        opts: *opts,
    };
    let mut start = x0.to_vec();
    start.push(worst + 1.0 + 0.1 * worst.abs());
    let done = |z: &[f64]| z[slack] < 0.0;
    let (st, outcome) = barrier.run(start, &done);
    let mut x = st.x;
    let s = x.pop().unwrap_or(0.0);
    match outcome {
        Ok(Outcome::Stopped) => Ok((x, st.iterations)),
        _ if s < 0.0 && p.max_violation(&x) < 0.0 => Ok((x, st.iterations)),
        Ok(_) => Err((x, st.iterations, SolveStatus::Infeasible)),
        Err(_) => Err((x, st.iterations, SolveStatus::NumericalFailure)),
    }
}
