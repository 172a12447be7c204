//! Newton-system assembly and factorization.
//!
//! The structured path splits the Hessian into a sparse part `S` and a
//! low-rank part `G diag(w) G^T` built from constraints with dense gradients.
//! `S` is eliminated through a greedy independent set `D` of variables whose
//! rows only couple to the remaining core `C`, which leaves a small dense
//! Schur complement on `C`. The low-rank part is handled with the Woodbury
//! identity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::collections::HashMap;

use super::function::HessianBlock;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    Dense,
    Structured,
    /// Dense below [`AUTO_DENSE_LIMIT`] variables, structured above.
    #[default]
    Auto,
}

pub const AUTO_DENSE_LIMIT: usize = 150;

pub(crate) enum Assembly {
    Dense(DMatrix<f64>),
    Structured(SparseParts),
}

pub(crate) struct SparseParts {
    n: usize,
    diag: Vec<f64>,
    off: HashMap<(usize, usize), f64>,
    lowrank: Vec<(Vec<(usize, f64)>, f64)>,
    dense_threshold: usize,
}

impl Assembly {
    pub fn new(n: usize, solver: LinearSolver) -> Self {
        let structured = match solver {
            LinearSolver::Dense => false,
            LinearSolver::Structured => true,
            LinearSolver::Auto => n > AUTO_DENSE_LIMIT,
        };
        if structured {
            Assembly::Structured(SparseParts {
                n,
                diag: vec![0.0; n],
                off: HashMap::new(),
                lowrank: Vec::new(),
                dense_threshold: (n / 8).max(8),
            })
        } else {
            Assembly::Dense(DMatrix::zeros(n, n))
        }
    }

    /// Adds `w * g g^T`.
    pub fn add_outer(&mut self, g: &[(usize, f64)], w: f64) {
        match self {
            Assembly::Dense(h) => {
                for &(i, a) in g {
                    for &(j, b) in g {
                        h[(i, j)] += w * a * b;
                    }
                }
            }
            Assembly::Structured(s) => {
                if g.len() > s.dense_threshold {
                    s.lowrank.push((g.to_vec(), w));
                } else {
                    for &(i, a) in g {
                        for &(j, b) in g {
                            s.add(i, j, w * a * b);
                        }
                    }
                }
            }
        }
    }

    pub fn add_block(&mut self, block: &HessianBlock, w: f64) {
        match block {
            HessianBlock::Diagonal(d) => {
                for &(i, v) in d {
                    self.add_entry(i, i, w * v);
                }
            }
            HessianBlock::Dense { indices, matrix } => {
                for (a, &i) in indices.iter().enumerate() {
                    for (b, &j) in indices.iter().enumerate() {
                        self.add_entry(i, j, w * matrix[(a, b)]);
                    }
                }
            }
        }
    }

    fn add_entry(&mut self, i: usize, j: usize, v: f64) {
        match self {
            Assembly::Dense(h) => h[(i, j)] += v,
            Assembly::Structured(s) => s.add(i, j, v),
        }
    }

    pub fn factor(self) -> Result<Factor> {
        match self {
            Assembly::Dense(h) => Ok(Factor::Dense(cholesky_regularized(h)?)),
            Assembly::Structured(s) => Ok(Factor::Structured(Box::new(StructuredFactor::new(s)?))),
        }
    }
}

impl SparseParts {
    /// Symmetric entry; each unordered off-diagonal pair is visited twice by
    /// the callers, so half the value goes to the stored upper entry.
    fn add(&mut self, i: usize, j: usize, v: f64) {
        if i == j {
            self.diag[i] += v;
        } else {
            *self.off.entry((i.min(j), i.max(j))).or_insert(0.0) += 0.5 * v;
        }
    }

    fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::from_iterator(self.n, self.diag.iter().zip(x.iter()).map(|(d, v)| d * v));
        for (&(i, j), &v) in &self.off {
            y[i] += v * x[j];
            y[j] += v * x[i];
        }
        for (g, w) in &self.lowrank {
            let s: f64 = g.iter().map(|&(i, a)| a * x[i]).sum();
            for &(i, a) in g {
                y[i] += w * s * a;
            }
        }
        y
    }
}

fn cholesky_regularized(mut h: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = h.nrows();
    if let Some(c) = Cholesky::new(h.clone()) {
        return Ok(c);
    }
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
    let mut delta = 1e-12 * scale;
    for _ in 0..6 {
        for i in 0..n {
            h[(i, i)] += delta;
        }
        if let Some(c) = Cholesky::new(h.clone()) {
            return Ok(c);
        }
        delta *= 100.0;
    }
    Err(Error::Numerical("Newton matrix is not positive definite".into()))
}

pub(crate) enum Factor {
    Dense(Cholesky<f64, Dyn>),
    Structured(Box<StructuredFactor>),
}

impl Factor {
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Factor::Dense(c) => c.solve(rhs),
            Factor::Structured(s) => s.solve_refined(rhs),
        }
    }
}

pub(crate) struct StructuredFactor {
    parts: SparseParts,
    /// Position of each variable in the core, or `None` when eliminated.
    core_pos: Vec<Option<usize>>,
    core: Vec<usize>,
    eliminated: Vec<usize>,
    /// For each eliminated variable: coupling to core positions.
    couplings: Vec<Vec<(usize, f64)>>,
    schur: Cholesky<f64, Dyn>,
    /// `S^{-1} G` and the Cholesky factor of `diag(1/w) + G^T S^{-1} G`.
    z: DMatrix<f64>,
    capacitance: Option<Cholesky<f64, Dyn>>,
    reg: f64,
}

impl StructuredFactor {
    fn new(parts: SparseParts) -> Result<Self> {
        let n = parts.n;
        let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for (&(i, j), &v) in &parts.off {
            if v != 0.0 {
                adjacency[i].push((j, v));
                adjacency[j].push((i, v));
            }
        }
        let max_diag = parts.diag.iter().fold(0.0f64, |a, &d| a.max(d.abs()));
        let reg = 1e-14 * (1.0 + max_diag);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (adjacency[i].len(), i));
        let mut blocked = vec![false; n];
        let mut in_d = vec![false; n];
        for &i in &order {
            if !blocked[i] && parts.diag[i] > 1e3 * reg {
                in_d[i] = true;
                for &(j, _) in &adjacency[i] {
                    blocked[j] = true;
                }
            }
        }
        let core: Vec<usize> = (0..n).filter(|&i| !in_d[i]).collect();
        let eliminated: Vec<usize> = (0..n).filter(|&i| in_d[i]).collect();
        let mut core_pos = vec![None; n];
        for (p, &i) in core.iter().enumerate() {
            core_pos[i] = Some(p);
        }
        let nc = core.len();
        let mut k = DMatrix::zeros(nc, nc);
        for (p, &i) in core.iter().enumerate() {
            k[(p, p)] = parts.diag[i] + reg;
        }
        for (&(i, j), &v) in &parts.off {
            if let (Some(a), Some(b)) = (core_pos[i], core_pos[j]) {
                k[(a, b)] += v;
                k[(b, a)] += v;
            }
        }
        let couplings: Vec<Vec<(usize, f64)>> = eliminated
            .iter()
            .map(|&d| {
                adjacency[d]
                    .iter()
                    .map(|&(j, v)| (core_pos[j].expect("independent set"), v))
                    .collect()
            })
            .collect();
        for (e, &d) in eliminated.iter().enumerate() {
            let sdd = parts.diag[d] + reg;
            for &(a, va) in &couplings[e] {
                for &(b, vb) in &couplings[e] {
                    k[(a, b)] -= va * vb / sdd;
                }
            }
        }
        let schur = cholesky_regularized(k)?;

        let mut f = Self {
            parts,
            core_pos,
            core,
            eliminated,
            couplings,
            schur,
            z: DMatrix::zeros(0, 0),
            capacitance: None,
            reg,
        };
        let r = f.parts.lowrank.len();
        if r > 0 {
            let mut z = DMatrix::zeros(n, r);
            for (c, (g, _)) in f.parts.lowrank.iter().enumerate() {
                let mut col = DVector::zeros(n);
                for &(i, a) in g {
                    col[i] += a;
                }
                z.set_column(c, &f.solve_sparse(&col));
            }
            let mut cap = DMatrix::zeros(r, r);
            for (a, (ga, wa)) in f.parts.lowrank.iter().enumerate() {
                cap[(a, a)] += 1.0 / wa;
                for b in 0..r {
                    cap[(a, b)] += ga.iter().map(|&(i, v)| v * z[(i, b)]).sum::<f64>();
                }
            }
            let cap = 0.5 * (&cap + cap.transpose());
            f.capacitance = Some(cholesky_regularized(cap)?);
            f.z = z;
        }
        Ok(f)
    }

    fn solve_sparse(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut rc = DVector::from_iterator(self.core.len(), self.core.iter().map(|&i| rhs[i]));
        for (e, &d) in self.eliminated.iter().enumerate() {
            let ratio = rhs[d] / (self.parts.diag[d] + self.reg);
            for &(c, v) in &self.couplings[e] {
                rc[c] -= v * ratio;
            }
        }
        let yc = self.schur.solve(&rc);
        let mut y = DVector::zeros(rhs.len());
        for (p, &i) in self.core.iter().enumerate() {
            y[i] = yc[p];
        }
        for (e, &d) in self.eliminated.iter().enumerate() {
            let coupled: f64 = self.couplings[e].iter().map(|&(c, v)| v * yc[c]).sum();
            y[d] = (rhs[d] - coupled) / (self.parts.diag[d] + self.reg);
        }
        debug_assert!(self.core_pos.len() == rhs.len());
        y
    }

    fn solve_once(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let y = self.solve_sparse(rhs);
        match &self.capacitance {
            None => y,
            Some(cap) => {
                let gty = DVector::from_iterator(
                    self.parts.lowrank.len(),
                    self.parts.lowrank.iter().map(|(g, _)| g.iter().map(|&(i, a)| a * y[i]).sum::<f64>()),
                );
                y - &self.z * cap.solve(&gty)
            }
        }
    }

    fn solve_refined(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut y = self.solve_once(rhs);
        let residual = rhs - self.parts.matvec(&y);
        y += self.solve_once(&residual);
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random SPD system with the sparse-plus-low-rank shape of the codeword problem.
    fn build(solver: LinearSolver, seed: u64) -> (Assembly, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let core = 6;
        let pairs = 40;
        let n = core + pairs;
        let mut asm = Assembly::new(n, solver);
        for p in 0..pairs {
            let a = rng.random_range(0..core);
            let b = rng.random_range(0..core);
            let v = core + p;
            asm.add_outer(&[(v, 1.0), (a, -1.0)], rng.random_range(0.1..3.0));
            asm.add_outer(&[(v, 1.0), (b, -1.0)], rng.random_range(0.1..3.0));
            asm.add_outer(&[(v, 1.0)], rng.random_range(0.1..3.0));
        }
        for i in 0..core {
            asm.add_outer(&[(i, 1.0)], 0.5);
        }
        for _ in 0..3 {
            let g: Vec<(usize, f64)> = (0..n).map(|i| (i, rng.random_range(-1.0..1.0))).collect();
            asm.add_outer(&g, rng.random_range(0.5..2.0));
        }
        asm.add_block(
            &HessianBlock::Dense {
                indices: vec![0, 1],
                matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
            },
            2.0,
        );
        (asm, n)
    }

    #[test]
    fn structured_matches_dense() {
        for seed in 0..5 {
            let (dense, n) = build(LinearSolver::Dense, seed);
            let (structured, _) = build(LinearSolver::Structured, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let rhs = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let a = dense.factor().unwrap().solve(&rhs);
            let b = structured.factor().unwrap().solve(&rhs);
            assert!((&a - &b).norm() <= 1e-10 * a.norm(), "seed {seed}: {}", (&a - &b).norm());
        }
    }
}
