//! Codeword selection for fixed precoders.
//!
//! The selection `b` is a `T x M` row-stochastic matrix (tile, online word).
//! Flattening `a = t * M + m`, the composite channel of user `k` is
//! `sum_a b_a hbar_{a,k}` where `hbar` folds the direct link into tile 0
//! (rows of `b` sum to one, so the direct term appears exactly once). With
//! `s_a = hbar_{a,k}^H w / sigma`, every received power becomes
//!
//! ```text
//! |sum_a b_a s_a|^2 = sum_a beta_aa |s_a|^2 + sum_{a<c} beta_ac 2 Re(conj(s_a) s_c)
//! ```
//!
//! which is linear in the products `beta_ac = b_a b_c`. The products are
//! relaxed with McCormick (big-M) envelopes and stored for unordered pairs
//! `a <= c` only.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LOG2_E;

use crate::channel::ChannelSet;
use crate::convex::{
    solve_convex, AffineFunction, ConvexProblem, Log1pSum, QuadraticFunction, SolveStatus, SparseVec,
};
use crate::error::{Error, Result};
use crate::fbl::UrllcRequirement;
use crate::precoder::{product_upper_bound, solver_options, PrecoderSet};
use crate::scenario::{ActiveSetTable, SolverSettings};

pub fn num_pairs(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Packed index of the unordered pair `(a, c)` among `n` flat words.
pub fn pair_index(a: usize, c: usize, n: usize) -> usize {
    let (a, c) = if a <= c { (a, c) } else { (c, a) };
    a * n - a * (a + 1) / 2 + c
}

/// Relaxed or binary selection with its product tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodewordSelection {
    pub num_tiles: usize,
    pub num_words: usize,
    /// Row-major `T x M`.
    pub b: Vec<f64>,
    /// `beta[pair_index(a, c)]` for `a <= c`.
    pub beta: Vec<f64>,
    pub is_binary: bool,
}

impl CodewordSelection {
    /// One-hot selection of `chosen[t]` on every tile; `beta` is the exact outer product.
    pub fn from_indices(chosen: &[usize], num_words: usize) -> Result<Self> {
        if let Some(t) = chosen.iter().position(|&m| m >= num_words) {
            return Err(Error::OutOfRange(format!("tile {t} selects word {} of {num_words}", chosen[t])));
        }
        let mut b = vec![0.0; chosen.len() * num_words];
        for (t, &m) in chosen.iter().enumerate() {
            b[t * num_words + m] = 1.0;
        }
        let mut sel = Self::from_b(chosen.len(), num_words, b);
        sel.is_binary = true;
        Ok(sel)
    }

    /// Relaxed selection with `beta` set to the products `b_a b_c`.
    pub fn from_b(num_tiles: usize, num_words: usize, b: Vec<f64>) -> Self {
        let n = num_tiles * num_words;
        let mut beta = vec![0.0; num_pairs(n)];
        for a in 0..n {
            for c in a..n {
                beta[pair_index(a, c, n)] = b[a] * b[c];
            }
        }
        let is_binary = b.iter().all(|&v| v == 0.0 || v == 1.0) && row_sums_ok(&b, num_words, 0.0);
        Self {
            num_tiles,
            num_words,
            b,
            beta,
            is_binary,
        }
    }

    pub fn uniform(num_tiles: usize, num_words: usize) -> Self {
        Self::from_b(num_tiles, num_words, vec![1.0 / num_words as f64; num_tiles * num_words])
    }

    pub fn flat_len(&self) -> usize {
        self.num_tiles * self.num_words
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.b[t * self.num_words..(t + 1) * self.num_words]
    }

    pub fn beta_pair(&self, a: usize, c: usize) -> f64 {
        self.beta[pair_index(a, c, self.flat_len())]
    }

    /// Selected word per tile; errors unless every row is exactly one-hot.
    pub fn one_hot_indices(&self) -> Result<Vec<usize>> {
        (0..self.num_tiles)
            .map(|t| {
                let row = self.row(t);
                let ones: Vec<usize> = (0..row.len()).filter(|&m| row[m] == 1.0).collect();
                if ones.len() == 1 && row.iter().all(|&v| v == 0.0 || v == 1.0) {
                    Ok(ones[0])
                } else {
                    Err(Error::NotOneHot { row: t })
                }
            })
            .collect()
    }

    pub fn max_row_error(&self) -> f64 {
        (0..self.num_tiles)
            .map(|t| (self.row(t).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `tile,word` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let chosen = self.one_hot_indices()?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tile", "word"])?;
        for (t, m) in chosen.iter().enumerate() {
            w.write_record([t.to_string(), m.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row_sums_ok(b: &[f64], m: usize, tol: f64) -> bool {
    b.chunks(m).all(|row| (row.iter().sum::<f64>() - 1.0).abs() <= tol)
}

/// Factor scalars and pair coefficients of one active set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetCoefficients {
    pub users: Vec<usize>,
    /// `factors[p][r][a] = hbar_{a, users[p]}^H w_r / sigma`.
    pub factors: Vec<Vec<Vec<Complex64>>>,
    /// Pair coefficients of the signal power of user position `p`.
    pub signal: Vec<Vec<f64>>,
    /// Pair coefficients of the interference power of user position `p`.
    pub interference: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSinrCoefficients {
    pub num_tiles: usize,
    pub num_words: usize,
    pub num_embb: usize,
    pub sets: Vec<SetCoefficients>,
}

fn pair_coefficients(s: &[Complex64], out: &mut [f64]) {
    let n = s.len();
    for a in 0..n {
        out[pair_index(a, a, n)] += s[a].norm_sqr();
        for c in a + 1..n {
            out[pair_index(a, c, n)] += 2.0 * (s[a].conj() * s[c]).re;
        }
    }
}

/// Expands signal and interference powers of every served user as linear
/// functions of the pair products, for fixed precoders.
pub fn expand_sinr_coefficients(
    channels: &ChannelSet,
    sigma2: f64,
    pre: &PrecoderSet,
    num_embb: usize,
) -> Result<QuadraticSinrCoefficients> {
    let num_tiles = channels.num_tiles();
    let num_words = channels.num_online();
    if num_tiles == 0 || num_words == 0 {
        return Err(Error::Dimension("effective channels are not attached".into()));
    }
    let n = num_tiles * num_words;
    let scale = 1.0 / sigma2.sqrt();
    let sets = pre
        .users
        .par_iter()
        .zip(pre.w.par_iter())
        .map(|(users, ws)| {
            let factors: Vec<Vec<Vec<Complex64>>> = users
                .iter()
                .map(|&k| {
                    ws.iter()
                        .map(|w| {
                            let direct = channels.direct[k].dotc(w);
                            (0..n)
                                .map(|a| {
                                    let (t, m) = (a / num_words, a % num_words);
                                    let mut z = channels.effective[t][m][k].dotc(w);
                                    if t == 0 {
                                        z += direct;
                                    }
                                    z * scale
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let mut signal = Vec::with_capacity(users.len());
            let mut interference = Vec::with_capacity(users.len());
            for (p, per_r) in factors.iter().enumerate() {
                let mut f = vec![0.0; num_pairs(n)];
                let mut i = vec![0.0; num_pairs(n)];
                for (r, s) in per_r.iter().enumerate() {
                    pair_coefficients(s, if r == p { &mut f } else { &mut i });
                }
                signal.push(f);
                interference.push(i);
            }
            SetCoefficients {
                users: users.clone(),
                factors,
                signal,
                interference,
            }
        })
        .collect();
    Ok(QuadraticSinrCoefficients {
        num_tiles,
        num_words,
        num_embb,
        sets,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SetCoefficients {
    /// `(signal, interference)` of user position `p` from the pair products.
    pub fn powers(&self, p: usize, beta: &[f64]) -> (f64, f64) {
        (dot(&self.signal[p], beta), dot(&self.interference[p], beta))
    }

    /// `(signal, interference)` of user position `p` at a one-hot selection.
    pub fn powers_binary(&self, p: usize, chosen: &[usize], num_words: usize) -> (f64, f64) {
        let mut signal = 0.0;
        let mut interference = 0.0;
        for (r, s) in self.factors[p].iter().enumerate() {
            let z: Complex64 = chosen.iter().enumerate().map(|(t, &m)| s[t * num_words + m]).sum();
            if r == p {
                signal += z.norm_sqr();
            } else {
                interference += z.norm_sqr();
            }
        }
        (signal, interference)
    }

    /// Hermitian coefficient matrix `C[a][c] = conj(s_a) s_c` of the signal
    /// (`interference = false`) or interference power of user position `p`.
    pub fn hermitian(&self, p: usize, interference: bool) -> DMatrix<Complex64> {
        let n = self.factors[p][0].len();
        let mut out = DMatrix::zeros(n, n);
        for (r, s) in self.factors[p].iter().enumerate() {
            if (r != p) == interference {
                out += DMatrix::from_fn(n, n, |a, c| s[a].conj() * s[c]);
            }
        }
        out
    }
}

impl QuadraticSinrCoefficients {
    pub fn flat_len(&self) -> usize {
        self.num_tiles * self.num_words
    }

    /// SINR of user position `p` in set `l` under the pair products `beta`.
    pub fn sinr(&self, l: usize, p: usize, beta: &[f64]) -> f64 {
        let (f, i) = self.sets[l].powers(p, beta);
        f / (1.0 + i)
    }

    pub fn sinr_binary(&self, l: usize, p: usize, chosen: &[usize]) -> f64 {
        let (f, i) = self.sets[l].powers_binary(p, chosen, self.num_words);
        f / (1.0 + i)
    }

    /// Average eMBB rate under the pair products `beta`.
    pub fn rate(&self, probs: &[f64], beta: &[f64]) -> f64 {
        (0..self.sets.len())
            .map(|l| probs[l] * (0..self.num_embb).map(|i| self.sinr(l, i, beta).ln_1p() * LOG2_E).sum::<f64>())
            .sum()
    }

    pub fn rate_binary(&self, probs: &[f64], chosen: &[usize]) -> f64 {
        (0..self.sets.len())
            .map(|l| {
                probs[l]
                    * (0..self.num_embb)
                        .map(|i| self.sinr_binary(l, i, chosen).ln_1p() * LOG2_E)
                        .sum::<f64>()
            })
            .sum()
    }

    /// Sum over URLLC constraints of the relative shortfall `max(0, 1 - gamma / gamma_req)`.
    pub fn qos_violation_binary(&self, reqs: &[UrllcRequirement], chosen: &[usize]) -> f64 {
        let mut v = 0.0;
        for (l, set) in self.sets.iter().enumerate() {
            for (p, &k) in set.users.iter().enumerate().skip(self.num_embb) {
                let g_req = reqs[k - self.num_embb].gamma_req;
                if g_req > 0.0 {
                    v += (1.0 - self.sinr_binary(l, p, chosen) / g_req).max(0.0);
                }
            }
        }
        v
    }

    pub fn qos_holds_binary(&self, reqs: &[UrllcRequirement], chosen: &[usize]) -> bool {
        self.sets.iter().enumerate().all(|(l, set)| {
            set.users.iter().enumerate().skip(self.num_embb).all(|(p, &k)| {
                let g_req = reqs[k - self.num_embb].gamma_req;
                g_req <= 0.0 || self.sinr_binary(l, p, chosen) >= g_req * (1.0 - 1e-9)
            })
        })
    }
}

/// McCormick envelope of `beta_ac = b_a b_c` for every pair, as `(coeffs, constant)`
/// rows of `coeffs . x + constant <= 0`. `b` occupies `x[0..n]`, `beta` follows.
pub fn bigm_constraints(num_tiles: usize, num_words: usize) -> Vec<(SparseVec, f64)> {
    let n = num_tiles * num_words;
    let mut rows = Vec::with_capacity(5 * num_pairs(n));
    for a in 0..n {
        for c in a..n {
            let v = n + pair_index(a, c, n);
            rows.push((vec![(v, -1.0)], 0.0));
            rows.push((vec![(v, 1.0)], -1.0));
            rows.push((vec![(v, 1.0), (a, -1.0)], 0.0));
            if c != a {
                rows.push((vec![(v, 1.0), (c, -1.0)], 0.0));
                rows.push((vec![(v, -1.0), (a, 1.0), (c, 1.0)], -1.0));
            } else {
                rows.push((vec![(v, -1.0), (a, 2.0)], -1.0));
            }
        }
    }
    rows
}

/// Tangent upper bound of `sum (b - b^2)` at `b_ref` as `(coeffs over b, constant)`:
/// `sum [b - b_ref^2 - 2 b_ref (b - b_ref)]`.
pub fn tsa_binary_constraint(b_ref: &[f64]) -> (SparseVec, f64) {
    let coeffs = b_ref.iter().enumerate().map(|(a, &r)| (a, 1.0 - 2.0 * r)).collect();
    let constant = b_ref.iter().map(|r| r * r).sum();
    (coeffs, constant)
}

/// Options of the codeword surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P2Options {
    /// Weight of the linearized binary penalty in the objective.
    pub binary_penalty: f64,
    /// Include the box on `b` and the McCormick envelopes.
    pub relaxation_constraints: bool,
    /// Pin `b` and `beta` to the reference point.
    pub fix_selection: bool,
}

impl P2Options {
    pub fn from_settings(settings: &SolverSettings) -> Self {
        Self {
            binary_penalty: settings.binary_penalty,
            relaxation_constraints: true,
            fix_selection: false,
        }
    }
}

/// Variable layout of the codeword surrogate: `[b | beta | (chi, d) per (set, eMBB)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P2Layout {
    pub flat: usize,
    pub num_sets: usize,
    pub num_embb: usize,
}

impl P2Layout {
    pub fn beta(&self, pair: usize) -> usize {
        self.flat + pair
    }

    pub fn chi(&self, l: usize, i: usize) -> usize {
        self.flat + num_pairs(self.flat) + 2 * (l * self.num_embb + i)
    }

    pub fn d(&self, l: usize, i: usize) -> usize {
        self.chi(l, i) + 1
    }

    pub fn dim(&self) -> usize {
        self.flat + num_pairs(self.flat) + 2 * self.num_sets * self.num_embb
    }
}

fn dense_on_beta(layout: &P2Layout, coef: &[f64], scale: f64) -> SparseVec {
    coef.iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(q, &c)| (layout.beta(q), scale * c))
        .collect()
}

/// Builds the convex codeword surrogate around `sel_ref`. Returns the problem,
/// its layout and the reference point (tight `chi`, `d`).
pub fn build_p2_surrogate(
    coeffs: &QuadraticSinrCoefficients,
    sel_ref: &CodewordSelection,
    reqs: &[UrllcRequirement],
    sets: &ActiveSetTable,
    opts: &P2Options,
) -> (ConvexProblem, P2Layout, Vec<f64>) {
    let layout = P2Layout {
        flat: coeffs.flat_len(),
        num_sets: coeffs.sets.len(),
        num_embb: coeffs.num_embb,
    };
    let n = layout.flat;
    let e = coeffs.num_embb;
    let mut x_ref = vec![0.0; layout.dim()];
    x_ref[..n].copy_from_slice(&sel_ref.b);
    x_ref[n..n + num_pairs(n)].copy_from_slice(&sel_ref.beta);

    let mut terms = SparseVec::new();
    let (penalty, penalty_const) = tsa_binary_constraint(&sel_ref.b);
    let objective_linear: SparseVec = penalty.iter().map(|&(a, c)| (a, -opts.binary_penalty * c)).collect();
    let mut constraints: Vec<Box<dyn crate::convex::SmoothFunction>> = Vec::new();

    for (l, set) in coeffs.sets.iter().enumerate() {
        for (p, &k) in set.users.iter().enumerate() {
            let (f_ref, i_ref) = set.powers(p, &sel_ref.beta);
            if p < e {
                let chi0 = f_ref / (1.0 + i_ref);
                let d0 = 1.0 + i_ref;
                let (ci, di) = (layout.chi(l, p), layout.d(l, p));
                x_ref[ci] = chi0;
                x_ref[di] = d0;
                terms.push((ci, sets.probs[l] * LOG2_E));
                let (q, [lc, ld], k0) = product_upper_bound(chi0, d0);
                let mut linear = dense_on_beta(&layout, &set.signal[p], -1.0);
                linear.push((ci, lc));
                linear.push((di, ld));
                constraints.push(Box::new(QuadraticFunction::new(vec![ci, di], q, linear, k0)));
                let mut c8 = dense_on_beta(&layout, &set.interference[p], 1.0);
                c8.push((di, -1.0));
                constraints.push(Box::new(AffineFunction::new(c8, 1.0)));
                constraints.push(Box::new(AffineFunction::lower_bound(ci, -0.5)));
                constraints.push(Box::new(AffineFunction::lower_bound(di, 1.0 - 1e-9)));
            } else {
                let g = reqs[k - e].gamma_req;
                if g > 0.0 {
                    let mut row = dense_on_beta(&layout, &set.interference[p], g);
                    for (q, &c) in set.signal[p].iter().enumerate() {
                        if c != 0.0 {
                            row.push((layout.beta(q), -c));
                        }
                    }
                    constraints.push(Box::new(AffineFunction::new(row, g)));
                }
            }
        }
    }
    if opts.relaxation_constraints {
        for a in 0..n {
            constraints.push(Box::new(AffineFunction::lower_bound(a, 0.0)));
            constraints.push(Box::new(AffineFunction::upper_bound(a, 1.0)));
        }
        for (row, c) in bigm_constraints(coeffs.num_tiles, coeffs.num_words) {
            constraints.push(Box::new(AffineFunction::new(row, c)));
        }
    }
    let objective = Log1pSum {
        terms,
        linear: objective_linear,
        constant: -opts.binary_penalty * penalty_const,
    };
    let mut problem = ConvexProblem::new(layout.dim(), Box::new(objective));
    problem.constraints = constraints;
    let m = coeffs.num_words;
    for t in 0..coeffs.num_tiles {
        problem.equality((0..m).map(|w| (t * m + w, 1.0)).collect(), 1.0);
    }
    if opts.fix_selection {
        for v in 0..n + num_pairs(n) {
            problem.equality(vec![(v, 1.0)], x_ref[v]);
        }
    }
    (problem, layout, x_ref)
}

/// Codeword objective with the exact binary penalty:
/// `rate(beta) - eta * sum (b - b^2)`.
pub fn p2_objective(coeffs: &QuadraticSinrCoefficients, sel: &CodewordSelection, probs: &[f64], eta: f64) -> f64 {
    coeffs.rate(probs, &sel.beta) - eta * sel.b.iter().map(|b| b - b * b).sum::<f64>()
}

/// Result of the codeword SCA loop.
#[derive(Debug, Clone, PartialEq)]
pub struct P2Result {
    pub selection: CodewordSelection,
    pub trace: Vec<f64>,
    pub newton_iterations: usize,
    /// Status of the last convex solve; a failure leaves the incumbent in place.
    pub last_status: Option<SolveStatus>,
}

fn interior_start(layout: &P2Layout, x_ref: &[f64], sel: &CodewordSelection, relax: bool) -> Vec<f64> {
    let mut x = x_ref.to_vec();
    let n = layout.flat;
    if relax && sel.b.iter().any(|&v| v <= 1e-12 || v >= 1.0 - 1e-12) {
        let eps = 1e-3;
        let m = sel.num_words as f64;
        let b: Vec<f64> = sel.b.iter().map(|&v| (1.0 - eps) * v + eps / m).collect();
        let mixed = CodewordSelection::from_b(sel.num_tiles, sel.num_words, b);
        x[..n].copy_from_slice(&mixed.b);
        x[n..n + num_pairs(n)].copy_from_slice(&mixed.beta);
    }
    for l in 0..layout.num_sets {
        for i in 0..layout.num_embb {
            let (c, d) = (layout.chi(l, i), layout.d(l, i));
            let delta = 1e-6 * (1.0 + x[c].abs());
            x[d] += delta * x[d] / (2.0 * (x[c].max(0.0) + 1.0));
            x[c] -= delta;
        }
    }
    x
}

fn selection_from(layout: &P2Layout, x: &[f64], num_tiles: usize, num_words: usize) -> CodewordSelection {
    let n = layout.flat;
    CodewordSelection {
        num_tiles,
        num_words,
        b: x[..n].to_vec(),
        beta: x[n..n + num_pairs(n)].to_vec(),
        is_binary: false,
    }
}

/// SCA over the relaxed selection, starting from the feasible `init`.
pub fn optimize_codewords(
    coeffs: &QuadraticSinrCoefficients,
    reqs: &[UrllcRequirement],
    sets: &ActiveSetTable,
    init: &CodewordSelection,
    settings: &SolverSettings,
    opts: &P2Options,
) -> P2Result {
    let eta = opts.binary_penalty;
    let mut sel = init.clone();
    let mut current = p2_objective(coeffs, &sel, &sets.probs, eta);
    let mut out = P2Result {
        selection: sel.clone(),
        trace: vec![current],
        newton_iterations: 0,
        last_status: None,
    };
    let solver = solver_options(settings);
    for _ in 0..settings.i2_max {
        let (problem, layout, x_ref) = build_p2_surrogate(coeffs, &sel, reqs, sets, opts);
        let x0 = interior_start(&layout, &x_ref, &sel, opts.relaxation_constraints && !opts.fix_selection);
        let report = solve_convex(&problem, &x0, &solver);
        out.newton_iterations += report.iterations;
        out.last_status = Some(report.status);
        if !matches!(report.status, SolveStatus::Optimal | SolveStatus::IterationLimit) {
            break;
        }
        let candidate = selection_from(&layout, &report.x, coeffs.num_tiles, coeffs.num_words);
        let value = p2_objective(coeffs, &candidate, &sets.probs, eta);
        if !(value >= current) {
            break;
        }
        let rel = (value - current) / current.abs().max(1e-12);
        log::trace!(
            "codeword SCA: objective {value:.8}, binary gap {:.3e}, {} Newton",
            candidate.b.iter().map(|b| b - b * b).sum::<f64>(),
            report.iterations
        );
        sel = candidate;
        current = value;
        out.trace.push(current);
        out.selection = sel.clone();
        if rel < settings.sca_tol {
            break;
        }
    }
    out
}

/// Outcome of rounding a relaxed selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Rounding {
    pub selection: CodewordSelection,
    pub feasible: bool,
    pub repaired: bool,
    pub rate: f64,
}

/// Row-wise argmax (ties to the lowest index); when that breaks a URLLC
/// target, tiles are revisited in order of increasing rounding margin and
/// each takes the word that restores feasibility with the best rate, or else
/// the word with the smallest violation.
pub fn round_selection(
    sel: &CodewordSelection,
    coeffs: &QuadraticSinrCoefficients,
    reqs: &[UrllcRequirement],
    probs: &[f64],
) -> Result<Rounding> {
    let m = sel.num_words;
    let mut chosen: Vec<usize> = (0..sel.num_tiles)
        .map(|t| {
            let row = sel.row(t);
            (0..m).fold(0, |best, w| if row[w] > row[best] { w } else { best })
        })
        .collect();
    let mut repaired = false;
    if !coeffs.qos_holds_binary(reqs, &chosen) {
        repaired = true;
        let margin = |t: usize| {
            let mut row = sel.row(t).to_vec();
            row.sort_by(|a, b| b.total_cmp(a));
            row[0] - row.get(1).copied().unwrap_or(0.0)
        };
        let mut order: Vec<usize> = (0..sel.num_tiles).collect();
        order.sort_by(|&a, &b| margin(a).total_cmp(&margin(b)).then(a.cmp(&b)));
        for t in order {
            let mut best_feasible: Option<(f64, usize)> = None;
            let mut least_violation = (f64::INFINITY, chosen[t]);
            for w in 0..m {
                let mut trial = chosen.clone();
                trial[t] = w;
                if coeffs.qos_holds_binary(reqs, &trial) {
                    let r = coeffs.rate_binary(probs, &trial);
                    if best_feasible.is_none_or(|(br, _)| r > br) {
                        best_feasible = Some((r, w));
                    }
                } else {
                    let v = coeffs.qos_violation_binary(reqs, &trial);
                    if v < least_violation.0 {
                        least_violation = (v, w);
                    }
                }
            }
            match best_feasible {
                Some((_, w)) => {
                    chosen[t] = w;
                    break;
                }
                None => chosen[t] = least_violation.1,
            }
        }
    }
    let feasible = coeffs.qos_holds_binary(reqs, &chosen);
    Ok(Rounding {
        rate: coeffs.rate_binary(probs, &chosen),
        selection: CodewordSelection::from_indices(&chosen, m)?,
        feasible,
        repaired,
    })
}
