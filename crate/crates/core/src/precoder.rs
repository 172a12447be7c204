//! Precoder optimization for a fixed codeword selection.
//!
//! Every active set `l` has its own precoders and power budget, so the
//! problem splits into independent per-set problems that run in parallel.
//! Each is solved by successive convex approximation: received powers in the
//! numerators are replaced by their tangent planes and the eMBB rate
//! `log(1 + f/I)` is handled with auxiliary variables `chi <= f/d`, `d >= 1 + I`.
//!
//! Channels are divided by the noise standard deviation on entry, so the
//! noise power is 1 inside this module.
//!
//! Complex precoders are stacked as interleaved `(re, im)` pairs. With
//! `h = a + jb`, `|h^H w|^2 = (r1 . u)^2 + (r2 . u)^2` where
//! `r1 = (a_0, b_0, a_1, b_1, ...)` and `r2 = (-b_0, a_0, -b_1, a_1, ...)`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LOG2_E;

use crate::channel::{CMatrix, CVector};
use crate::convex::{
    solve_convex, AffineFunction, ConvexProblem, Log1pSum, QuadraticFunction, SolveReport, SolveStatus,
    SolverOptions, SparseVec,
};
use crate::error::{Error, Result};
use crate::fbl::UrllcRequirement;
use crate::scenario::{ActiveSetTable, SolverSettings};

/// Composite channels of every user, normalized by the noise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveLinks {
    pub h: Vec<CVector>,
    pub sigma2: f64,
    pub max_power: f64,
    pub num_embb: usize,
    pub sets: ActiveSetTable,
}

impl EffectiveLinks {
    /// `channels` are physical composite channels; they are divided by `sqrt(sigma2)`.
    pub fn new(channels: &[CVector], sigma2: f64, max_power: f64, num_embb: usize, sets: ActiveSetTable) -> Self {
        let scale = 1.0 / sigma2.sqrt();
        Self {
            h: channels.iter().map(|h| h * Complex64::new(scale, 0.0)).collect(),
            sigma2,
            max_power,
            num_embb,
            sets,
        }
    }

    pub fn num_antennas(&self) -> usize {
        self.h.first().map_or(0, |h| h.len())
    }

    pub fn num_urllc(&self) -> usize {
        self.h.len() - self.num_embb
    }

    pub fn served(&self, set: usize) -> Vec<usize> {
        self.sets.served_users(set, self.num_embb)
    }

    /// Requirement of global user `k`, `None` for eMBB users.
    pub fn requirement<'a>(&self, reqs: &'a [UrllcRequirement], k: usize) -> Option<&'a UrllcRequirement> {
        k.checked_sub(self.num_embb).map(|j| &reqs[j])
    }
}

/// One precoder per served user per active set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecoderSet {
    /// Served global user indices of each set (eMBB first).
    pub users: Vec<Vec<usize>>,
    /// `w[l][p]` belongs to user `users[l][p]`.
    #[serde(with = "complex_vectors")]
    pub w: Vec<Vec<CVector>>,
}

impl PrecoderSet {
    pub fn zeros(links: &EffectiveLinks) -> Self {
        let n = links.num_antennas();
        let users: Vec<Vec<usize>> = (0..links.sets.len()).map(|l| links.served(l)).collect();
        let w = users
            .iter()
            .map(|u| vec![CVector::zeros(n); u.len()])
            .collect();
        Self { users, w }
    }

    pub fn get(&self, set: usize, user: usize) -> Option<&CVector> {
        let p = self.users.get(set)?.iter().position(|&k| k == user)?;
        Some(&self.w[set][p])
    }

    pub fn set_power(&self, set: usize) -> f64 {
        self.w[set].iter().map(|w| w.norm_squared()).sum()
    }
}

mod complex_vectors {
    use super::CVector;
    use num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(w: &[Vec<CVector>], s: S) -> Result<S::Ok, S::Error> {
        let raw: Vec<Vec<Vec<[f64; 2]>>> = w
            .iter()
            .map(|set| set.iter().map(|v| v.iter().map(|z| [z.re, z.im]).collect()).collect())
            .collect();
        raw.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<CVector>>, D::Error> {
        let raw: Vec<Vec<Vec<[f64; 2]>>> = Vec::deserialize(d)?;
        Ok(raw
            .into_iter()
            .map(|set| {
                set.into_iter()
                    .map(|v| CVector::from_iterator(v.len(), v.into_iter().map(|[re, im]| Complex64::new(re, im))))
                    .collect()
            })
            .collect())
    }
}

pub fn received_power(h: &CVector, w: &CVector) -> f64 {
    h.dotc(w).norm_sqr()
}

/// SINR of user `k` in set `l`, interference from every other served user.
pub fn sinr(pre: &PrecoderSet, links: &EffectiveLinks, k: usize, l: usize) -> Result<f64> {
    let users = pre.users.get(l).ok_or_else(|| Error::OutOfRange(format!("set {l}")))?;
    let p = users
        .iter()
        .position(|&u| u == k)
        .ok_or(Error::InactiveUser { user: k, set: l })?;
    let h = &links.h[k];
    let signal = received_power(h, &pre.w[l][p]);
    let interference: f64 = pre.w[l]
        .iter()
        .enumerate()
        .filter(|&(r, _)| r != p)
        .map(|(_, w)| received_power(h, w))
        .sum();
    Ok(signal / (interference + 1.0))
}

/// `p_l * sum_i log2(1 + gamma_i)` over the eMBB users of set `l`.
pub fn set_objective(pre: &PrecoderSet, links: &EffectiveLinks, l: usize) -> f64 {
    let rate: f64 = (0..links.num_embb)
        .map(|i| sinr(pre, links, i, l).map_or(0.0, |g| g.ln_1p() * LOG2_E))
        .sum();
    links.sets.probs[l] * rate
}

pub fn objective(pre: &PrecoderSet, links: &EffectiveLinks) -> f64 {
    (0..links.sets.len()).map(|l| set_objective(pre, links, l)).sum()
}

/// Worst-case constraint satisfaction of a precoder set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    /// `min gamma / gamma_req` over URLLC users with a positive target (infinite if none).
    pub qos_ratio: f64,
    /// `max_l power_l / P_max`.
    pub power_ratio: f64,
}

impl Feasibility {
    pub fn holds(&self) -> bool {
        self.qos_ratio >= 1.0 - 1e-6 && self.power_ratio <= 1.0 + 1e-9
    }
}

pub fn feasibility(pre: &PrecoderSet, links: &EffectiveLinks, reqs: &[UrllcRequirement]) -> Feasibility {
    let mut qos = f64::INFINITY;
    let mut power = 0.0f64;
    for l in 0..links.sets.len() {
        power = power.max(pre.set_power(l) / links.max_power);
        for &k in &pre.users[l] {
            if let Some(req) = links.requirement(reqs, k) {
                if req.gamma_req > 0.0 {
                    let g = sinr(pre, links, k, l).unwrap_or(0.0);
                    qos = qos.min(g / req.gamma_req);
                }
            }
        }
    }
    Feasibility {
        qos_ratio: qos,
        power_ratio: power,
    }
}

/// Real vectors `(r1, r2)` with `|h^H w|^2 = (r1 . u)^2 + (r2 . u)^2`.
pub fn stacked_rows(h: &CVector) -> (Vec<f64>, Vec<f64>) {
    let mut r1 = Vec::with_capacity(2 * h.len());
    let mut r2 = Vec::with_capacity(2 * h.len());
    for z in h.iter() {
        r1.extend_from_slice(&[z.re, z.im]);
        r2.extend_from_slice(&[-z.im, z.re]);
    }
    (r1, r2)
}

pub fn stack(w: &CVector) -> Vec<f64> {
    w.iter().flat_map(|z| [z.re, z.im]).collect()
}

pub fn unstack(u: &[f64]) -> CVector {
    CVector::from_iterator(u.len() / 2, u.chunks(2).map(|c| Complex64::new(c[0], c[1])))
}

/// `r1 r1^T + r2 r2^T`, the real form of `|h^H w|^2`.
pub fn power_form(h: &CVector) -> DMatrix<f64> {
    let (r1, r2) = stacked_rows(h);
    let n = r1.len();
    DMatrix::from_fn(n, n, |i, j| r1[i] * r1[j] + r2[i] * r2[j])
}

/// Tangent plane of `|h^H w|^2` at `w_ref`: `2 Re{w_ref^H h h^H w} - |h^H w_ref|^2`.
/// Returns `(gradient over the stacked w, constant)`.
pub fn linearize_received_power(h: &CVector, w_ref: &CVector) -> (Vec<f64>, f64) {
    let (r1, r2) = stacked_rows(h);
    let u0 = stack(w_ref);
    let s1: f64 = r1.iter().zip(&u0).map(|(a, b)| a * b).sum();
    let s2: f64 = r2.iter().zip(&u0).map(|(a, b)| a * b).sum();
    let grad: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| 2.0 * (s1 * a + s2 * b)).collect();
    (grad, -(s1 * s1 + s2 * s2))
}

/// Convex upper bound of `chi * d`, tight at `(chi_ref, d_ref)`, from
/// `4 chi d = (a chi + d / a)^2 - (a chi - d / a)^2` with the subtracted square
/// linearized. `a = sqrt(d_ref / chi_ref)` makes the gap
/// `(a dchi - dd / a)^2 / 4` relative to the reference point instead of
/// absolute, which matters once SINRs are in the thousands.
///
/// Returns the quadratic over `(chi, d)`, the linear coefficients of `chi`
/// and `d`, and the constant.
pub fn product_upper_bound(chi_ref: f64, d_ref: f64) -> (DMatrix<f64>, [f64; 2], f64) {
    let a = if chi_ref > 0.0 && d_ref > 0.0 {
        (d_ref / chi_ref).sqrt().clamp(1e-4, 1e4)
    } else {
        1.0
    };
    let s = a * chi_ref - d_ref / a;
    let q = DMatrix::from_row_slice(2, 2, &[0.25 * a * a, 0.25, 0.25, 0.25 / (a * a)]);
    (q, [-0.5 * s * a, 0.5 * s / a], 0.25 * s * s)
}

fn offset_coeffs(coeffs: &[f64], offset: usize, scale: f64) -> SparseVec {
    coeffs.iter().enumerate().map(|(i, &c)| (offset + i, scale * c)).collect()
}

/// Quadratic form `scale * sum_{blocks} |h^H w_b|^2` over the given user blocks.
fn interference_form(h: &CVector, blocks: &[usize], block_len: usize, scale: f64) -> (Vec<usize>, DMatrix<f64>) {
    let q = power_form(h);
    let n = blocks.len() * block_len;
    let mut m = DMatrix::zeros(n, n);
    let mut indices = Vec::with_capacity(n);
    for (bi, &b) in blocks.iter().enumerate() {
        indices.extend((0..block_len).map(|i| b * block_len + i));
        m.view_mut((bi * block_len, bi * block_len), (block_len, block_len))
            .copy_from(&(&q * scale));
    }
    (indices, m)
}

/// Variable layout of one set's surrogate inside a (possibly joint) problem.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Layout {
    pub offset: usize,
    pub users: Vec<usize>,
    pub num_antennas: usize,
    pub num_embb: usize,
}

impl P1Layout {
    fn block_len(&self) -> usize {
        2 * self.num_antennas
    }

    pub fn w_index(&self, p: usize) -> usize {
        self.offset + p * self.block_len()
    }

    pub fn chi(&self, i: usize) -> usize {
        self.offset + self.users.len() * self.block_len() + 2 * i
    }

    pub fn d(&self, i: usize) -> usize {
        self.chi(i) + 1
    }

    pub fn dim(&self) -> usize {
        self.users.len() * self.block_len() + 2 * self.num_embb
    }

    pub fn extract(&self, x: &[f64]) -> Vec<CVector> {
        (0..self.users.len())
            .map(|p| unstack(&x[self.w_index(p)..self.w_index(p) + self.block_len()]))
            .collect()
    }
}

/// Objective terms and constraints of one set's convex surrogate around `w_ref`,
/// appended to `problem` at `offset`. Returns the layout and the reference
/// point `(w_ref, chi_ref, d_ref)` at which surrogate and true problem touch.
pub fn build_p1_surrogate(
    problem: &mut ConvexProblem,
    objective_terms: &mut SparseVec,
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    set: usize,
    w_ref: &[CVector],
    offset: usize,
) -> (P1Layout, Vec<f64>) {
    let users = links.served(set);
    let n_t = links.num_antennas();
    let layout = P1Layout {
        offset,
        users: users.clone(),
        num_antennas: n_t,
        num_embb: links.num_embb,
    };
    let bl = layout.block_len();
    let blocks: Vec<usize> = (0..users.len()).collect();
    let mut x_ref = vec![0.0; layout.dim()];
    for (p, w) in w_ref.iter().enumerate() {
        x_ref[p * bl..(p + 1) * bl].copy_from_slice(&stack(w));
    }
    let shift = |(indices, m): (Vec<usize>, DMatrix<f64>)| -> (Vec<usize>, DMatrix<f64>) {
        (indices.into_iter().map(|i| i + offset).collect(), m)
    };

    // power budget
    let all: Vec<usize> = (0..users.len() * bl).map(|i| i + offset).collect();
    problem.constrain(QuadraticFunction::new(
        all.clone(),
        DMatrix::identity(all.len(), all.len()),
        vec![],
        -links.max_power,
    ));

    for (p, &k) in users.iter().enumerate() {
        let h = &links.h[k];
        let others: Vec<usize> = blocks.iter().copied().filter(|&b| b != p).collect();
        let (grad, c0) = linearize_received_power(h, &w_ref[p]);
        let f_ref = -c0;
        let interference_ref: f64 = others.iter().map(|&b| received_power(h, &w_ref[b])).sum();
        match links.requirement(reqs, k) {
            Some(req) => {
                if req.gamma_req > 0.0 {
                    // gamma (1 + I) - lin f <= 0
                    let (idx, q) = shift(interference_form(h, &others, bl, req.gamma_req));
                    problem.constrain(QuadraticFunction::new(
                        idx,
                        q,
                        offset_coeffs(&grad, layout.w_index(p), -1.0),
                        req.gamma_req - c0,
                    ));
                }
            }
            None => {
                let i = p;
                let chi_ref = f_ref / (1.0 + interference_ref);
                let d_ref = 1.0 + interference_ref;
                x_ref[layout.chi(i) - offset] = chi_ref;
                x_ref[layout.d(i) - offset] = d_ref;
                objective_terms.push((layout.chi(i), links.sets.probs[set] * LOG2_E));
                // bound(chi d) - lin f <= 0
                let (q, [lc, ld], k0) = product_upper_bound(chi_ref, d_ref);
                let mut linear = offset_coeffs(&grad, layout.w_index(p), -1.0);
                linear.push((layout.chi(i), lc));
                linear.push((layout.d(i), ld));
                problem.constrain(QuadraticFunction::new(vec![layout.chi(i), layout.d(i)], q, linear, k0 - c0));
                // 1 + I - d <= 0
                if others.is_empty() {
                    problem.constrain(AffineFunction::new(vec![(layout.d(i), -1.0)], 1.0));
                } else {
                    let (idx, q) = shift(interference_form(h, &others, bl, 1.0));
                    problem.constrain(QuadraticFunction::new(idx, q, vec![(layout.d(i), -1.0)], 1.0));
                }
                problem.constrain(AffineFunction::lower_bound(layout.chi(i), -0.5));
            }
        }
    }
    (layout, x_ref)
}

pub fn solver_options(settings: &SolverSettings) -> SolverOptions {
    SolverOptions {
        tol: settings.tol,
        newton_per_stage: settings.newton_per_stage,
        max_newton: settings.max_newton,
        ..Default::default()
    }
}

/// Nudges the reference point off the tangency boundary: `chi` down, `d` up.
fn interior_start(layout: &P1Layout, x_ref: &[f64]) -> Vec<f64> {
    let mut x = x_ref.to_vec();
    for i in 0..layout.num_embb {
        let c = layout.chi(i) - layout.offset;
        let d = layout.d(i) - layout.offset;
        let delta = 1e-6 * (1.0 + x[c].abs());
        let delta_d = delta * x[d] / (2.0 * (x[c].max(0.0) + 1.0));
        x[c] -= delta;
        x[d] += delta_d;
    }
    x
}

/// Result of the SCA loop on one set.
#[derive(Debug, Clone, PartialEq)]
pub struct SetSolve {
    pub w: Vec<CVector>,
    /// True objective `p_l sum log2(1 + gamma)` after every accepted iterate, starting at the init.
    pub trace: Vec<f64>,
    pub newton_iterations: usize,
    pub last_status: Option<SolveStatus>,
}

fn set_objective_of(links: &EffectiveLinks, set: usize, w: &[CVector]) -> f64 {
    let pre = single_set(links, set, w);
    set_objective(&pre, links, set)
}

fn single_set(links: &EffectiveLinks, set: usize, w: &[CVector]) -> PrecoderSet {
    let mut pre = PrecoderSet::zeros(links);
    pre.w[set] = w.to_vec();
    pre
}

fn set_feasible(links: &EffectiveLinks, reqs: &[UrllcRequirement], set: usize, w: &[CVector]) -> bool {
    let pre = single_set(links, set, w);
    let power = pre.set_power(set);
    if power > links.max_power * (1.0 + 1e-9) {
        return false;
    }
    pre.users[set].iter().all(|&k| match links.requirement(reqs, k) {
        Some(r) if r.gamma_req > 0.0 => sinr(&pre, links, k, set).unwrap_or(0.0) >= r.gamma_req * (1.0 - 1e-9),
        _ => true,
    })
}

/// SCA on the surrogate of set `set`, starting from the feasible `init`.
pub fn optimize_set(
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    set: usize,
    init: &[CVector],
    settings: &SolverSettings,
) -> SetSolve {
    let mut w = init.to_vec();
    let mut current = set_objective_of(links, set, &w);
    let mut out = SetSolve {
        w: w.clone(),
        trace: vec![current],
        newton_iterations: 0,
        last_status: None,
    };
    if links.num_embb == 0 {
        return out;
    }
    let opts = solver_options(settings);
    for _ in 0..settings.i1_max {
        let mut terms = Vec::new();
        let mut problem = ConvexProblem::new(0, Box::new(AffineFunction::new(vec![], 0.0)));
        let (layout, x_ref) = build_p1_surrogate(&mut problem, &mut terms, links, reqs, set, &w, 0);
        problem.dim = layout.dim();
        problem.objective = Box::new(Log1pSum {
            terms,
            linear: vec![],
            constant: 0.0,
        });
        let report: SolveReport = solve_convex(&problem, &interior_start(&layout, &x_ref), &opts);
        out.newton_iterations += report.iterations;
        out.last_status = Some(report.status);
        if !matches!(report.status, SolveStatus::Optimal | SolveStatus::IterationLimit) {
            break;
        }
        let candidate = layout.extract(&report.x);
        let value = set_objective_of(links, set, &candidate);
        if !(value >= current) || !set_feasible(links, reqs, set, &candidate) {
            break;
        }
        let rel = (value - current) / current.abs().max(1e-12);
        w = candidate;
        current = value;
        out.trace.push(current);
        out.w = w.clone();
        if rel < settings.sca_tol {
            break;
        }
    }
    out
}

/// Outcome of precoder optimization over all sets.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Result {
    pub precoders: PrecoderSet,
    /// Total objective per SCA iteration (sets that stopped early hold their last value).
    pub trace: Vec<f64>,
    pub newton_iterations: usize,
}

pub fn optimize_precoders(
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    init: &PrecoderSet,
    settings: &SolverSettings,
) -> P1Result {
    let solves: Vec<SetSolve> = (0..links.sets.len())
        .into_par_iter()
        .map(|l| optimize_set(links, reqs, l, &init.w[l], settings))
        .collect();
    let len = solves.iter().map(|s| s.trace.len()).max().unwrap_or(1);
    let trace = (0..len)
        .map(|i| solves.iter().map(|s| s.trace[i.min(s.trace.len() - 1)]).sum())
        .collect();
    let mut precoders = init.clone();
    for (l, s) in solves.iter().enumerate() {
        precoders.w[l] = s.w.clone();
    }
    P1Result {
        precoders,
        trace,
        newton_iterations: solves.iter().map(|s| s.newton_iterations).sum(),
    }
}

fn unit_direction(h: &CVector) -> CVector {
    let n = h.norm();
    if n > 0.0 {
        h / Complex64::new(n, 0.0)
    } else {
        let mut e = CVector::zeros(h.len());
        e[0] = Complex64::new(1.0, 0.0);
        e
    }
}

/// Maximum-ratio precoders with the given per-user powers.
pub fn mrt(links: &EffectiveLinks, users: &[usize], powers: &[f64]) -> Vec<CVector> {
    users
        .iter()
        .zip(powers)
        .map(|(&k, &p)| unit_direction(&links.h[k]) * Complex64::new(p.max(0.0).sqrt(), 0.0))
        .collect()
}

/// Regularized zero-forcing directions `(I + sum_k q_k h_k h_k^H)^{-1} h_p`
/// scaled to the given powers, with `q_k` the per-user power share.
pub fn regularized_zf(links: &EffectiveLinks, users: &[usize], powers: &[f64]) -> Vec<CVector> {
    let n = links.num_antennas();
    let mut a = CMatrix::identity(n, n);
    for (&k, &p) in users.iter().zip(powers) {
        let h = &links.h[k];
        a += h * h.adjoint() * Complex64::new(p.max(0.0), 0.0);
    }
    let lu = a.lu();
    users
        .iter()
        .zip(powers)
        .map(|(&k, &p)| {
            let v = lu.solve(&links.h[k]).unwrap_or_else(|| links.h[k].clone());
            unit_direction(&v) * Complex64::new(p.max(0.0).sqrt(), 0.0)
        })
        .collect()
}

/// URLLC-only max-min margin SCA. Returns the precoders of the active URLLC
/// users and the achieved normalized margin.
fn max_margin(
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    set: usize,
    settings: &SolverSettings,
) -> (Vec<CVector>, f64) {
    let urllc: Vec<usize> = links.sets.sets[set].iter().map(|&j| links.num_embb + j).collect();
    let gammas: Vec<f64> = urllc.iter().map(|&k| links.requirement(reqs, k).unwrap().gamma_req).collect();
    let total: f64 = gammas.iter().sum();
    let budget = links.max_power * (1.0 - 1e-3);
    let powers: Vec<f64> = gammas.iter().map(|g| budget * g / total).collect();
    let bl = 2 * links.num_antennas();
    let margin_of = |w: &[CVector]| -> f64 {
        urllc
            .iter()
            .enumerate()
            .filter(|&(p, _)| gammas[p] > 0.0)
            .map(|(p, &k)| {
                let h = &links.h[k];
                let i: f64 = (0..w.len()).filter(|&r| r != p).map(|r| received_power(h, &w[r])).sum();
                (received_power(h, &w[p]) - gammas[p] * (1.0 + i)) / (1.0 + gammas[p])
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (mut w, mut tau) = [mrt(links, &urllc, &powers), regularized_zf(links, &urllc, &powers)]
        .into_iter()
        .map(|w| {
            let t = margin_of(&w);
            (w, t)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two candidates");
    let opts = solver_options(settings);
    let tau_idx = urllc.len() * bl;
    for _ in 0..settings.i1_max {
        let mut problem = ConvexProblem::new(tau_idx + 1, Box::new(AffineFunction::new(vec![(tau_idx, 1.0)], 0.0)));
        problem.constrain(QuadraticFunction::new(
            (0..tau_idx).collect(),
            DMatrix::identity(tau_idx, tau_idx),
            vec![],
            -links.max_power,
        ));
        for (p, &k) in urllc.iter().enumerate() {
            if gammas[p] <= 0.0 {
                continue;
            }
            let h = &links.h[k];
            let others: Vec<usize> = (0..urllc.len()).filter(|&b| b != p).collect();
            let (grad, c0) = linearize_received_power(h, &w[p]);
            let mut linear = offset_coeffs(&grad, p * bl, -1.0);
            linear.push((tau_idx, 1.0 + gammas[p]));
            if others.is_empty() {
                problem.constrain(AffineFunction::new(linear, gammas[p] - c0));
            } else {
                let (idx, q) = interference_form(h, &others, bl, gammas[p]);
                problem.constrain(QuadraticFunction::new(idx, q, linear, gammas[p] - c0));
            }
        }
        let mut x0: Vec<f64> = w.iter().flat_map(stack).collect();
        x0.push(tau - 1e-6 * (1.0 + tau.abs()));
        let report = solve_convex(&problem, &x0, &opts);
        if !matches!(report.status, SolveStatus::Optimal | SolveStatus::IterationLimit) {
            break;
        }
        let candidate: Vec<CVector> = (0..urllc.len()).map(|p| unstack(&report.x[p * bl..(p + 1) * bl])).collect();
        let value = margin_of(&candidate);
        if !(value > tau) {
            break;
        }
        let rel = (value - tau) / tau.abs().max(1e-12);
        w = candidate;
        tau = value;
        if rel < settings.sca_tol {
            break;
        }
    }
    (w, tau)
}

/// A strictly feasible starting point for every set, or `Infeasible` when
/// some set's URLLC targets cannot be met within the power budget.
pub fn find_feasible_precoders(
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    settings: &SolverSettings,
) -> Result<PrecoderSet> {
    let mut pre = PrecoderSet::zeros(links);
    let e = links.num_embb;
    for l in 0..links.sets.len() {
        let users = pre.users[l].clone();
        let urllc = &users[e..];
        let any_target = urllc
            .iter()
            .any(|&k| links.requirement(reqs, k).is_some_and(|r| r.gamma_req > 0.0));
        if !any_target {
            let share = links.max_power / users.len() as f64;
            pre.w[l] = mrt(links, &users, &vec![share; users.len()]);
            continue;
        }
        let (wu, tau) = max_margin(links, reqs, l, settings);
        if !(tau > 0.0) {
            return Err(Error::Infeasible(format!(
                "URLLC targets of set {l} unreachable (best normalized margin {tau:.3e})"
            )));
        }
        if e == 0 {
            pre.w[l] = wu;
            continue;
        }
        let blend = |lambda: f64| -> Vec<CVector> {
            let embb = mrt(links, &users[..e], &vec![lambda * links.max_power / e as f64; e]);
            let scale = Complex64::new((1.0 - lambda).sqrt(), 0.0);
            embb.into_iter().chain(wu.iter().map(|w| w * scale)).collect()
        };
        let strictly = |w: &[CVector]| -> bool {
            let trial = single_set(links, l, w);
            urllc.iter().all(|&k| {
                let r = links.requirement(reqs, k).unwrap();
                sinr(&trial, links, k, l).unwrap_or(0.0) > r.gamma_req
            })
        };
        let (mut lo, mut hi) = (0.0, 0.5);
        if strictly(&blend(hi)) {
            lo = hi;
        } else {
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if strictly(&blend(mid)) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        pre.w[l] = blend(0.5 * lo);
    }
    Ok(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::enumerate_active_sets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_links(seed: u64, n_t: usize, e: usize, u: usize, gain: f64, power: f64) -> EffectiveLinks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h: Vec<CVector> = (0..e + u)
            .map(|_| CVector::from_fn(n_t, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * gain))
            .collect();
        EffectiveLinks::new(&h, 1.0, power, e, enumerate_active_sets(u, None, 6).unwrap())
    }

    fn req(gamma: f64) -> UrllcRequirement {
        UrllcRequirement {
            bits: 0.0,
            eps: 0.1,
            n: 1.0,
            gamma_req: gamma,
        }
    }

    #[test]
    fn product_bound_is_tight_and_above() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let chi0 = 10f64.powf(rng.random_range(-3.0..5.0));
            let d0 = 10f64.powf(rng.random_range(0.0..4.0));
            let (q, [lc, ld], k) = product_upper_bound(chi0, d0);
            let eval = |chi: f64, d: f64| {
                q[(0, 0)] * chi * chi + 2.0 * q[(0, 1)] * chi * d + q[(1, 1)] * d * d + lc * chi + ld * d + k
            };
            assert!((eval(chi0, d0) - chi0 * d0).abs() <= 1e-9 * chi0 * d0);
            let chi = chi0 * rng.random_range(0.0..3.0);
            let d = d0 * rng.random_range(0.0..3.0);
            assert!(eval(chi, d) >= chi * d - 1e-9 * (chi0 * d0).max(1.0));
        }
        // degenerate reference falls back to the unscaled split
        let (_, _, k) = product_upper_bound(0.0, 2.0);
        assert!((k - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_user_mrt_sinr() {
        let links = random_links(1, 3, 1, 0, 1.0, 2.0);
        let mut pre = PrecoderSet::zeros(&links);
        pre.w[0] = mrt(&links, &[0], &[2.0]);
        let want = 2.0 * links.h[0].norm_squared();
        assert!((sinr(&pre, &links, 0, 0).unwrap() - want).abs() < 1e-12 * want);
        pre.w[0][0] = CVector::zeros(3);
        assert_eq!(sinr(&pre, &links, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn two_user_sinr_scalar_oracle() {
        let links = random_links(2, 2, 1, 1, 1.0, 1.0);
        let mut pre = PrecoderSet::zeros(&links);
        // set 1 = {urllc 0}: users [0, 1]
        pre.w[1] = vec![
            CVector::from_vec(vec![c(0.3, -0.1), c(0.2, 0.4)]),
            CVector::from_vec(vec![c(-0.5, 0.2), c(0.1, 0.1)]),
        ];
        let h = &links.h[1];
        let inner = |w: &CVector| {
            let mut s = c(0.0, 0.0);
            for n in 0..2 {
                s += h[n].conj() * w[n];
            }
            s.norm_sqr()
        };
        let want = inner(&pre.w[1][1]) / (inner(&pre.w[1][0]) + 1.0);
        assert!((sinr(&pre, &links, 1, 1).unwrap() - want).abs() < 1e-14);
        assert!(matches!(sinr(&pre, &links, 1, 0), Err(Error::InactiveUser { user: 1, set: 0 })));
    }

    #[test]
    fn stacked_form_matches_complex_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = CVector::from_fn(3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let w = CVector::from_fn(3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let u = nalgebra::DVector::from_vec(stack(&w));
            let q = power_form(&h);
            assert!((u.dot(&(&q * &u)) - received_power(&h, &w)).abs() < 1e-12);
        }
    }

    #[test]
    fn tangent_plane_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = CVector::from_fn(2, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let w0 = CVector::from_fn(2, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let (grad, c0) = linearize_received_power(&h, &w0);
        let lin = |w: &CVector| stack(w).iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>() + c0;
        assert!((lin(&w0) - received_power(&h, &w0)).abs() < 1e-12);
        for _ in 0..200 {
            let w = CVector::from_fn(2, |_, _| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
            assert!(lin(&w) <= received_power(&h, &w) + 1e-12);
        }
        // finite-difference gradient at w0
        let u0 = stack(&w0);
        for i in 0..4 {
            let step = 1e-6;
            let mut up = u0.clone();
            let mut um = u0.clone();
            up[i] += step;
            um[i] -= step;
            let fd = (received_power(&h, &unstack(&up)) - received_power(&h, &unstack(&um))) / (2.0 * step);
            assert!((fd - grad[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn surrogate_touches_true_problem_at_reference() {
        let links = random_links(5, 2, 2, 1, 1.0, 4.0);
        let reqs = vec![req(0.5)];
        let settings = SolverSettings::default();
        let init = find_feasible_precoders(&links, &reqs, &settings).unwrap();
        for l in 0..links.sets.len() {
            let mut terms = Vec::new();
            let mut problem = ConvexProblem::new(0, Box::new(AffineFunction::new(vec![], 0.0)));
            let (layout, x_ref) = build_p1_surrogate(&mut problem, &mut terms, &links, &reqs, l, &init.w[l], 0);
            problem.dim = layout.dim();
            let obj = Log1pSum {
                terms,
                linear: vec![],
                constant: 0.0,
            };
            use crate::convex::SmoothFunction;
            let truth = set_objective(&init, &links, l);
            assert!((obj.value(&x_ref) - truth).abs() < 1e-10 * (1.0 + truth));
            // C7-type rows are tight, everything else satisfied
            assert!(problem.max_violation(&x_ref) <= 1e-9 * (1.0 + links.h[0].norm_squared()));
        }
    }

    #[test]
    fn scalar_embb_gets_full_power() {
        let h = vec![CVector::from_vec(vec![c(0.6, -0.8)])];
        let links = EffectiveLinks::new(&h, 1.0, 3.0, 1, enumerate_active_sets(0, None, 6).unwrap());
        let settings = SolverSettings::default();
        let init = find_feasible_precoders(&links, &[], &settings).unwrap();
        let mut small = init.clone();
        small.w[0][0] *= c(0.1, 0.0);
        let res = optimize_precoders(&links, &[], &small, &settings);
        let want = (1.0 + 3.0f64).log2();
        assert!((res.trace.last().unwrap() - want).abs() < 1e-6, "{:?}", res.trace);
    }

    #[test]
    fn single_embb_converges_to_mrt() {
        let links = random_links(6, 3, 1, 0, 1.0, 2.0);
        let settings = SolverSettings::default();
        let mut init = PrecoderSet::zeros(&links);
        init.w[0][0] = CVector::from_vec(vec![c(0.1, 0.0), c(0.0, 0.1), c(0.1, 0.1)]);
        let res = optimize_precoders(&links, &[], &init, &settings);
        let w = &res.precoders.w[0][0];
        let cos = links.h[0].dotc(w).norm() / (links.h[0].norm() * w.norm());
        assert!(cos >= 1.0 - 1e-6, "cos {cos}");
        assert!((w.norm_squared() - 2.0).abs() < 1e-5);
        assert!(res.trace.windows(2).all(|t| t[1] >= t[0] - 1e-8));
    }

    #[test]
    fn urllc_only_meets_target() {
        let links = random_links(7, 2, 0, 1, 1.0, 1.0);
        let gamma = 0.5 * links.h[0].norm_squared();
        let reqs = vec![req(gamma)];
        let settings = SolverSettings::default();
        let pre = find_feasible_precoders(&links, &reqs, &settings).unwrap();
        let res = optimize_precoders(&links, &reqs, &pre, &settings);
        assert!(sinr(&res.precoders, &links, 0, 1).unwrap() >= gamma);
        assert!(feasibility(&res.precoders, &links, &reqs).holds());
    }

    #[test]
    fn single_urllc_feasibility_matches_capacity_bound() {
        let links = random_links(8, 2, 0, 1, 1.0, 1.0);
        let cap = links.max_power * links.h[0].norm_squared();
        let settings = SolverSettings::default();
        assert!(find_feasible_precoders(&links, &[req(0.98 * cap)], &settings).is_ok());
        assert!(matches!(
            find_feasible_precoders(&links, &[req(1.02 * cap)], &settings),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn zero_targets_accept_any_power_feasible_point() {
        let links = random_links(9, 2, 1, 2, 1.0, 1.0);
        let reqs = vec![req(0.0), req(0.0)];
        let pre = find_feasible_precoders(&links, &reqs, &SolverSettings::default()).unwrap();
        for l in 0..links.sets.len() {
            assert!(pre.set_power(l) <= links.max_power * (1.0 + 1e-12));
        }
    }

    #[test]
    fn sca_is_monotone_and_feasible() {
        let settings = SolverSettings::default();
        for seed in 0..5 {
            let links = random_links(20 + seed, 3, 2, 2, 1.0, 10.0);
            let reqs = vec![req(1.5), req(2.0)];
            let init = find_feasible_precoders(&links, &reqs, &settings).unwrap();
            let res = optimize_precoders(&links, &reqs, &init, &settings);
            assert!(res.trace.windows(2).all(|t| t[1] >= t[0] - 1e-8), "{:?}", res.trace);
            assert!(res.trace.last().unwrap() > &res.trace[0]);
            let f = feasibility(&res.precoders, &links, &reqs);
            assert!(f.holds(), "{f:?}");
        }
    }

    #[test]
    fn decomposed_matches_joint_solve() {
        let links = random_links(30, 2, 1, 1, 1.0, 5.0);
        let reqs = vec![req(1.0)];
        let settings = SolverSettings::default();
        let init = find_feasible_precoders(&links, &reqs, &settings).unwrap();
        // one SCA step on the joint surrogate
        let mut terms = Vec::new();
        let mut problem = ConvexProblem::new(0, Box::new(AffineFunction::new(vec![], 0.0)));
        let mut offset = 0;
        let mut layouts = Vec::new();
        let mut x0 = Vec::new();
        for l in 0..links.sets.len() {
            let (layout, x_ref) = build_p1_surrogate(&mut problem, &mut terms, &links, &reqs, l, &init.w[l], offset);
            offset += layout.dim();
            x0.extend(interior_start(&layout, &x_ref));
            layouts.push(layout);
        }
        problem.dim = offset;
        problem.objective = Box::new(Log1pSum {
            terms,
            linear: vec![],
            constant: 0.0,
        });
        let joint = solve_convex(&problem, &x0, &solver_options(&settings));
        assert!(joint.is_optimal());
        let one_step = SolverSettings { i1_max: 1, ..settings };
        let split = optimize_precoders(&links, &reqs, &init, &one_step);
        let mut joint_pre = init.clone();
        for (l, layout) in layouts.iter().enumerate() {
            joint_pre.w[l] = layout.extract(&joint.x);
        }
        let a = objective(&joint_pre, &links);
        let b = *split.trace.last().unwrap();
        assert!((a - b).abs() < 1e-6 * (1.0 + a), "{a} vs {b}");
    }
}
