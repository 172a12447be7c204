//! Brute-force references for small instances.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::ao::Instance;
use crate::channel::CVector;
use crate::error::{Error, Result};
use crate::fbl::UrllcRequirement;
use crate::precoder::{find_feasible_precoders, objective, optimize_precoders, EffectiveLinks};
use crate::scenario::SolverSettings;

pub const EXHAUSTIVE_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ExhaustiveResult {
    /// Best selection, `None` when every candidate is infeasible.
    pub best: Option<Vec<usize>>,
    pub objective: f64,
    pub candidates: usize,
    pub feasible_candidates: usize,
}

/// Inner precoder settings of the oracle: same optimizer, run to a much
/// tighter stopping rule.
pub fn oracle_settings(base: &SolverSettings) -> SolverSettings {
    SolverSettings {
        sca_tol: 1e-10,
        i1_max: base.i1_max.max(200),
        ..*base
    }
}

fn decode(mut index: usize, tiles: usize, words: usize) -> Vec<usize> {
    let mut out = vec![0; tiles];
    for t in (0..tiles).rev() {
        out[t] = index % words;
        index /= words;
    }
    out
}

/// Optimizes the precoders for every binary selection and keeps the best.
pub fn exhaustive_codeword_search(inst: &Instance) -> Result<ExhaustiveResult> {
    let (tiles, words) = (inst.num_tiles(), inst.num_words());
    let total = (0..tiles).try_fold(1usize, |acc, _| acc.checked_mul(words).filter(|&v| v <= EXHAUSTIVE_CAP));
    let Some(total) = total else {
        return Err(Error::Capacity {
            what: "M^T candidate selections",
            requested: words.saturating_pow(tiles as u32),
            cap: EXHAUSTIVE_CAP,
        });
    };
    let settings = oracle_settings(inst.settings());
    let values: Vec<Option<f64>> = (0..total)
        .into_par_iter()
        .map(|i| -> Result<Option<f64>> {
            let links = inst.links_for(&decode(i, tiles, words), &inst.sets)?;
            match find_feasible_precoders(&links, &inst.reqs, &settings) {
                Ok(start) => Ok(Some(objective(
                    &optimize_precoders(&links, &inst.reqs, &start, &settings).precoders,
                    &links,
                ))),
                Err(Error::Infeasible(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    Ok(ExhaustiveResult {
        best: best.map(|(i, _)| decode(i, tiles, words)),
        objective: best.map_or(0.0, |(_, v)| v),
        candidates: total,
        feasible_candidates: values.iter().flatten().count(),
    })
}

fn normalized(v: CVector) -> Option<CVector> {
    let n = v.norm();
    (n > 1e-300).then(|| v / Complex64::new(n, 0.0))
}

/// Unit beam `sqrt(lambda) Pi h + sqrt(1 - lambda) Pi_perp h` (normalized parts),
/// where `Pi` projects onto the other user's channel. `lambda = 0` is zero forcing.
fn pareto_beam(h: &CVector, other: &CVector, lambda: f64) -> CVector {
    let Some(u) = normalized(other.clone()) else {
        return normalized(h.clone()).unwrap_or_else(|| CVector::zeros(h.len()));
    };
    let along = &u * u.dotc(h);
    let perp = h - &along;
    match (normalized(along), normalized(perp)) {
        (Some(a), Some(p)) => a * Complex64::new(lambda.sqrt(), 0.0) + p * Complex64::new((1.0 - lambda).sqrt(), 0.0),
        (Some(a), None) => a,
        (None, Some(p)) => p,
        (None, None) => CVector::zeros(h.len()),
    }
}

/// Rate of the served eMBB users, or `None` if a URLLC target fails.
fn grid_value(links: &EffectiveLinks, reqs: &[UrllcRequirement], users: &[usize], w: &[CVector]) -> Option<f64> {
    let mut rate = 0.0;
    for (p, &k) in users.iter().enumerate() {
        let h = &links.h[k];
        let signal = h.dotc(&w[p]).norm_sqr();
        let interference: f64 = (0..w.len()).filter(|&r| r != p).map(|r| h.dotc(&w[r]).norm_sqr()).sum();
        let g = signal / (1.0 + interference);
        match links.requirement(reqs, k) {
            Some(r) => {
                if g < r.gamma_req {
                    return None;
                }
            }
            None => rate += g.ln_1p() / std::f64::consts::LN_2,
        }
    }
    Some(links.sets.probs[0] * rate)
}

/// Grid search over beams and power for a single set with two antennas and
/// at most two served users, refined by shrinking local grids.
///
/// Two-user beams are drawn from the family spanned by the projections of
/// each channel onto and orthogonal to the other user's channel, which
/// contains every Pareto-optimal beam pair of two-user MISO.
pub fn grid_beamforming_oracle(links: &EffectiveLinks, reqs: &[UrllcRequirement], density: usize) -> Result<f64> {
    if links.num_antennas() != 2 || links.sets.len() != 1 {
        return Err(Error::Unsupported(format!(
            "grid oracle needs N_T = 2 and one set, got {} antennas and {} sets",
            links.num_antennas(),
            links.sets.len()
        )));
    }
    let users = links.served(0);
    if users.is_empty() || users.len() > 2 || density < 2 {
        return Err(Error::Unsupported(format!("{} users at density {density}", users.len())));
    }
    let p_max = links.max_power;
    let urllc_target = users
        .get(1)
        .and_then(|&k| links.requirement(reqs, k))
        .map(|r| r.gamma_req)
        .filter(|&g| g > 0.0 && users[0] < links.num_embb);
    // params: [total power fraction, split, lambda_0, lambda_1]
    let eval = |x: &[f64; 4]| -> Option<f64> {
        let total = p_max * x[0];
        let w: Vec<CVector> = if users.len() == 1 {
            let u = normalized(links.h[users[0]].clone()).unwrap_or_else(|| CVector::zeros(2));
            vec![u * Complex64::new(total.sqrt(), 0.0)]
        } else {
            let (a, b) = (&links.h[users[0]], &links.h[users[1]]);
            let (u0, u1) = (pareto_beam(a, b, x[2]), pareto_beam(b, a, x[3]));
            let split = match urllc_target {
                // largest eMBB share that keeps the URLLC user at its target
                Some(g) => {
                    let own = b.dotc(&u1).norm_sqr() * total;
                    let leak = b.dotc(&u0).norm_sqr() * total;
                    ((own - g) / (own + g * leak)).clamp(0.0, 1.0)
                }
                None => x[1],
            };
            vec![
                u0 * Complex64::new((total * split).sqrt(), 0.0),
                u1 * Complex64::new((total * (1.0 - split)).sqrt(), 0.0),
            ]
        };
        grid_value(links, reqs, &users, &w)
    };
    // Scaling both powers up raises every SINR, so two users run at full
    // power and only the split and the two beams are searched. With a URLLC
    // user the split is pinned by its target.
    let free: Vec<usize> = match (users.len(), urllc_target) {
        (1, _) => vec![0],
        (_, Some(_)) => vec![2, 3],
        _ => vec![1, 2, 3],
    };
    let search = |center: [f64; 4], half: f64, points: usize, best: &mut Option<([f64; 4], f64)>| {
        let step = 2.0 * half / (points - 1) as f64;
        for i in 0..points.pow(free.len() as u32) {
            let mut x = center;
            let mut rem = i;
            for &d in &free {
                x[d] = (center[d] - half + (rem % points) as f64 * step).clamp(0.0, 1.0);
                rem /= points;
            }
            if let Some(v) = eval(&x) {
                if best.is_none_or(|(_, b)| v > b) {
                    *best = Some((x, v));
                }
            }
        }
    };
    let start = [if users.len() == 1 { 0.5 } else { 1.0 }, 0.5, 0.5, 0.5];
    let mut best = None;
    search(start, 0.5, density, &mut best);
    let Some((mut center, _)) = best else {
        return Err(Error::Infeasible("no grid point meets the URLLC targets".into()));
    };
    let mut half = 1.0 / (density - 1) as f64;
    while half > 1e-10 {
        search(center, half, 5, &mut best);
        center = best.expect("seeded above").0;
        half *= 0.6;
    }
    Ok(best.expect("seeded above").1)
}
