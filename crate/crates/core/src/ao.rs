//! Alternating optimization of precoders and codeword selection, the
//! per-set upper bound and the three baselines.

use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{composite_channel, synthesize_channels, ChannelSet, CVector};
use crate::codebook::Codebook;
use crate::codeword::{expand_sinr_coefficients, optimize_codewords, round_selection, CodewordSelection, P2Options};
use crate::error::{Error, Result};
use crate::fbl::UrllcRequirement;
use crate::precoder::{
    feasibility, find_feasible_precoders, objective, optimize_precoders, set_objective, sinr, EffectiveLinks,
    PrecoderSet,
};
use crate::scenario::{ActiveSetTable, InitialSelection, ScenarioConfig, SolverSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Proposed,
    UpperBound,
    Baseline1,
    Baseline2,
    Baseline3,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 5] = [
        SchemeKind::Proposed,
        SchemeKind::UpperBound,
        SchemeKind::Baseline1,
        SchemeKind::Baseline2,
        SchemeKind::Baseline3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Proposed => "proposed",
            SchemeKind::UpperBound => "upper_bound",
            SchemeKind::Baseline1 => "baseline1",
            SchemeKind::Baseline2 => "baseline2",
            SchemeKind::Baseline3 => "baseline3",
        }
    }
}

impl std::str::FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scheme `{s}`")))
    }
}

/// Result of one scheme on one channel realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    pub scheme: SchemeKind,
    pub precoders: PrecoderSet,
    /// Chosen word per tile; one entry per active set for the upper bound,
    /// empty for schemes that bypass the codebook.
    pub selections: Vec<Vec<usize>>,
    /// Average eMBB sum rate in bits/s/Hz.
    pub objective: f64,
    /// Objective of the starting point (after the first precoder stage).
    pub init_objective: f64,
    /// `sinr[l][p]` of served user `precoders.users[l][p]`.
    pub sinr: Vec<Vec<f64>>,
    pub feasible: bool,
    pub outage: bool,
    /// Evaluated objective after each accepted AO cycle, starting at `init_objective`.
    pub trace: Vec<f64>,
    pub newton_iterations: usize,
    pub wall_ms: f64,
}

impl AllocationSolution {
    pub fn outage(scheme: SchemeKind, links: &EffectiveLinks) -> Self {
        let precoders = PrecoderSet::zeros(links);
        let sinr = precoders.users.iter().map(|u| vec![0.0; u.len()]).collect();
        Self {
            scheme,
            precoders,
            selections: Vec::new(),
            objective: 0.0,
            init_objective: 0.0,
            sinr,
            feasible: false,
            outage: true,
            trace: Vec::new(),
            newton_iterations: 0,
            wall_ms: 0.0,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `set,user,sinr` rows.
    pub fn write_sinr_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["set", "user", "sinr"])?;
        for (l, users) in self.precoders.users.iter().enumerate() {
            for (p, k) in users.iter().enumerate() {
                w.write_record([l.to_string(), k.to_string(), format!("{:.12e}", self.sinr[l][p])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// A channel realization with its online codebook and derived requirements.
#[derive(Debug, Clone)]
pub struct Instance {
    pub cfg: ScenarioConfig,
    pub seed: u64,
    pub channels: ChannelSet,
    pub codebook: Codebook,
    pub reqs: Vec<UrllcRequirement>,
    pub sets: ActiveSetTable,
    pub sigma2: f64,
    pub max_power: f64,
}

impl Instance {
    /// Draws channels for `seed`, builds and preselects the codebook.
    pub fn prepare(cfg: &ScenarioConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Self::from_channels(cfg, synthesize_channels(cfg, seed)?, seed)
    }

    pub fn from_channels(cfg: &ScenarioConfig, mut channels: ChannelSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if channels.num_users() != cfg.num_users() || channels.num_tiles() != cfg.num_tiles() {
            return Err(Error::Dimension(format!(
                "channels hold {} users / {} tiles, config expects {} / {}",
                channels.num_users(),
                channels.num_tiles(),
                cfg.num_users(),
                cfg.num_tiles()
            )));
        }
        let mut codebook = Codebook::build(cfg)?;
        codebook.preselect(
            &channels,
            cfg.preselect_per_user,
            cfg.preselect_aggregation,
            cfg.reflection_word_cap,
        )?;
        channels.attach_effective(&codebook)?;
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            channels,
            codebook,
            reqs: cfg.requirements()?,
            sets: cfg.active_sets()?,
            sigma2: cfg.derived().sigma2,
            max_power: cfg.max_power_w(),
        })
    }

    pub fn num_tiles(&self) -> usize {
        self.channels.num_tiles()
    }

    pub fn num_words(&self) -> usize {
        self.channels.num_online()
    }

    pub fn settings(&self) -> &SolverSettings {
        &self.cfg.solver
    }

    pub fn links(&self, composite: &[CVector], sets: &ActiveSetTable) -> EffectiveLinks {
        EffectiveLinks::new(composite, self.sigma2, self.max_power, self.cfg.num_embb, sets.clone())
    }

    pub fn links_for(&self, chosen: &[usize], sets: &ActiveSetTable) -> Result<EffectiveLinks> {
        let sel = CodewordSelection::from_indices(chosen, self.num_words())?;
        Ok(self.links(&composite_channel(&self.channels.direct, &sel, &self.channels.effective)?, sets))
    }

    /// Per tile, the online word with the largest summed effective-channel power.
    pub fn strongest_selection(&self) -> Vec<usize> {
        self.channels
            .effective
            .iter()
            .map(|words| {
                let power: Vec<f64> = words
                    .iter()
                    .map(|users| users.iter().map(|h| h.norm_squared()).sum())
                    .collect();
                (0..power.len()).fold(0, |best, m| if power[m] > power[best] { m } else { best })
            })
            .collect()
    }

    pub fn random_selection(&self, rng: &mut impl Rng) -> Vec<usize> {
        let m = self.num_words();
        (0..self.num_tiles()).map(|_| rng.random_range(0..m)).collect()
    }

    /// Starting selection of the AO according to the configured rule.
    pub fn initial_selection(&self) -> Vec<usize> {
        match self.cfg.solver.initial_selection {
            InitialSelection::Strongest => self.strongest_selection(),
            InitialSelection::Random => self.random_selection(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0b0e)),
        }
    }
}

/// Average eMBB sum rate of `pre` at the binary selection `chosen`.
pub fn evaluate_objective(inst: &Instance, pre: &PrecoderSet, chosen: &[usize]) -> Result<f64> {
    Ok(objective(pre, &inst.links_for(chosen, &inst.sets)?))
}

fn sinr_table(pre: &PrecoderSet, links: &EffectiveLinks) -> Vec<Vec<f64>> {
    pre.users
        .iter()
        .enumerate()
        .map(|(l, users)| users.iter().map(|&k| sinr(pre, links, k, l).unwrap_or(0.0)).collect())
        .collect()
}

fn warm_is_usable(warm: &PrecoderSet, links: &EffectiveLinks, reqs: &[UrllcRequirement]) -> bool {
    warm.users.len() == links.sets.len()
        && (0..links.sets.len()).all(|l| warm.users[l] == links.served(l))
        && feasibility(warm, links, reqs).holds()
}

/// Feasible start for the precoder stage: `warm` when it is usable, otherwise
/// the feasibility search.
fn starting_precoders(
    links: &EffectiveLinks,
    reqs: &[UrllcRequirement],
    warm: Option<&PrecoderSet>,
    settings: &SolverSettings,
) -> Result<PrecoderSet> {
    match warm {
        Some(w) if warm_is_usable(w, links, reqs) => Ok(w.clone()),
        _ => find_feasible_precoders(links, reqs, settings),
    }
}

/// Internal state of one alternating run.
#[derive(Debug, Clone)]
struct AoRun {
    chosen: Vec<usize>,
    precoders: PrecoderSet,
    links: EffectiveLinks,
    trace: Vec<f64>,
    newton_iterations: usize,
}

fn alternate(
    inst: &Instance,
    sets: &ActiveSetTable,
    chosen: Vec<usize>,
    warm: Option<&PrecoderSet>,
    max_cycles: usize,
) -> Result<AoRun> {
    let settings = inst.settings();
    let links = inst.links_for(&chosen, sets)?;
    let start = starting_precoders(&links, &inst.reqs, warm, settings)?;
    let p1 = optimize_precoders(&links, &inst.reqs, &start, settings);
    let mut run = AoRun {
        chosen,
        trace: vec![objective(&p1.precoders, &links)],
        precoders: p1.precoders,
        links,
        newton_iterations: p1.newton_iterations,
    };
    if inst.num_words() <= 1 || inst.cfg.num_embb == 0 {
        return Ok(run);
    }
    let opts = P2Options::from_settings(settings);
    for _ in 0..max_cycles {
        let current = *run.trace.last().expect("trace starts non-empty");
        let coeffs = expand_sinr_coefficients(&inst.channels, inst.sigma2, &run.precoders, inst.cfg.num_embb)?;
        let init = CodewordSelection::from_indices(&run.chosen, inst.num_words())?;
        let t2 = Instant::now();
        let p2 = optimize_codewords(&coeffs, &inst.reqs, sets, &init, settings, &opts);
        run.newton_iterations += p2.newton_iterations;
        let rounded = round_selection(&p2.selection, &coeffs, &inst.reqs, &sets.probs)?;
        log::debug!(
            "codeword stage: {} SCA steps, {} Newton, {:?}, {:.0} ms, rounded {:?} (repaired {})",
            p2.trace.len() - 1,
            p2.newton_iterations,
            p2.last_status,
            t2.elapsed().as_secs_f64() * 1e3,
            rounded.selection.one_hot_indices()?,
            rounded.repaired
        );
        let candidate = rounded.selection.one_hot_indices()?;
        let links = inst.links_for(&candidate, sets)?;
        let start = match starting_precoders(&links, &inst.reqs, Some(&run.precoders), settings) {
            Ok(s) => s,
            Err(Error::Infeasible(_)) => break,
            Err(e) => return Err(e),
        };
        let t1 = Instant::now();
        let p1 = optimize_precoders(&links, &inst.reqs, &start, settings);
        run.newton_iterations += p1.newton_iterations;
        let value = objective(&p1.precoders, &links);
        log::debug!(
            "precoder stage: {} SCA steps, {} Newton, {:.0} ms, objective {value:.6} (was {current:.6})",
            p1.trace.len() - 1,
            p1.newton_iterations,
            t1.elapsed().as_secs_f64() * 1e3
        );
        if !(value >= current) || !feasibility(&p1.precoders, &links, &inst.reqs).holds() {
            break;
        }
        let rel = (value - current) / current.abs().max(1e-12);
        let unchanged = candidate == run.chosen;
        run.chosen = candidate;
        run.precoders = p1.precoders;
        run.links = links;
        run.trace.push(value);
        if rel < settings.ao_tol || unchanged {
            break;
        }
    }
    Ok(run)
}

fn finish(scheme: SchemeKind, run: AoRun, reqs: &[UrllcRequirement], started: Instant) -> AllocationSolution {
    let feasible = feasibility(&run.precoders, &run.links, reqs).holds();
    AllocationSolution {
        scheme,
        sinr: sinr_table(&run.precoders, &run.links),
        objective: *run.trace.last().expect("trace starts non-empty"),
        init_objective: run.trace[0],
        selections: vec![run.chosen],
        precoders: run.precoders,
        feasible,
        outage: false,
        trace: run.trace,
        newton_iterations: run.newton_iterations,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    }
}

fn outage_for(inst: &Instance, scheme: SchemeKind, chosen: &[usize], started: Instant) -> Result<AllocationSolution> {
    let mut sol = AllocationSolution::outage(scheme, &inst.links_for(chosen, &inst.sets)?);
    sol.selections = vec![chosen.to_vec()];
    sol.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(sol)
}

/// Alternating optimization from `chosen`, optionally warm-started with precoders.
pub fn run_ao_from(
    inst: &Instance,
    chosen: &[usize],
    warm: Option<&PrecoderSet>,
    max_cycles: usize,
) -> Result<AllocationSolution> {
    let started = Instant::now();
    match alternate(inst, &inst.sets, chosen.to_vec(), warm, max_cycles) {
        Ok(run) => Ok(finish(SchemeKind::Proposed, run, &inst.reqs, started)),
        Err(Error::Infeasible(_)) => outage_for(inst, SchemeKind::Proposed, chosen, started),
        Err(e) => Err(e),
    }
}

/// Alternating optimization from the configured initial selection.
pub fn run_ao(inst: &Instance) -> Result<AllocationSolution> {
    run_ao_from(inst, &inst.initial_selection(), None, inst.settings().a_max)
}

/// The proposed scheme: the better of the AO from the configured start and,
/// when given, the AO warm-started at a baseline-1 solution.
pub fn run_proposed(inst: &Instance, baseline1: Option<&AllocationSolution>) -> Result<AllocationSolution> {
    let started = Instant::now();
    let mut best = run_ao(inst)?;
    let mut iterations = best.newton_iterations;
    if let Some(b1) = baseline1.filter(|b| !b.outage) {
        let alt = run_ao_from(inst, &b1.selections[0], Some(&b1.precoders), inst.settings().a_max)?;
        iterations += alt.newton_iterations;
        if !alt.outage && (best.outage || alt.objective > best.objective) {
            best = alt;
        }
    }
    best.newton_iterations = iterations;
    best.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(best)
}

/// Runs the AO separately for every active set, warm-started from `warm`,
/// and combines the per-set optima with the set probabilities.
pub fn run_upper_bound(inst: &Instance, warm: &AllocationSolution) -> Result<AllocationSolution> {
    let started = Instant::now();
    let chosen0 = warm.selections.first().cloned().unwrap_or_else(|| inst.initial_selection());
    let full_links = inst.links_for(&chosen0, &inst.sets)?;
    let mut sol = AllocationSolution::outage(SchemeKind::UpperBound, &full_links);
    sol.outage = false;
    sol.trace = vec![0.0];
    let mut feasible = true;
    for l in 0..inst.sets.len() {
        let single = ActiveSetTable {
            sets: vec![inst.sets.sets[l].clone()],
            probs: vec![1.0],
        };
        let warm_set = (!warm.outage).then(|| PrecoderSet {
            users: vec![warm.precoders.users[l].clone()],
            w: vec![warm.precoders.w[l].clone()],
        });
        let p = inst.sets.probs[l];
        match alternate(inst, &single, chosen0.clone(), warm_set.as_ref(), inst.settings().a_max) {
            Ok(run) => {
                let value = set_objective(&run.precoders, &run.links, 0);
                feasible &= feasibility(&run.precoders, &run.links, &inst.reqs).holds();
                sol.init_objective += p * run.trace[0];
                sol.objective += p * value;
                sol.sinr[l] = sinr_table(&run.precoders, &run.links).remove(0);
                sol.precoders.w[l] = run.precoders.w[0].clone();
                sol.selections.push(run.chosen);
                sol.newton_iterations += run.newton_iterations;
            }
            Err(Error::Infeasible(_)) => {
                return outage_for(inst, SchemeKind::UpperBound, &chosen0, started);
            }
            Err(e) => return Err(e),
        }
    }
    sol.trace = vec![sol.init_objective, sol.objective];
    sol.feasible = feasible;
    sol.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(sol)
}

fn precoders_only(
    inst: &Instance,
    scheme: SchemeKind,
    composite: &[CVector],
    chosen: Option<Vec<usize>>,
    started: Instant,
) -> Result<AllocationSolution> {
    let links = inst.links(composite, &inst.sets);
    let start = match find_feasible_precoders(&links, &inst.reqs, inst.settings()) {
        Ok(s) => s,
        Err(Error::Infeasible(_)) => {
            let mut sol = AllocationSolution::outage(scheme, &links);
            sol.selections = chosen.into_iter().collect();
            sol.wall_ms = started.elapsed().as_secs_f64() * 1e3;
            return Ok(sol);
        }
        Err(e) => return Err(e),
    };
    let p1 = optimize_precoders(&links, &inst.reqs, &start, inst.settings());
    let value = objective(&p1.precoders, &links);
    Ok(AllocationSolution {
        scheme,
        sinr: sinr_table(&p1.precoders, &links),
        feasible: feasibility(&p1.precoders, &links, &inst.reqs).holds(),
        precoders: p1.precoders,
        selections: chosen.into_iter().collect(),
        objective: value,
        init_objective: value,
        outage: false,
        trace: vec![value],
        newton_iterations: p1.newton_iterations,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Baseline schemes; `rng` drives the random codewords (1) and random phases (2).
pub fn run_baseline(kind: SchemeKind, inst: &Instance, rng: &mut impl Rng) -> Result<AllocationSolution> {
    let started = Instant::now();
    match kind {
        SchemeKind::Baseline1 => {
            let chosen = inst.random_selection(rng);
            let sel = CodewordSelection::from_indices(&chosen, inst.num_words())?;
            let composite = composite_channel(&inst.channels.direct, &sel, &inst.channels.effective)?;
            precoders_only(inst, kind, &composite, Some(chosen), started)
        }
        SchemeKind::Baseline2 => {
            let q = inst.cfg.elements_per_tile();
            let phases: Vec<CVector> = (0..inst.num_tiles())
                .map(|_| {
                    CVector::from_iterator(
                        q,
                        (0..q).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))),
                    )
                })
                .collect();
            let composite = inst.channels.composite_with_phases(&phases)?;
            precoders_only(inst, kind, &composite, None, started)
        }
        SchemeKind::Baseline3 => precoders_only(inst, kind, &inst.channels.direct, None, started),
        other => Err(Error::InvalidConfig(format!("{} is not a baseline", other.name()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codeword::expand_sinr_coefficients;

    fn tiny() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.num_bs_antennas = 2;
        cfg.num_embb = 1;
        cfg.num_urllc = 1;
        cfg.num_irs = 1;
        cfg.tiles_per_irs = 2;
        cfg.tile_grid = [4, 4];
        cfg.reflection_codebook_size = 16;
        cfg.wavefront_codebook_size = 3;
        cfg.preselect_per_user = 1;
        cfg.reflection_word_cap = Some(1);
        cfg.urllc_bits = 60.0;
        cfg
    }

    #[test]
    fn zero_precoders_give_zero_rate() {
        let inst = Instance::prepare(&tiny(), 3).unwrap();
        let links = inst.links_for(&[0, 0], &inst.sets).unwrap();
        let pre = PrecoderSet::zeros(&links);
        assert_eq!(evaluate_objective(&inst, &pre, &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn objective_matches_expansion() {
        let inst = Instance::prepare(&tiny(), 4).unwrap();
        let sol = run_ao(&inst).unwrap();
        assert!(!sol.outage);
        let coeffs = expand_sinr_coefficients(&inst.channels, inst.sigma2, &sol.precoders, 1).unwrap();
        let chosen = &sol.selections[0];
        let direct = evaluate_objective(&inst, &sol.precoders, chosen).unwrap();
        let expanded = coeffs.rate_binary(&inst.sets.probs, chosen);
        assert!((direct - expanded).abs() <= 1e-9 * direct.abs().max(1.0));
        assert!((direct - sol.objective).abs() <= 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn ao_trace_is_monotone_and_feasible() {
        let inst = Instance::prepare(&tiny(), 5).unwrap();
        let sol = run_ao(&inst).unwrap();
        assert!(sol.feasible);
        assert!(sol.trace.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-6)));
        assert!(sol.objective >= sol.init_objective);
    }

    #[test]
    fn single_word_ao_is_precoder_optimization() {
        let mut cfg = tiny();
        cfg.num_urllc = 0;
        cfg.tiles_per_irs = 1;
        cfg.wavefront_codebook_size = 1;
        let inst = Instance::prepare(&cfg, 6).unwrap();
        assert_eq!(inst.num_words(), 1);
        let sol = run_ao(&inst).unwrap();
        let b1 = run_baseline(SchemeKind::Baseline1, &inst, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sol.trace.len(), 1);
        assert!((sol.objective - b1.objective).abs() <= 1e-12);
    }

    #[test]
    fn upper_bound_dominates_warm_start() {
        let mut cfg = tiny();
        cfg.num_urllc = 2;
        cfg.urllc_bits = 40.0;
        let inst = Instance::prepare(&cfg, 7).unwrap();
        let proposed = run_proposed(&inst, None).unwrap();
        let ub = run_upper_bound(&inst, &proposed).unwrap();
        assert_eq!(ub.selections.len(), inst.sets.len());
        assert!(ub.objective >= proposed.objective - 1e-8);
    }

    #[test]
    fn baseline3_without_direct_link_is_zero() {
        let mut cfg = tiny();
        cfg.num_urllc = 0;
        cfg.direct_blockage_db = 400.0;
        let inst = Instance::prepare(&cfg, 8).unwrap();
        let b3 = run_baseline(SchemeKind::Baseline3, &inst, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b3.objective < 1e-9);
    }

    #[test]
    fn solution_json_round_trip() {
        let inst = Instance::prepare(&tiny(), 9).unwrap();
        let sol = run_ao(&inst).unwrap();
        let back = AllocationSolution::from_json(&sol.to_json().unwrap()).unwrap();
        assert_eq!(back.selections, sol.selections);
        assert_eq!(back.objective, sol.objective);
    }

    #[test]
    fn scheme_names_parse() {
        for k in SchemeKind::ALL {
            assert_eq!(k.name().parse::<SchemeKind>().unwrap(), k);
        }
        assert!("nope".parse::<SchemeKind>().is_err());
    }
}
