//! Seed batches, parameter sweeps and result tables.
//!
//! Seed `i` of a sweep is `master_seed + i` for every axis value and scheme,
//! so schemes and sweep points are compared on the same channel draws.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ao::{run_baseline, run_proposed, run_upper_bound, AllocationSolution, Instance, SchemeKind};
use crate::codeword::{expand_sinr_coefficients, CodewordSelection};
use crate::error::{Error, Result};
use crate::fbl::{fbl_bits, required_sinr};
use crate::oracle::exhaustive_codeword_search;
use crate::precoder::sinr;
use crate::scenario::{OutagePolicy, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// URLLC packet size in bits.
    BitRequirement,
    /// BS power budget in dBm.
    MaxPower,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::BitRequirement => "b_req",
            SweepAxis::MaxPower => "p_max",
        }
    }

    pub fn apply(self, cfg: &ScenarioConfig, value: f64) -> ScenarioConfig {
        let mut out = cfg.clone();
        match self {
            SweepAxis::BitRequirement => {
                out.urllc_bits = value;
                if let Some(o) = out.urllc_overrides.as_mut() {
                    o.iter_mut().for_each(|s| s.bits = value);
                }
            }
            SweepAxis::MaxPower => out.max_power_dbm = value,
        }
        out
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b_req" => Ok(SweepAxis::BitRequirement),
            "p_max" => Ok(SweepAxis::MaxPower),
            _ => Err(Error::InvalidConfig(format!("unknown sweep axis `{s}` (b_req | p_max)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub schemes: Vec<SchemeKind>,
    pub num_seeds: usize,
    pub master_seed: u64,
    /// Write 0 for wall-clock times so output files are reproducible byte for byte.
    pub zero_timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub axis_value: f64,
    pub scheme: SchemeKind,
    pub seed: u64,
    pub objective: f64,
    pub outage: bool,
    pub feasible: bool,
    pub iterations: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub policy: OutagePolicy,
    pub records: Vec<RunRecord>,
    /// `(axis_value, seed, message)` of runs that failed outright.
    pub failures: Vec<(f64, u64, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub axis_value: f64,
    pub scheme: SchemeKind,
    /// Runs entering the mean (seeds where every scheme is in outage may be dropped).
    pub runs: usize,
    pub mean: f64,
    /// Half width of the normal-approximation 95% interval.
    pub ci95: f64,
    pub outage_rate: f64,
}

fn scheme_rng(seed: u64, scheme: SchemeKind) -> ChaCha8Rng {
    let tag = match scheme {
        SchemeKind::Baseline1 => 1,
        SchemeKind::Baseline2 => 2,
        _ => 0,
    };
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ tag)
}

/// Runs the requested schemes on one instance. Baseline 1 seeds the second
/// start of the proposed scheme, which in turn warm-starts the upper bound.
pub fn run_schemes(inst: &Instance, schemes: &[SchemeKind]) -> Result<Vec<AllocationSolution>> {
    let wants = |k| schemes.contains(&k);
    let b1 = if wants(SchemeKind::Baseline1) || wants(SchemeKind::Proposed) || wants(SchemeKind::UpperBound) {
        Some(run_baseline(
            SchemeKind::Baseline1,
            inst,
            &mut scheme_rng(inst.seed, SchemeKind::Baseline1),
        )?)
    } else {
        None
    };
    let proposed = if wants(SchemeKind::Proposed) || wants(SchemeKind::UpperBound) {
        Some(run_proposed(inst, b1.as_ref())?)
    } else {
        None
    };
    schemes
        .iter()
        .map(|&k| match k {
            SchemeKind::Proposed => Ok(proposed.clone().expect("computed above")),
            SchemeKind::UpperBound => run_upper_bound(inst, proposed.as_ref().expect("computed above")),
            SchemeKind::Baseline1 => Ok(b1.clone().expect("computed above")),
            SchemeKind::Baseline2 | SchemeKind::Baseline3 => run_baseline(k, inst, &mut scheme_rng(inst.seed, k)),
        })
        .collect()
}

pub fn run_sweep(cfg: &ScenarioConfig, spec: &SweepSpec) -> Result<SweepTable> {
    if spec.values.is_empty() || spec.schemes.is_empty() {
        return Err(Error::InvalidConfig("a sweep needs at least one value and one scheme".into()));
    }
    let configs: Vec<ScenarioConfig> = spec.values.iter().map(|&v| spec.axis.apply(cfg, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|v| (0..spec.num_seeds as u64).map(move |i| (v, spec.master_seed.wrapping_add(i))))
        .collect();
    let outcomes: Vec<(usize, u64, Result<Vec<AllocationSolution>>)> = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let out = Instance::prepare(&configs[v], seed).and_then(|inst| run_schemes(&inst, &spec.schemes));
            (v, seed, out)
        })
        .collect();
    let mut table = SweepTable {
        axis: spec.axis,
        policy: cfg.solver.outage_policy,
        records: Vec::new(),
        failures: Vec::new(),
    };
    for (v, seed, out) in outcomes {
        let axis_value = spec.values[v];
        match out {
            Ok(sols) => table.records.extend(sols.iter().map(|s| RunRecord {
                axis_value,
                scheme: s.scheme,
                seed,
                objective: s.objective,
                outage: s.outage,
                feasible: s.feasible,
                iterations: s.newton_iterations,
                wall_ms: if spec.zero_timing { 0.0 } else { s.wall_ms },
            })),
            Err(e) => {
                log::warn!("{} = {axis_value}, seed {seed}: {e}", spec.axis.name());
                table.failures.push((axis_value, seed, e.to_string()));
            }
        }
    }
    Ok(table)
}

/// Mean, 95% interval and outage rate per `(axis value, scheme)`, in first-seen order.
pub fn aggregate(table: &SweepTable) -> Vec<AggregateRow> {
    let mut keys: Vec<(f64, SchemeKind)> = Vec::new();
    for r in &table.records {
        if !keys.iter().any(|&(v, k)| v == r.axis_value && k == r.scheme) {
            keys.push((r.axis_value, r.scheme));
        }
    }
    let all_out = |value: f64, seed: u64| {
        table
            .records
            .iter()
            .filter(|r| r.axis_value == value && r.seed == seed)
            .all(|r| r.outage)
    };
    keys.into_iter()
        .map(|(value, scheme)| {
            let rows: Vec<&RunRecord> = table
                .records
                .iter()
                .filter(|r| r.axis_value == value && r.scheme == scheme)
                .collect();
            let outage_rate = rows.iter().filter(|r| r.outage).count() as f64 / rows.len() as f64;
            let kept: Vec<f64> = rows
                .iter()
                .filter(|r| table.policy == OutagePolicy::CountAsZero || !all_out(value, r.seed))
                .map(|r| if r.outage { 0.0 } else { r.objective })
                .collect();
            let n = kept.len();
            let mean = if n > 0 { kept.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let ci95 = if n > 1 {
                let var = kept.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                1.96 * (var / n as f64).sqrt()
            } else {
                0.0
            };
            AggregateRow {
                axis_value: value,
                scheme,
                runs: n,
                mean,
                ci95,
                outage_rate,
            }
        })
        .collect()
}

pub fn write_long_csv<W: Write>(table: &SweepTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis_value", "scheme", "seed", "objective", "outage", "iterations", "wall_ms"])?;
    for r in &table.records {
        w.write_record([
            r.axis_value.to_string(),
            r.scheme.name().to_string(),
            r.seed.to_string(),
            r.objective.to_string(),
            u8::from(r.outage).to_string(),
            r.iterations.to_string(),
            r.wall_ms.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["axis_value", "scheme", "runs", "mean", "ci95_low", "ci95_high", "outage_rate"])?;
    for r in rows {
        w.write_record([
            r.axis_value.to_string(),
            r.scheme.name().to_string(),
            r.runs.to_string(),
            r.mean.to_string(),
            (r.mean - r.ci95).to_string(),
            (r.mean + r.ci95).to_string(),
            r.outage_rate.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<dir>/<stem>_long.csv` and `<dir>/<stem>_summary.csv`.
pub fn emit_results(table: &SweepTable, dir: &Path, stem: &str) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let long = dir.join(format!("{stem}_long.csv"));
    let summary = dir.join(format!("{stem}_summary.csv"));
    write_long_csv(table, std::fs::File::create(&long)?)?;
    write_aggregate_csv(&aggregate(table), std::fs::File::create(&summary)?)?;
    Ok((long, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub seed: u64,
    pub init_objective: f64,
    pub ao_objective: f64,
    pub oracle_objective: f64,
    pub candidates: usize,
}

impl OracleCheck {
    pub fn bracket_holds(&self, slack: f64) -> bool {
        self.init_objective <= self.ao_objective + slack && self.ao_objective <= self.oracle_objective + slack
    }

    pub fn relative_gap(&self) -> f64 {
        if self.oracle_objective > 0.0 {
            (self.oracle_objective - self.ao_objective) / self.oracle_objective
        } else {
            0.0
        }
    }
}

/// AO versus exhaustive selection search on `seeds`; outage seeds are skipped.
pub fn oracle_check(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<OracleCheck>> {
    seeds
        .par_iter()
        .map(|&seed| -> Result<Option<OracleCheck>> {
            let inst = Instance::prepare(cfg, seed)?;
            let ao = crate::ao::run_ao(&inst)?;
            if ao.outage {
                return Ok(None);
            }
            let oracle = exhaustive_codeword_search(&inst)?;
            Ok(Some(OracleCheck {
                seed,
                init_objective: ao.init_objective,
                ao_objective: ao.objective,
                oracle_objective: oracle.objective,
                candidates: oracle.candidates,
            }))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Quick invariant checks on a few instances of `cfg`.
pub fn selftest(cfg: &ScenarioConfig, seeds: &[u64]) -> Result<Vec<SelfCheck>> {
    let mut checks = Vec::new();
    let mut worst = 0.0f64;
    for bits in [20.0, 180.0, 400.0] {
        let g = required_sinr(bits, 84.0, 1e-6)?;
        worst = worst.max((fbl_bits(g, 84.0, 1e-6)? - bits).abs());
    }
    checks.push(SelfCheck {
        name: "fbl_round_trip",
        passed: worst <= 1e-9,
        detail: format!("max error {worst:.2e} bits"),
    });
    let mut expansion_err = 0.0f64;
    let mut monotone = true;
    let mut feasible = true;
    for &seed in seeds {
        let inst = Instance::prepare(cfg, seed)?;
        let sol = crate::ao::run_ao(&inst)?;
        monotone &= sol.trace.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs());
        if sol.outage {
            continue;
        }
        feasible &= sol.feasible;
        let chosen = &sol.selections[0];
        let coeffs = expand_sinr_coefficients(&inst.channels, inst.sigma2, &sol.precoders, cfg.num_embb)?;
        let sel = CodewordSelection::from_indices(chosen, inst.num_words())?;
        let links = inst.links_for(chosen, &inst.sets)?;
        for (l, users) in sol.precoders.users.iter().enumerate() {
            for (p, &k) in users.iter().enumerate() {
                let direct = sinr(&sol.precoders, &links, k, l)?;
                let expanded = coeffs.sinr(l, p, &sel.beta);
                expansion_err = expansion_err.max((direct - expanded).abs() / direct.abs().max(1e-300));
            }
        }
    }
    checks.push(SelfCheck {
        name: "expansion_equivalence",
        passed: expansion_err <= 1e-9,
        detail: format!("max relative error {expansion_err:.2e}"),
    });
    checks.push(SelfCheck {
        name: "ao_monotone",
        passed: monotone,
        detail: format!("{} seeds", seeds.len()),
    });
    checks.push(SelfCheck {
        name: "qos_and_power",
        passed: feasible,
        detail: "every non-outage solution".into(),
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(value: f64, scheme: SchemeKind, seed: u64, objective: f64, outage: bool) -> RunRecord {
        RunRecord {
            axis_value: value,
            scheme,
            seed,
            objective,
            outage,
            feasible: !outage,
            iterations: 0,
            wall_ms: 0.0,
        }
    }

    #[test]
    fn empty_table_writes_header_only() {
        let table = SweepTable {
            axis: SweepAxis::MaxPower,
            policy: OutagePolicy::DropIfAllInfeasible,
            records: vec![],
            failures: vec![],
        };
        let mut buf = Vec::new();
        write_long_csv(&table, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "axis_value,scheme,seed,objective,outage,iterations,wall_ms\n"
        );
    }

    #[test]
    fn aggregation_matches_hand_computation() {
        use SchemeKind::*;
        let table = SweepTable {
            axis: SweepAxis::MaxPower,
            policy: OutagePolicy::DropIfAllInfeasible,
            records: vec![
                record(20.0, Proposed, 1, 2.0, false),
                record(20.0, Baseline3, 1, 1.0, false),
                record(20.0, Proposed, 2, 4.0, false),
                record(20.0, Baseline3, 2, 0.0, true),
                record(20.0, Proposed, 3, 0.0, true),
                record(20.0, Baseline3, 3, 0.0, true),
            ],
            failures: vec![],
        };
        let rows = aggregate(&table);
        assert_eq!(rows.len(), 2);
        let p = &rows[0];
        assert_eq!((p.scheme, p.runs), (Proposed, 2));
        assert!((p.mean - 3.0).abs() < 1e-15);
        assert!((p.ci95 - 1.96 * (2.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!((p.outage_rate - 1.0 / 3.0).abs() < 1e-15);
        let b = &rows[1];
        assert_eq!(b.runs, 2);
        assert!((b.mean - 0.5).abs() < 1e-15);

        let zero = SweepTable {
            policy: OutagePolicy::CountAsZero,
            ..table
        };
        let rows = aggregate(&zero);
        assert_eq!(rows[0].runs, 3);
        assert!((rows[0].mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn axis_application() {
        let cfg = ScenarioConfig::default();
        assert_eq!(SweepAxis::BitRequirement.apply(&cfg, 60.0).urllc_bits, 60.0);
        assert_eq!(SweepAxis::MaxPower.apply(&cfg, 20.0).max_power_dbm, 20.0);
        assert_eq!("p_max".parse::<SweepAxis>().unwrap(), SweepAxis::MaxPower);
        assert!("x".parse::<SweepAxis>().is_err());
    }
}
