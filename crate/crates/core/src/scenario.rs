//! Scenario configuration, frame timing and active URLLC user sets.
//!
//! Users are indexed globally as `0..E` (eMBB) followed by `E..E+U` (URLLC).
//! URLLC user `j` (0-based among URLLC users) is global user `E + j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbl::UrllcRequirement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficType {
    Embb,
    Urllc,
}

/// How per-tile received powers are combined when ranking reflection words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SetProbabilities {
    #[default]
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitialSelection {
    /// Per tile, the online word maximizing the summed received power of all users.
    #[default]
    Strongest,
    /// Uniformly random online word per tile.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutagePolicy {
    /// Drop a seed from the rate averages only if every compared scheme is in outage.
    #[default]
    DropIfAllInfeasible,
    /// Always count outages as zero rate.
    CountAsZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UrllcSpec {
    pub bits: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrsPlacement {
    pub position: [f64; 3],
    /// Azimuth of the panel normal in the horizontal plane, degrees from +x.
    pub facing_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRegion {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Geometry {
    pub bs_position: [f64; 3],
    pub bs_facing_deg: f64,
    pub irs: Vec<IrsPlacement>,
    /// Fixed user positions (eMBB first). When absent, users are dropped
    /// uniformly in `user_region` from the channel seed.
    pub user_positions: Option<Vec<[f64; 3]>>,
    pub user_region: UserRegion,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            bs_position: [-50.0, 0.0, 2.0],
            bs_facing_deg: 0.0,
            irs: vec![
                IrsPlacement {
                    position: [-30.0, 30.0, 6.0],
                    facing_deg: -90.0,
                },
                IrsPlacement {
                    position: [-30.0, -30.0, 6.0],
                    facing_deg: 90.0,
                },
            ],
            user_positions: None,
            user_region: UserRegion {
                x: [-45.0, -15.0],
                y: [-25.0, 25.0],
                height: 1.5,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Propagation {
    /// Log-distance exponent of the LoS BS-IRS and IRS-user links.
    pub irs_pathloss_exponent: f64,
    /// Log-distance exponent of the blocked direct BS-user links.
    pub direct_pathloss_exponent: f64,
    /// Rician K-factor of the IRS links in dB.
    pub rician_k_db: f64,
}

impl Default for Propagation {
    fn default() -> Self {
        Self {
            irs_pathloss_exponent: 2.0,
            direct_pathloss_exponent: 3.0,
            rician_k_db: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Duality-gap tolerance of the barrier solver.
    pub tol: f64,
    pub newton_per_stage: usize,
    pub max_newton: usize,
    /// Relative objective change that stops an SCA loop.
    pub sca_tol: f64,
    pub i1_max: usize,
    pub i2_max: usize,
    pub a_max: usize,
    pub ao_tol: f64,
    /// Weight (bits per unit) of the linearized binary-relaxation penalty.
    pub binary_penalty: f64,
    pub initial_selection: InitialSelection,
    pub outage_policy: OutagePolicy,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            newton_per_stage: 50,
            max_newton: 2000,
            sca_tol: 1e-4,
            i1_max: 25,
            i2_max: 25,
            a_max: 25,
            ao_tol: 1e-4,
            binary_penalty: 1.0,
            initial_selection: InitialSelection::Strongest,
            outage_policy: OutagePolicy::DropIfAllInfeasible,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_bs_antennas: usize,
    /// BS array grid `(n_y, n_z)`; defaults to a horizontal line of `num_bs_antennas`.
    pub bs_grid: Option<[usize; 2]>,
    pub num_embb: usize,
    pub num_urllc: usize,
    pub num_irs: usize,
    pub tiles_per_irs: usize,
    /// Elements per tile as `(Q_y, Q_z)`.
    pub tile_grid: [usize; 2],
    pub reflection_codebook_size: usize,
    pub wavefront_codebook_size: usize,
    pub preselect_per_user: usize,
    /// Optional cap on the number of distinct reflection words kept online.
    pub reflection_word_cap: Option<usize>,
    pub preselect_aggregation: Aggregation,
    pub bandwidth_hz: f64,
    pub minislot_s: f64,
    pub timeslot_s: f64,
    pub minislots_per_slot: usize,
    /// Frame-level bookkeeping only.
    pub frame_s: f64,
    pub slots_per_frame: usize,
    pub max_power_dbm: f64,
    pub noise_density_dbm_hz: f64,
    pub urllc_bits: f64,
    pub urllc_eps: f64,
    /// Per-URLLC-user requirements overriding `urllc_bits`/`urllc_eps`.
    pub urllc_overrides: Option<Vec<UrllcSpec>>,
    pub active_set_probs: SetProbabilities,
    pub direct_blockage_db: f64,
    pub geometry: Geometry,
    /// Element spacing of BS and IRS arrays, in wavelengths.
    pub element_spacing: f64,
    pub carrier_hz: f64,
    pub propagation: Propagation,
    pub rng_seed: u64,
    pub solver: SolverSettings,
    pub max_urllc_users: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_bs_antennas: 6,
            bs_grid: None,
            num_embb: 2,
            num_urllc: 2,
            num_irs: 2,
            tiles_per_irs: 4,
            tile_grid: [12, 12],
            reflection_codebook_size: 144,
            wavefront_codebook_size: 3,
            preselect_per_user: 2,
            reflection_word_cap: None,
            preselect_aggregation: Aggregation::Sum,
            bandwidth_hz: 1.2e6,
            minislot_s: 70e-6,
            timeslot_s: 0.5e-3,
            minislots_per_slot: 7,
            frame_s: 10e-3,
            slots_per_frame: 20,
            max_power_dbm: 28.0,
            noise_density_dbm_hz: -174.0,
            urllc_bits: 180.0,
            urllc_eps: 1e-6,
            urllc_overrides: None,
            active_set_probs: SetProbabilities::Uniform,
            direct_blockage_db: 25.0,
            geometry: Geometry::default(),
            element_spacing: 0.5,
            carrier_hz: 3.75e9,
            propagation: Propagation::default(),
            rng_seed: 1,
            solver: SolverSettings::default(),
            max_urllc_users: 6,
        }
    }
}

/// Quantities that follow from a configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivedQuantities {
    /// Symbols per mini-slot packet.
    pub n: f64,
    /// Noise power in watts.
    pub sigma2: f64,
    pub num_sets: usize,
    pub num_tiles: usize,
    /// Upper bound on the online codebook size, `B0 * K * M_s`.
    pub online_codewords: usize,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn num_users(&self) -> usize {
        self.num_embb + self.num_urllc
    }

    pub fn num_tiles(&self) -> usize {
        self.num_irs * self.tiles_per_irs
    }

    pub fn elements_per_tile(&self) -> usize {
        self.tile_grid[0] * self.tile_grid[1]
    }

    pub fn bs_grid(&self) -> [usize; 2] {
        self.bs_grid.unwrap_or([self.num_bs_antennas, 1])
    }

    pub fn max_power_w(&self) -> f64 {
        dbm_to_watts(self.max_power_dbm)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn traffic_type(&self, user: usize) -> TrafficType {
        if user < self.num_embb {
            TrafficType::Embb
        } else {
            TrafficType::Urllc
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("num_bs_antennas", self.num_bs_antennas),
            ("num_irs", self.num_irs),
            ("tiles_per_irs", self.tiles_per_irs),
            ("tile_grid[0]", self.tile_grid[0]),
            ("tile_grid[1]", self.tile_grid[1]),
            ("reflection_codebook_size", self.reflection_codebook_size),
            ("wavefront_codebook_size", self.wavefront_codebook_size),
            ("preselect_per_user", self.preselect_per_user),
            ("minislots_per_slot", self.minislots_per_slot),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.num_users() == 0 {
            return bad("at least one user is required".into());
        }
        if self.num_urllc > self.max_urllc_users {
            return Err(Error::Capacity {
                what: "num_urllc",
                requested: self.num_urllc,
                cap: self.max_urllc_users,
            });
        }
        let [gy, gz] = self.bs_grid();
        if gy * gz != self.num_bs_antennas {
            return bad(format!(
                "bs_grid {gy}x{gz} does not hold {} antennas",
                self.num_bs_antennas
            ));
        }
        if !(self.bandwidth_hz > 0.0 && self.minislot_s > 0.0 && self.carrier_hz > 0.0) {
            return bad("bandwidth, mini-slot duration and carrier must be positive".into());
        }
        if (self.bandwidth_hz * self.minislot_s).round() < 1.0 {
            return bad("W * T_ms must give at least one symbol".into());
        }
        if !self.max_power_dbm.is_finite() {
            return bad("max_power_dbm must be finite".into());
        }
        if !(self.element_spacing > 0.0) {
            return bad("element_spacing must be positive".into());
        }
        for spec in self.urllc_specs() {
            if !(spec.eps > 0.0 && spec.eps < 0.5) {
                return bad(format!("URLLC eps {} not in (0, 0.5)", spec.eps));
            }
            if !(spec.bits >= 0.0) {
                return bad(format!("URLLC bits {} < 0", spec.bits));
            }
        }
        if let Some(o) = &self.urllc_overrides {
            if o.len() != self.num_urllc {
                return bad(format!(
                    "urllc_overrides has {} entries for {} URLLC users",
                    o.len(),
                    self.num_urllc
                ));
            }
        }
        if let SetProbabilities::Explicit(p) = &self.active_set_probs {
            let l = 1usize << self.num_urllc;
            if p.len() != l {
                return bad(format!("{} set probabilities for L = {l} sets", p.len()));
            }
            if p.iter().any(|&x| !(x >= 0.0)) {
                return bad("set probabilities must be non-negative".into());
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return bad(format!("set probabilities sum to {s}, not 1"));
            }
        }
        if self.geometry.irs.len() < self.num_irs {
            return bad(format!(
                "{} IRS placements for {} IRSs",
                self.geometry.irs.len(),
                self.num_irs
            ));
        }
        if let Some(p) = &self.geometry.user_positions {
            if p.len() != self.num_users() {
                return bad(format!("{} user positions for {} users", p.len(), self.num_users()));
            }
        }
        let r = &self.geometry.user_region;
        if !(r.x[0] <= r.x[1] && r.y[0] <= r.y[1]) {
            return bad("user_region bounds are inverted".into());
        }
        let s = &self.solver;
        if !(s.tol > 0.0 && s.sca_tol > 0.0 && s.ao_tol > 0.0 && s.binary_penalty >= 0.0) {
            return bad("solver tolerances must be positive".into());
        }
        Ok(())
    }

    /// Per-URLLC-user bit/error targets.
    pub fn urllc_specs(&self) -> Vec<UrllcSpec> {
        match &self.urllc_overrides {
            Some(o) => o.clone(),
            None => vec![
                UrllcSpec {
                    bits: self.urllc_bits,
                    eps: self.urllc_eps,
                };
                self.num_urllc
            ],
        }
    }

    pub fn derived(&self) -> DerivedQuantities {
        let n = (self.bandwidth_hz * self.minislot_s).round();
        let noise_dbm = self.noise_density_dbm_hz + 10.0 * self.bandwidth_hz.log10();
        DerivedQuantities {
            n,
            sigma2: dbm_to_watts(noise_dbm),
            num_sets: 1 << self.num_urllc,
            num_tiles: self.num_tiles(),
            online_codewords: self.wavefront_codebook_size * self.num_users() * self.preselect_per_user,
        }
    }

    pub fn requirements(&self) -> Result<Vec<UrllcRequirement>> {
        let n = self.derived().n;
        self.urllc_specs()
            .iter()
            .map(|s| UrllcRequirement::new(s.bits, s.eps, n))
            .collect()
    }

    pub fn active_sets(&self) -> Result<ActiveSetTable> {
        let probs = match &self.active_set_probs {
            SetProbabilities::Uniform => None,
            SetProbabilities::Explicit(p) => Some(p.as_slice()),
        };
        enumerate_active_sets(self.num_urllc, probs, self.max_urllc_users)
    }
}

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// All `2^U` subsets of the URLLC users with their occurrence probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveSetTable {
    /// URLLC indices (0-based among URLLC users), ascending within each set.
    pub sets: Vec<Vec<usize>>,
    pub probs: Vec<f64>,
}

impl ActiveSetTable {
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn is_active(&self, set: usize, urllc: usize) -> bool {
        self.sets[set].binary_search(&urllc).is_ok()
    }

    /// Global user indices served in `set`: every eMBB user plus the active URLLC users.
    pub fn served_users(&self, set: usize, num_embb: usize) -> Vec<usize> {
        (0..num_embb)
            .chain(self.sets[set].iter().map(|&j| num_embb + j))
            .collect()
    }
}

/// Enumerates every subset of `{0..U}` ordered by cardinality, then lexicographically.
///
/// `probs = None` assigns `1/L` to every set.
pub fn enumerate_active_sets(num_urllc: usize, probs: Option<&[f64]>, cap: usize) -> Result<ActiveSetTable> {
    if num_urllc > cap {
        return Err(Error::Capacity {
            what: "num_urllc",
            requested: num_urllc,
            cap,
        });
    }
    let l = 1usize << num_urllc;
    let mut sets: Vec<Vec<usize>> = (0..l)
        .map(|mask| (0..num_urllc).filter(|j| mask & (1 << j) != 0).collect())
        .collect();
    sets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let probs = match probs {
        None => vec![1.0 / l as f64; l],
        Some(p) => {
            if p.len() != l {
                return Err(Error::InvalidConfig(format!("{} probabilities for {l} sets", p.len())));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > 1e-12 || p.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::InvalidConfig("set probabilities are not a simplex point".into()));
            }
            p.to_vec()
        }
    };
    Ok(ActiveSetTable { sets, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn empty_enumeration() {
        let t = enumerate_active_sets(0, None, 6).unwrap();
        assert_eq!(t.sets, vec![Vec::<usize>::new()]);
        assert_eq!(t.probs, vec![1.0]);
    }

    #[test]
    fn two_users_canonical_order() {
        let t = enumerate_active_sets(2, None, 6).unwrap();
        assert_eq!(t.sets, vec![vec![], vec![0], vec![1], vec![0, 1]]);
        assert_eq!(t.probs, vec![0.25; 4]);
    }

    #[test]
    fn three_users_match_power_set() {
        // independent generator: recursive power set
        fn power_set(items: &[usize]) -> Vec<BTreeSet<usize>> {
            match items.split_first() {
                None => vec![BTreeSet::new()],
                Some((first, rest)) => {
                    let tail = power_set(rest);
                    let mut out = tail.clone();
                    for mut s in tail {
                        s.insert(*first);
                        out.push(s);
                    }
                    out
                }
            }
        }
        let t = enumerate_active_sets(3, None, 6).unwrap();
        assert_eq!(t.len(), 8);
        let got: BTreeSet<BTreeSet<usize>> = t.sets.iter().map(|s| s.iter().copied().collect()).collect();
        let want: BTreeSet<BTreeSet<usize>> = power_set(&[0, 1, 2]).into_iter().collect();
        assert_eq!(got.len(), 8);
        assert_eq!(got, want);
        assert!(t.sets[0].is_empty());
        assert!(t.sets.windows(2).all(|w| w[0].len() <= w[1].len()));
        assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        assert!(matches!(
            enumerate_active_sets(7, None, 6),
            Err(Error::Capacity { requested: 7, cap: 6, .. })
        ));
    }

    #[test]
    fn derived_quantities_table_values() {
        let cfg = ScenarioConfig::default();
        let d = cfg.derived();
        assert_eq!(d.n, 84.0);
        // -174 dBm/Hz + 10 log10(1.2e6) = -113.208 dBm
        let dbm = 10.0 * (d.sigma2 * 1e3).log10();
        assert!((dbm + 113.20818753952375).abs() < 1e-9, "{dbm}");
        assert!((d.sigma2 - 4.7772860466419665e-15).abs() < 1e-24);
        assert_eq!(d.num_sets, 4);
        assert_eq!(d.num_tiles, 8);
        let cfg = ScenarioConfig {
            wavefront_codebook_size: 3,
            num_embb: 2,
            num_urllc: 2,
            preselect_per_user: 2,
            ..Default::default()
        };
        assert_eq!(cfg.derived().online_codewords, 24);
    }

    #[test]
    fn default_config_validates_and_round_trips_json() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(ScenarioConfig::from_json(&text).unwrap(), cfg);
        // partial files take defaults
        let partial = ScenarioConfig::from_json(r#"{"num_embb": 1, "num_urllc": 0}"#).unwrap();
        assert_eq!(partial.num_bs_antennas, 6);
        assert_eq!(partial.active_sets().unwrap().len(), 1);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ScenarioConfig {
            active_set_probs: SetProbabilities::Explicit(vec![0.5, 0.5, 0.1, 0.0]),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.active_set_probs = SetProbabilities::Explicit(vec![0.4, 0.3, 0.2, 0.1]);
        cfg.validate().unwrap();
        cfg.urllc_eps = 0.5;
        assert!(cfg.validate().is_err());
        cfg.urllc_eps = 1e-6;
        cfg.bs_grid = Some([4, 2]);
        assert!(cfg.validate().is_err());
        cfg.bs_grid = Some([3, 2]);
        cfg.validate().unwrap();
        cfg.num_urllc = 7;
        assert!(matches!(cfg.validate(), Err(Error::Capacity { .. })));
        assert!(ScenarioConfig::from_json(r#"{"no_such_field": 1}"#).is_err());
    }

    #[test]
    fn served_users_in_set() {
        let t = enumerate_active_sets(2, None, 6).unwrap();
        assert_eq!(t.served_users(0, 2), vec![0, 1]);
        assert_eq!(t.served_users(3, 2), vec![0, 1, 2, 3]);
        assert!(t.is_active(2, 1));
        assert!(!t.is_active(1, 1));
    }
}
